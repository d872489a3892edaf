//! Human-readable run summary on standard output.

use std::io::Write;

use crate::manifest::RunManifest;

/// Prints experiment name, key statistics and threshold judgments as a
/// fixed-width table. An empty manifest prints the headers only.
pub fn emit_summary(manifest: &RunManifest, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "experiment: {} (artifact v{})",
        manifest.experiment, manifest.artifact_version
    )?;
    writeln!(out, "divergent replicas: {}", manifest.divergence_count)?;

    writeln!(out, "{:<36} {}", "stat", "value")?;
    for (name, value) in &manifest.stats {
        writeln!(out, "{name:<36} {value}")?;
    }

    writeln!(out, "{:<36} {:<6} {}", "check", "status", "detail")?;
    for check in &manifest.checks {
        writeln!(
            out,
            "{:<36} {:<6} {}",
            check.name,
            if check.pass { "PASS" } else { "FAIL" },
            check.detail
        )?;
    }

    writeln!(out, "{:<36} {}", "output", "sha256")?;
    for entry in &manifest.outputs {
        writeln!(out, "{:<36} {}", entry.path, entry.sha256)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn empty_manifest_prints_headers_only() {
        let manifest = RunManifest::new("clt", BTreeMap::new());
        let mut buf = Vec::new();
        emit_summary(&manifest, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("experiment: clt"));
        assert!(text.contains("stat"));
        assert!(text.contains("check"));
        assert!(!text.contains("PASS"));
        assert!(!text.contains("FAIL"));
    }

    #[test]
    fn pass_and_fail_lines() {
        let mut manifest = RunManifest::new("clt", BTreeMap::new());
        manifest.record_stat("variance_ratio", 1.02);
        manifest.record_check("variance_ratio_band", true, "1.02 in [0.9, 1.1]".into());
        manifest.record_check("ks_stat_small", false, "0.05 < 0.035".into());
        let mut buf = Vec::new();
        emit_summary(&manifest, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("PASS"));
        assert!(text.contains("FAIL"));
        assert!(text.contains("variance_ratio"));
    }
}
