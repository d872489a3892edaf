//! Numerical smoke tests of the standing drift assumptions.
//!
//! Point samples cannot certify a global Lipschitz or dissipativity bound;
//! the probe reports secant statistics, a least-squares fit of
//! `<g(x)-g(y), x-y> ≈ -K1 |x-y|² + K2`, and any sampled pair violating the
//! declared constants. Declared constants remain the source of truth.

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::NoiseStream;
use crate::sde::SdeModel;
use crate::stats;

/// Relative slack applied to declared constants before flagging a violation.
pub const PROBE_TOL: f64 = 1e-9;

/// Absolute rounding allowance in the dissipativity comparison, scaled by
/// the magnitude of the inner product being tested.
const DISSIPATIVITY_ROUNDING: f64 = 1e-12;

/// Axis-aligned box probes sample from.
#[derive(Debug, Clone)]
pub struct ProbeBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ProbeBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Config("probe box bounds must have equal nonzero length".into()));
        }
        for i in 0..lo.len() {
            if !(lo[i] < hi[i]) {
                return Err(Error::Config(format!(
                    "probe box degenerate in coordinate {i}: [{}, {}]",
                    lo[i], hi[i]
                )));
            }
        }
        Ok(ProbeBox { lo, hi })
    }

    /// Symmetric box [-r, r]^d.
    pub fn centered(dim: usize, r: f64) -> Result<Self> {
        ProbeBox::new(vec![-r; dim], vec![r; dim])
    }
}

/// A sampled pair that broke a declared bound.
#[derive(Debug, Clone)]
pub struct ViolatingPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub observed: f64,
    pub allowed: f64,
}

/// Probe outcome over `n_pairs` uniform pairs.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub n_pairs: usize,
    /// max over pairs of |g(x)-g(y)| / |x-y|
    pub max_secant_ratio: f64,
    /// least-squares slope fit: K1_hat from -slope, K2_hat from intercept
    pub k1_hat: f64,
    pub k2_hat: f64,
    /// fitted slope is not negative: no K1 > 0 explains the samples
    pub anti_dissipative: bool,
    pub lipschitz_violations: Vec<ViolatingPair>,
    pub dissipativity_violations: Vec<ViolatingPair>,
}

impl AssumptionReport {
    pub fn clean(&self) -> bool {
        self.lipschitz_violations.is_empty() && self.dissipativity_violations.is_empty()
    }
}

/// Draws `n_pairs` uniform pairs from `probe_box` and checks the drift's
/// secant behavior against the model's declared constants.
pub fn probe_assumptions(
    model: &SdeModel,
    probe_box: &ProbeBox,
    n_pairs: usize,
    stream: &mut NoiseStream,
) -> Result<AssumptionReport> {
    if n_pairs < 2 {
        return Err(Error::Config(format!("need n_pairs >= 2, got {n_pairs}")));
    }
    let d = model.dim();
    if probe_box.lo.len() != d {
        return Err(Error::DimensionMismatch {
            what: "probe box",
            expected: d,
            got: probe_box.lo.len(),
        });
    }

    let mut uniform_point = |out: &mut [f64]| {
        for i in 0..d {
            // normals mapped through Phi stay on the counter-based stream
            let u = stats::normal_cdf(stream.next_normal());
            out[i] = probe_box.lo[i] + u * (probe_box.hi[i] - probe_box.lo[i]);
        }
    };

    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut dg = vec![0.0; d];

    let mut max_secant: f64 = 0.0;
    let mut dist_sq = Vec::with_capacity(n_pairs);
    let mut inner = Vec::with_capacity(n_pairs);
    let mut lipschitz_violations = Vec::new();
    let mut dissipativity_violations = Vec::new();

    for _ in 0..n_pairs {
        uniform_point(&mut x);
        uniform_point(&mut y);
        model.drift_into(&x, &mut gx);
        model.drift_into(&y, &mut gy);
        for v in gx.iter().chain(gy.iter()) {
            if !v.is_finite() {
                return Err(Error::NonFiniteDrift {
                    step: None,
                    state: x.clone(),
                });
            }
        }
        for i in 0..d {
            dx[i] = x[i] - y[i];
            dg[i] = gx[i] - gy[i];
        }
        let dsq = linalg::norm_sq(&dx);
        if dsq == 0.0 {
            continue;
        }
        let s = linalg::dot(&dg, &dx);
        let ratio = (linalg::norm_sq(&dg) / dsq).sqrt();
        max_secant = max_secant.max(ratio);
        dist_sq.push(dsq);
        inner.push(s);

        if let Some(l) = model.lipschitz() {
            if ratio > l * (1.0 + PROBE_TOL) {
                lipschitz_violations.push(ViolatingPair {
                    x: x.clone(),
                    y: y.clone(),
                    observed: ratio,
                    allowed: l,
                });
            }
        }
        if let Some((k1, k2)) = model.dissipativity() {
            let allowed = -k1 * dsq + k2 * (1.0 + PROBE_TOL);
            if s > allowed + DISSIPATIVITY_ROUNDING * (1.0 + s.abs() + k1 * dsq) {
                dissipativity_violations.push(ViolatingPair {
                    x: x.clone(),
                    y: y.clone(),
                    observed: s,
                    allowed,
                });
            }
        }
    }

    if dist_sq.len() < 2 {
        return Err(Error::Config("all sampled pairs were degenerate".into()));
    }
    let fit = stats::linear_fit(&dist_sq, &inner);
    Ok(AssumptionReport {
        n_pairs,
        max_secant_ratio: max_secant,
        k1_hat: -fit.slope,
        k2_hat: fit.intercept,
        anti_dissipative: !(fit.slope < 0.0),
        lipschitz_violations,
        dissipativity_violations,
    })
}
