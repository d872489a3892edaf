//! Strong (pathwise) discretization error of the EM scheme.
//!
//! The theory bounds `E |X_T − θ_{[T/η]}|² ≤ C_T η`. The experiment replaces
//! X_T by a reference EM chain at the fine step `η_ref = min(η)/64` and runs
//! every coarser level on the *same* Brownian path: a coarse step of size
//! `η = B η_ref` consumes the standardized block sum `(Σ ξ_i)/√B` of the B
//! fine increments it spans. For additive noise the measured mean-square
//! error decays like η², comfortably inside the η bound.

use crate::error::{Error, Result};
use crate::linalg;
use crate::parallel;
use crate::rng::{NoiseStream, NormalSource};
use crate::sde::{step_into, SdeModel, BLOW_UP_DEFAULT};
use crate::stats::{self, LinearFit};

/// Mean-square error at one step size.
#[derive(Debug, Clone, Copy)]
pub struct StrongErrorRow {
    pub eta: f64,
    pub mse: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone)]
pub struct StrongErrorTable {
    pub rows: Vec<StrongErrorRow>,
    /// log-log fit of mse against eta (None when some mse vanishes, e.g.
    /// zero drift, where coarse and reference paths coincide).
    pub slope: Option<LinearFit>,
    pub eta_ref: f64,
    pub replicas_used: usize,
    pub diverged: usize,
}

impl StrongErrorTable {
    /// `mse(η)/η` for each row, the quantity the `≤ C_T η` bound caps.
    pub fn mse_over_eta(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mse / r.eta).collect()
    }
}

struct Level {
    eta: f64,
    sqrt_eta: f64,
    block: usize,
    sqrt_block: f64,
    state: Vec<f64>,
    accum: Vec<f64>,
    filled: usize,
    diverged: bool,
}

/// Shared-path strong error over `eta_list`, `replicas` independent paths.
///
/// The reference step is `min(η)/64` unless `eta_ref_override` pins it (a
/// level running at the reference step itself reproduces the reference
/// bitwise, so its mse is exactly zero). Every η must be `η_ref · 2^j` for
/// integer j ≥ 0, and T an integer multiple of every η. Divergent replicas
/// are excluded and counted; more than 1% of them is an experiment error.
pub fn strong_error_mse(
    model: &SdeModel,
    t_horizon: f64,
    eta_list: &[f64],
    replicas: usize,
    initial_state: &[f64],
    eta_ref_override: Option<f64>,
    master_seed: u64,
    threads: usize,
) -> Result<StrongErrorTable> {
    if eta_list.is_empty() {
        return Err(Error::Config("eta_list must be nonempty".into()));
    }
    if replicas == 0 {
        return Err(Error::Config("need at least one replica".into()));
    }
    if !(t_horizon > 0.0) {
        return Err(Error::Config(format!("horizon must be > 0, got {t_horizon}")));
    }
    let d = model.dim();
    if initial_state.len() != d {
        return Err(Error::DimensionMismatch {
            what: "strong error initial state",
            expected: d,
            got: initial_state.len(),
        });
    }
    let eta_min = eta_list.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(eta_min > 0.0) || eta_list.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::Config("every eta must lie in (0,1)".into()));
    }
    let eta_ref = match eta_ref_override {
        Some(r) if r > 0.0 && r <= eta_min => r,
        Some(r) => {
            return Err(Error::Config(format!(
                "eta_ref {r} must be positive and no coarser than min eta {eta_min}"
            )))
        }
        None => eta_min / 64.0,
    };
    let mut blocks = Vec::with_capacity(eta_list.len());
    for &eta in eta_list {
        let ratio = eta / eta_ref;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > 1e-9 || rounded < 1.0 || !(rounded as u64).is_power_of_two() {
            return Err(Error::Config(format!(
                "eta {eta} is not a power-of-two multiple of eta_ref {eta_ref}"
            )));
        }
        blocks.push(rounded as usize);
    }
    let steps_ref_f = t_horizon / eta_ref;
    let steps_ref = steps_ref_f.round();
    if (steps_ref_f - steps_ref).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "horizon {t_horizon} is not an integer number of reference steps"
        )));
    }
    let steps_ref = steps_ref as usize;
    for (&eta, &b) in eta_list.iter().zip(blocks.iter()) {
        if steps_ref % b != 0 {
            return Err(Error::Config(format!(
                "horizon is not an integer number of steps at eta {eta}"
            )));
        }
    }

    let levels_spec: Vec<(f64, usize)> = eta_list.iter().cloned().zip(blocks.iter().cloned()).collect();
    let sqrt_eta_ref = eta_ref.sqrt();

    // per replica: squared terminal gap per level, or None if anything diverged
    let per_replica: Vec<Option<Vec<f64>>> = parallel::map_indexed(replicas, threads, |r| {
        let mut stream = NoiseStream::new(master_seed, r as u64);
        let mut levels: Vec<Level> = levels_spec
            .iter()
            .map(|&(eta, block)| Level {
                eta,
                sqrt_eta: eta.sqrt(),
                block,
                sqrt_block: (block as f64).sqrt(),
                state: initial_state.to_vec(),
                accum: vec![0.0; d],
                filled: 0,
                diverged: false,
            })
            .collect();
        let mut ref_state = initial_state.to_vec();
        let mut ref_diverged = false;
        let mut noise = vec![0.0; d];
        let mut coarse_noise = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut sn = vec![0.0; d];
        let mut next = vec![0.0; d];
        let bound_sq = BLOW_UP_DEFAULT * BLOW_UP_DEFAULT;

        for _ in 0..steps_ref {
            stream.fill_normals(&mut noise);
            if !ref_diverged {
                if step_into(model, &ref_state, eta_ref, sqrt_eta_ref, &noise, &mut g, &mut sn, &mut next)
                    .is_err()
                {
                    ref_diverged = true;
                } else {
                    ref_state.copy_from_slice(&next);
                    if !(linalg::norm_sq(&ref_state) <= bound_sq) {
                        ref_diverged = true;
                    }
                }
            }
            for level in levels.iter_mut() {
                for i in 0..d {
                    level.accum[i] += noise[i];
                }
                level.filled += 1;
                if level.filled == level.block {
                    for i in 0..d {
                        coarse_noise[i] = level.accum[i] / level.sqrt_block;
                        level.accum[i] = 0.0;
                    }
                    level.filled = 0;
                    if !level.diverged {
                        if step_into(
                            model, &level.state, level.eta, level.sqrt_eta, &coarse_noise, &mut g,
                            &mut sn, &mut next,
                        )
                        .is_err()
                        {
                            level.diverged = true;
                        } else {
                            level.state.copy_from_slice(&next);
                            if !(linalg::norm_sq(&level.state) <= bound_sq) {
                                level.diverged = true;
                            }
                        }
                    }
                }
            }
        }
        if ref_diverged || levels.iter().any(|l| l.diverged) {
            return None;
        }
        Some(
            levels
                .iter()
                .map(|l| {
                    let mut gap = 0.0;
                    for i in 0..d {
                        let diff = ref_state[i] - l.state[i];
                        gap += diff * diff;
                    }
                    gap
                })
                .collect(),
        )
    });

    let diverged = per_replica.iter().filter(|r| r.is_none()).count();
    if diverged * 100 > replicas {
        return Err(Error::DivergenceBudget {
            diverged,
            total: replicas,
        });
    }
    let clean: Vec<&Vec<f64>> = per_replica.iter().flatten().collect();
    let used = clean.len();
    let mut rows = Vec::with_capacity(eta_list.len());
    for (idx, &eta) in eta_list.iter().enumerate() {
        let gaps: Vec<f64> = clean.iter().map(|v| v[idx]).collect();
        let (mean, _, se) = stats::mean_sd_se(&gaps);
        rows.push(StrongErrorRow {
            eta,
            mse: mean,
            std_err: se,
        });
    }
    let slope = if rows.len() >= 2 && rows.iter().all(|r| r.mse > 0.0) {
        let xs: Vec<f64> = rows.iter().map(|r| r.eta.ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.mse.ln()).collect();
        Some(stats::linear_fit(&xs, &ys))
    } else {
        None
    };
    Ok(StrongErrorTable {
        rows,
        slope,
        eta_ref,
        replicas_used: used,
        diverged,
    })
}
