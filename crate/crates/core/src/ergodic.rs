//! Long-run behavior of the EM chain: the empirical-measure statistic
//! `Π_η(h) = (1/m) Σ_{k<m} h(θ_k)`, approximate draws from the chain's
//! invariant measure π_η, closed-form OU moments, the Lyapunov drift
//! inequality, and the invariant-measure bias curve.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::parallel;
use crate::rng::{NoiseStream, NormalSource};
use crate::sde::{default_chain_length, fold_chain, SdeModel, Trajectory, BLOW_UP_DEFAULT};
use crate::stats;

pub type ObservableFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A scalar test function h on the state space.
#[derive(Clone)]
pub struct Observable {
    name: String,
    eval: ObservableFn,
    smoothness_note: String,
}

impl std::fmt::Debug for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Observable")
            .field("name", &self.name)
            .field("smoothness_note", &self.smoothness_note)
            .finish()
    }
}

impl Observable {
    pub fn new(name: impl Into<String>, smoothness_note: impl Into<String>, eval: ObservableFn) -> Self {
        Observable {
            name: name.into(),
            eval,
            smoothness_note: smoothness_note.into(),
        }
    }

    /// h(x) = x₁. Unbounded; kept for its closed-form OU oracles.
    pub fn linear() -> Self {
        Observable::new("linear", "unbounded (not C_b^2); OU closed forms exact", Arc::new(|x: &[f64]| x[0]))
    }

    /// h(x) = x₁². Unbounded; kept for its closed-form OU oracles.
    pub fn quadratic() -> Self {
        Observable::new(
            "quadratic",
            "unbounded (not C_b^2); OU closed forms exact",
            Arc::new(|x: &[f64]| x[0] * x[0]),
        )
    }

    /// h(x) = tanh(x₁), a bounded C² observable satisfying the theorem
    /// hypotheses literally.
    pub fn tanh() -> Self {
        Observable::new("tanh", "C_b^2 (hypothesis-faithful)", Arc::new(|x: &[f64]| x[0].tanh()))
    }

    pub fn constant(c: f64) -> Self {
        Observable::new(format!("const({c})"), "constant", Arc::new(move |_: &[f64]| c))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn smoothness_note(&self) -> &str {
        &self.smoothness_note
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }
}

/// Default burn-in scale constant c_burn.
pub const DEFAULT_C_BURN: f64 = 20.0;

/// Minimum admissible burn-in, ⌈c_burn/η⌉ steps.
pub fn min_burn_in(eta: f64, c_burn: f64) -> usize {
    (c_burn / eta).ceil() as usize
}

/// Default burn-in ⌈(c_burn/η)·ln(1/η)⌉, never below the admissible minimum.
/// The geometric convergence rate of the chain makes the remaining
/// initialization bias O(η^c) at this length.
pub fn default_burn_in(eta: f64, c_burn: f64) -> usize {
    let scaled = (c_burn / eta * (1.0 / eta).ln()).ceil() as usize;
    scaled.max(min_burn_in(eta, c_burn))
}

/// `Π_η(h) = (1/m) Σ_{k=0}^{m-1} h(θ_k)` — the terminal state θ_m is excluded.
pub fn pi_eta_average(traj: &Trajectory, h: &Observable) -> Result<f64> {
    let m = traj.steps();
    if m == 0 {
        return Err(Error::Config("trajectory has no steps".into()));
    }
    let mut sum = 0.0;
    for k in 0..m {
        let v = h.eval(traj.state(k));
        if !v.is_finite() {
            return Err(Error::NonFiniteObservable { step: k, value: v });
        }
        sum += v;
    }
    Ok(sum / m as f64)
}

/// State after `burn_in` EM steps from `initial_state`: an approximate draw
/// from π_η whose bias decays geometrically in the burn-in length.
///
/// Rejects burn-in below ⌈c_burn/η⌉.
pub fn sample_stationary<S: NormalSource>(
    model: &SdeModel,
    eta: f64,
    burn_in: usize,
    c_burn: f64,
    initial_state: &[f64],
    blow_up: f64,
    source: &mut S,
) -> Result<Vec<f64>> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Config(format!("eta must lie in (0,1), got {eta}")));
    }
    let need = min_burn_in(eta, c_burn);
    if burn_in < need {
        return Err(Error::Config(format!(
            "burn_in {burn_in} below minimum {need} = ceil(c_burn/eta)"
        )));
    }
    if initial_state.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            what: "stationary sample start",
            expected: model.dim(),
            got: initial_state.len(),
        });
    }
    let mut state = initial_state.to_vec();
    fold_chain(model, eta, burn_in, blow_up, &mut state, source, 0, |_, _| {})?;
    Ok(state)
}

/// Closed-form oracle for the 1D OU chain `θ_{k+1} = (1-aη) θ_k + √η σ ξ`.
#[derive(Debug, Clone, Copy)]
pub struct OuClosedForm {
    pub a: f64,
    pub sigma: f64,
    pub eta: f64,
}

impl OuClosedForm {
    pub fn new(a: f64, sigma: f64, eta: f64) -> Result<Self> {
        if !(a > 0.0 && sigma > 0.0) {
            return Err(Error::Config(format!("need a > 0 and sigma > 0, got a={a}, sigma={sigma}")));
        }
        if !(a * eta > 0.0 && a * eta < 1.0) {
            return Err(Error::Config(format!(
                "AR(1) stationarity needs 0 < a*eta < 1, got {}",
                a * eta
            )));
        }
        Ok(OuClosedForm { a, sigma, eta })
    }
}

/// Exact moments of the OU chain and diffusion.
#[derive(Debug, Clone, Copy)]
pub struct OuMoments {
    pub mean: f64,
    /// stationary variance of the chain: σ²/(2a − a²η)
    pub variance: f64,
    /// stationary variance of the SDE: σ²/(2a)
    pub ct_variance: f64,
}

/// Mean and variances from the AR(1) fixed point v = (1-aη)² v + η σ².
pub fn ou_exact_moments(cf: &OuClosedForm) -> OuMoments {
    OuMoments {
        mean: 0.0,
        variance: cf.sigma * cf.sigma / (2.0 * cf.a - cf.a * cf.a * cf.eta),
        ct_variance: cf.sigma * cf.sigma / (2.0 * cf.a),
    }
}

/// Relative rounding allowance in the drift-inequality comparison.
const DRIFT_SLACK_TOL: f64 = 1e-12;

/// One probe point of the drift inequality.
#[derive(Debug, Clone)]
pub struct DriftPoint {
    pub point: Vec<f64>,
    /// exact E[V(θ')|θ] = |θ + η g(θ)|² + η tr(σσᵀ) + 1
    pub conditional_ev: f64,
    /// ρ V(θ) + b·1_D(θ)
    pub bound: f64,
    pub slack: f64,
    pub in_small_set: bool,
    pub holds: bool,
}

/// Outcome of [`lyapunov_drift_check`].
#[derive(Debug, Clone)]
pub struct DriftReport {
    pub rho: f64,
    pub b: f64,
    pub small_set_radius: f64,
    pub points: Vec<DriftPoint>,
    pub all_hold: bool,
    pub worst_slack: f64,
}

/// Checks `E[V(θ_{k+1})|θ_k] ≤ ρ V(θ_k) + b·1_D(θ_k)` with V(x) = |x|² + 1,
/// ρ = 1 − K₁η/2 + 2L²η², b = K₁η/2 − 2L²η² + 2|g(0)|²η² + η tr(σσᵀ) + 2Cη
/// (C = K₂ + |g(0)|²/(2K₁)) and D = {|x| ≤ 2b/(ηK₁)}, using the exact
/// Gaussian conditional expectation on the left-hand side.
pub fn lyapunov_drift_check(model: &SdeModel, eta: f64, points: &[Vec<f64>]) -> Result<DriftReport> {
    let (k1, k2) = model
        .dissipativity()
        .ok_or_else(|| Error::Config("drift check needs declared dissipativity (K1, K2)".into()))?;
    let l = model
        .lipschitz()
        .ok_or_else(|| Error::Config("drift check needs a declared Lipschitz constant".into()))?;
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Config(format!("eta must lie in (0,1), got {eta}")));
    }
    let d = model.dim();
    let g0 = model.drift_at(&vec![0.0; d]);
    let g0_sq = linalg::norm_sq(&g0);
    let c_const = k2 + g0_sq / (2.0 * k1);
    let tr = linalg::trace(model.sigma_sigma_t(), d);

    let rho = 1.0 - 0.5 * k1 * eta + 2.0 * l * l * eta * eta;
    let b = 0.5 * k1 * eta - 2.0 * l * l * eta * eta + 2.0 * g0_sq * eta * eta + eta * tr + 2.0 * c_const * eta;
    let small_set_radius = if b > 0.0 { 2.0 * b / (eta * k1) } else { 0.0 };

    let mut g = vec![0.0; d];
    let mut rows = Vec::with_capacity(points.len());
    let mut all_hold = true;
    let mut worst = f64::INFINITY;
    for p in points {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                what: "drift probe point",
                expected: d,
                got: p.len(),
            });
        }
        model.drift_into(p, &mut g);
        let mut drifted_sq = 0.0;
        for i in 0..d {
            let t = p[i] + eta * g[i];
            drifted_sq += t * t;
        }
        let conditional_ev = drifted_sq + eta * tr + 1.0;
        let v = linalg::norm_sq(p) + 1.0;
        let in_small_set = linalg::norm_sq(p).sqrt() <= small_set_radius;
        let bound = rho * v + if in_small_set { b } else { 0.0 };
        let slack = bound - conditional_ev;
        let holds = slack >= -DRIFT_SLACK_TOL * (1.0 + bound.abs() + conditional_ev.abs());
        all_hold &= holds;
        worst = worst.min(slack);
        rows.push(DriftPoint {
            point: p.clone(),
            conditional_ev,
            bound,
            slack,
            in_small_set,
            holds,
        });
    }
    Ok(DriftReport {
        rho,
        b,
        small_set_radius,
        points: rows,
        all_hold,
        worst_slack: worst,
    })
}

/// One step size of the invariant-measure bias curve.
#[derive(Debug, Clone, Copy)]
pub struct BiasRow {
    pub eta: f64,
    /// mean of f over the stationary draws
    pub estimate: f64,
    pub std_err: f64,
    pub oracle: f64,
    pub bias_hat: f64,
    /// bias_hat / √η, the quantity the ≤ C√η bound keeps bounded
    pub ratio_to_sqrt_eta: f64,
    /// standard error exceeds half the measured bias: the point is noise-dominated
    pub inconclusive: bool,
    pub diverged: usize,
}

/// |π_η(f) − π(f)| against η, from `draws` independent approximate π_η
/// samples per step size.
///
/// `oracle_pi_f` supplies π(f) when a closed form exists; otherwise it is
/// estimated from a reference chain at `min(η)/16` with a 10× horizon.
#[allow(clippy::too_many_arguments)]
pub fn invariant_bias_curve(
    model: &SdeModel,
    f: &Observable,
    eta_list: &[f64],
    draws: usize,
    oracle_pi_f: Option<f64>,
    c_burn: f64,
    master_seed: u64,
    threads: usize,
) -> Result<Vec<BiasRow>> {
    if eta_list.is_empty() || draws == 0 {
        return Err(Error::Config("bias curve needs etas and draws".into()));
    }
    let d = model.dim();
    let zeros = vec![0.0; d];
    let oracle = match oracle_pi_f {
        Some(v) => v,
        None => reference_pi_estimate(model, f, eta_list, c_burn, master_seed)?,
    };

    let mut rows = Vec::with_capacity(eta_list.len());
    for (ei, &eta) in eta_list.iter().enumerate() {
        let burn = default_burn_in(eta, c_burn);
        let samples: Vec<Option<f64>> = parallel::map_indexed(draws, threads, |r| {
            let replica = (ei * draws + r) as u64;
            let mut stream = NoiseStream::new(master_seed, replica);
            match sample_stationary(model, eta, burn, c_burn, &zeros, BLOW_UP_DEFAULT, &mut stream) {
                Ok(state) => {
                    let v = f.eval(&state);
                    v.is_finite().then_some(v)
                }
                Err(_) => None,
            }
        });
        let diverged = samples.iter().filter(|s| s.is_none()).count();
        if diverged * 100 > draws {
            return Err(Error::DivergenceBudget {
                diverged,
                total: draws,
            });
        }
        let clean: Vec<f64> = samples.into_iter().flatten().collect();
        let (mean, _, se) = stats::mean_sd_se(&clean);
        let bias_hat = (mean - oracle).abs();
        rows.push(BiasRow {
            eta,
            estimate: mean,
            std_err: se,
            oracle,
            bias_hat,
            ratio_to_sqrt_eta: bias_hat / eta.sqrt(),
            inconclusive: se > 0.5 * bias_hat,
            diverged,
        });
    }
    Ok(rows)
}

/// π(f) fallback: long-run average over a single fine-step chain at
/// `η_ref = min(η)/16` with horizon 10·⌊η_ref⁻²⌋ steps after burn-in.
fn reference_pi_estimate(
    model: &SdeModel,
    f: &Observable,
    eta_list: &[f64],
    c_burn: f64,
    master_seed: u64,
) -> Result<f64> {
    let eta_ref = eta_list.iter().cloned().fold(f64::INFINITY, f64::min) / 16.0;
    let steps = 10usize.saturating_mul(default_chain_length(eta_ref));
    let burn = default_burn_in(eta_ref, c_burn);
    let mut stream = NoiseStream::new(master_seed, u64::MAX);
    let mut state = vec![0.0; model.dim()];
    fold_chain(model, eta_ref, burn, BLOW_UP_DEFAULT, &mut state, &mut stream, 0, |_, _| {})?;
    let mut sum = 0.0;
    let mut count = 0usize;
    fold_chain(model, eta_ref, steps, BLOW_UP_DEFAULT, &mut state, &mut stream, burn, |_, s| {
        sum += f.eval(s);
        count += 1;
    })?;
    Ok(sum / count as f64)
}
