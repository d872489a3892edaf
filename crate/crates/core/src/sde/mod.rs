//! SDE models and the Euler-Maruyama chain.
//!
//! The chain for `dX = g(X) dt + σ dB` with step size η is
//!
//! ```text
//! θ_{k+1} = θ_k + η g(θ_k) + √η σ ξ_{k+1},   ξ_k i.i.d. N(0, I_d)
//! ```
//!
//! with constant invertible σ. Models declare the drift's Lipschitz constant
//! L and dissipativity pair (K1, K2) when known; [`probe::probe_assumptions`]
//! smoke-tests those declarations on sampled point pairs and
//! [`strong_error::strong_error_mse`] measures the pathwise discretization
//! error against a shared-noise fine-grid reference.

pub mod probe;
pub mod strong_error;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::NormalSource;

/// Drift callback writing g(x) into the output slice.
pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Default blow-up guard: the chain is declared divergent when |θ| exceeds
/// this, converting silent float overflow into a diagnosable error.
pub const BLOW_UP_DEFAULT: f64 = 1e8;

/// An SDE `dX = g(X) dt + σ dB` with constant diffusion matrix.
#[derive(Clone)]
pub struct SdeModel {
    name: String,
    dim: usize,
    drift: DriftFn,
    sigma: Vec<f64>,
    sigma_sigma_t: Vec<f64>,
    lipschitz: Option<f64>,
    dissipativity: Option<(f64, f64)>,
    drift_hessian_bound: Option<f64>,
}

impl std::fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("sigma", &self.sigma)
            .field("lipschitz", &self.lipschitz)
            .field("dissipativity", &self.dissipativity)
            .finish()
    }
}

impl SdeModel {
    /// Builds a model, rejecting a singular diffusion matrix.
    pub fn new(name: impl Into<String>, dim: usize, drift: DriftFn, sigma: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("model dimension must be positive".into()));
        }
        if sigma.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                what: "sigma",
                expected: dim * dim,
                got: sigma.len(),
            });
        }
        let det = linalg::det(&sigma, dim);
        if !(det.abs() > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be invertible, |det| = {}",
                det.abs()
            )));
        }
        let sigma_sigma_t = linalg::mat_mul_t(&sigma, dim);
        Ok(SdeModel {
            name: name.into(),
            dim,
            drift,
            sigma,
            sigma_sigma_t,
            lipschitz: None,
            dissipativity: None,
            drift_hessian_bound: None,
        })
    }

    /// Declares a Lipschitz bound L for the drift.
    pub fn with_lipschitz(mut self, l: f64) -> Result<Self> {
        if !(l > 0.0) {
            return Err(Error::Config(format!("lipschitz constant must be > 0, got {l}")));
        }
        self.lipschitz = Some(l);
        Ok(self)
    }

    /// Declares dissipativity constants (K1 > 0, K2 ≥ 0) for
    /// `<g(x)-g(y), x-y> ≤ -K1 |x-y|² + K2`.
    pub fn with_dissipativity(mut self, k1: f64, k2: f64) -> Result<Self> {
        if !(k1 > 0.0) || !(k2 >= 0.0) {
            return Err(Error::Config(format!(
                "dissipativity needs K1 > 0 and K2 >= 0, got ({k1}, {k2})"
            )));
        }
        self.dissipativity = Some((k1, k2));
        Ok(self)
    }

    /// Declares a sup bound on the drift Hessian norm.
    pub fn with_drift_hessian_bound(mut self, b: f64) -> Result<Self> {
        if !(b >= 0.0) {
            return Err(Error::Config(format!("hessian bound must be >= 0, got {b}")));
        }
        self.drift_hessian_bound = Some(b);
        Ok(self)
    }

    /// 1D Ornstein-Uhlenbeck benchmark `g(x) = -a x` with scalar diffusion.
    ///
    /// Declares the exact constants: L = a, K1 = a, K2 = 0 (the drift secant
    /// identity `<g(x)-g(y), x-y> = -a |x-y|²` is an equality), and a zero
    /// Hessian bound.
    pub fn ou(a: f64, sigma: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::Config(format!("OU rate a must be > 0, got {a}")));
        }
        let drift: DriftFn = Arc::new(move |x, out| out[0] = -a * x[0]);
        SdeModel::new(format!("ou(a={a},sigma={sigma})"), 1, drift, vec![sigma])?
            .with_lipschitz(a)?
            .with_dissipativity(a, 0.0)?
            .with_drift_hessian_bound(0.0)
    }

    /// 1D double-well benchmark `g(x) = x - x³` with scalar diffusion.
    ///
    /// Globally dissipative with K1 = 1/2 and K2 = 9/4 (the maximum of
    /// `<g(x)-g(y), x-y> + |x-y|²/2` is attained at x = -y = √3/2). The cubic
    /// drift is not globally Lipschitz; the declared L = 11 is the secant
    /// bound valid on |x| ≤ 2, the box the benchmark probes use.
    pub fn double_well(sigma: f64) -> Result<Self> {
        let drift: DriftFn = Arc::new(|x, out| out[0] = x[0] - x[0] * x[0] * x[0]);
        SdeModel::new(format!("double_well(sigma={sigma})"), 1, drift, vec![sigma])?
            .with_lipschitz(11.0)?
            .with_dissipativity(0.5, 2.25)?
            .with_drift_hessian_bound(12.0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major d×d diffusion matrix.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Precomputed σσᵀ, row-major.
    pub fn sigma_sigma_t(&self) -> &[f64] {
        &self.sigma_sigma_t
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn dissipativity(&self) -> Option<(f64, f64)> {
        self.dissipativity
    }

    pub fn drift_hessian_bound(&self) -> Option<f64> {
        self.drift_hessian_bound
    }

    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out);
    }

    pub fn drift_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, &mut out);
        out
    }
}

/// Chain length m = ⌊η⁻²⌋.
///
/// A half-ulp guard treats η⁻² within 1e-9 of an integer as that integer, so
/// decimal steps like 0.1 (whose square is not exactly representable) yield
/// the intended m.
pub fn default_chain_length(eta: f64) -> usize {
    (eta.powi(-2) + 1e-9).floor() as usize
}

/// Parameters of one EM run.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub eta: f64,
    pub m: usize,
    pub burn_in: usize,
    pub initial_state: Vec<f64>,
    pub blow_up: f64,
}

impl EmConfig {
    /// Step size and start state; m defaults to ⌊η⁻²⌋, no burn-in.
    pub fn new(eta: f64, initial_state: Vec<f64>) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::Config(format!("eta must lie in (0,1), got {eta}")));
        }
        let m = default_chain_length(eta);
        let cfg = EmConfig {
            eta,
            m,
            burn_in: 0,
            initial_state,
            blow_up: BLOW_UP_DEFAULT,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_m(mut self, m: usize) -> Result<Self> {
        self.m = m;
        self.validate()?;
        Ok(self)
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn with_blow_up(mut self, blow_up: f64) -> Result<Self> {
        if !(blow_up > 0.0) {
            return Err(Error::Config(format!("blow-up bound must be > 0, got {blow_up}")));
        }
        self.blow_up = blow_up;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("eta must lie in (0,1), got {}", self.eta)));
        }
        if self.m < 1 {
            return Err(Error::Config("chain length m must be >= 1".into()));
        }
        Ok(())
    }
}

/// A recorded EM chain: states θ_0..θ_m and the driving noises ξ_1..ξ_m.
#[derive(Debug, Clone)]
pub struct Trajectory {
    eta: f64,
    dim: usize,
    states: Vec<f64>,
    noises: Vec<f64>,
    seed_provenance: (u64, u64),
}

impl Trajectory {
    /// Assembles a trajectory from raw storage; lengths must satisfy
    /// `states = (m+1)·d`, `noises = m·d`.
    pub fn from_parts(
        eta: f64,
        dim: usize,
        states: Vec<f64>,
        noises: Vec<f64>,
        seed_provenance: (u64, u64),
    ) -> Result<Self> {
        if dim == 0 || states.len() % dim != 0 || noises.len() % dim != 0 {
            return Err(Error::Config("trajectory storage not a multiple of dim".into()));
        }
        if states.len() != noises.len() + dim {
            return Err(Error::Config(format!(
                "need len(states) = len(noises) + 1 chain points, got {} states and {} noises",
                states.len() / dim,
                noises.len() / dim
            )));
        }
        Ok(Trajectory {
            eta,
            dim,
            states,
            noises,
            seed_provenance,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of steps m.
    pub fn steps(&self) -> usize {
        self.noises.len() / self.dim
    }

    /// θ_k for k in 0..=m.
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// ξ_{k+1}, the noise that produced θ_{k+1} from θ_k; k in 0..m.
    pub fn noise(&self, k: usize) -> &[f64] {
        &self.noises[k * self.dim..(k + 1) * self.dim]
    }

    /// Δθ_k = θ_{k+1} − θ_k written into `out`.
    pub fn delta(&self, k: usize, out: &mut [f64]) {
        let a = self.state(k);
        let b = &self.states[(k + 1) * self.dim..(k + 2) * self.dim];
        for i in 0..self.dim {
            out[i] = b[i] - a[i];
        }
    }

    pub fn seed_provenance(&self) -> (u64, u64) {
        self.seed_provenance
    }

    /// Recomputes every transition from the stored states and noises and
    /// demands bitwise equality with the stored next state.
    pub fn verify_replay(&self, model: &SdeModel) -> Result<()> {
        if model.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "trajectory replay",
                expected: model.dim(),
                got: self.dim,
            });
        }
        let sqrt_eta = self.eta.sqrt();
        let mut g = vec![0.0; self.dim];
        let mut sn = vec![0.0; self.dim];
        let mut next = vec![0.0; self.dim];
        for k in 0..self.steps() {
            step_into(model, self.state(k), self.eta, sqrt_eta, self.noise(k), &mut g, &mut sn, &mut next)
                .map_err(|e| match e {
                    Error::NonFiniteDrift { state, .. } => Error::NonFiniteDrift { step: Some(k), state },
                    other => other,
                })?;
            let want = self.state(k + 1);
            for i in 0..self.dim {
                if next[i].to_bits() != want[i].to_bits() {
                    return Err(Error::Config(format!(
                        "replay mismatch at step {k}, component {i}: {} vs stored {}",
                        next[i], want[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The shared transition kernel: `next = (state + η g(state)) + √η σ ξ`,
/// in exactly this association order everywhere (stepper, replay, reference
/// chains), so recorded trajectories replay bitwise.
#[inline]
pub(crate) fn step_into(
    model: &SdeModel,
    state: &[f64],
    eta: f64,
    sqrt_eta: f64,
    noise: &[f64],
    g: &mut [f64],
    sn: &mut [f64],
    next: &mut [f64],
) -> Result<()> {
    model.drift_into(state, g);
    for &v in g.iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteDrift {
                step: None,
                state: state.to_vec(),
            });
        }
    }
    linalg::mat_vec(model.sigma(), noise, sn);
    for i in 0..state.len() {
        next[i] = (state[i] + eta * g[i]) + sqrt_eta * sn[i];
    }
    Ok(())
}

/// One Euler-Maruyama step `state + η g(state) + √η σ noise`.
pub fn em_step(model: &SdeModel, state: &[f64], eta: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Config(format!("eta must lie in (0,1), got {eta}")));
    }
    let d = model.dim();
    if state.len() != d {
        return Err(Error::DimensionMismatch {
            what: "em_step state",
            expected: d,
            got: state.len(),
        });
    }
    if noise.len() != d {
        return Err(Error::DimensionMismatch {
            what: "em_step noise",
            expected: d,
            got: noise.len(),
        });
    }
    let mut g = vec![0.0; d];
    let mut sn = vec![0.0; d];
    let mut next = vec![0.0; d];
    step_into(model, state, eta, eta.sqrt(), noise, &mut g, &mut sn, &mut next)?;
    Ok(next)
}

/// Advances `state` in place by `steps` EM steps, calling
/// `visit(k, state_before_step_k)` for each k. `step_offset` only shifts the
/// step index reported in errors.
pub(crate) fn fold_chain<S: NormalSource>(
    model: &SdeModel,
    eta: f64,
    steps: usize,
    blow_up: f64,
    state: &mut [f64],
    source: &mut S,
    step_offset: usize,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let d = model.dim();
    let sqrt_eta = eta.sqrt();
    let bound_sq = blow_up * blow_up;
    let mut g = vec![0.0; d];
    let mut sn = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut next = vec![0.0; d];
    for k in 0..steps {
        visit(k, state);
        source.fill_normals(&mut noise);
        step_into(model, state, eta, sqrt_eta, &noise, &mut g, &mut sn, &mut next).map_err(|e| {
            match e {
                Error::NonFiniteDrift { state, .. } => Error::NonFiniteDrift {
                    step: Some(step_offset + k),
                    state,
                },
                other => other,
            }
        })?;
        state.copy_from_slice(&next);
        let nsq = linalg::norm_sq(state);
        if !(nsq <= bound_sq) {
            return Err(Error::Divergence {
                step: step_offset + k,
                norm: nsq.sqrt(),
                bound: blow_up,
            });
        }
    }
    Ok(())
}

/// Runs burn-in (discarded) followed by m recorded steps.
pub fn simulate_trajectory<S: NormalSource>(
    model: &SdeModel,
    config: &EmConfig,
    source: &mut S,
) -> Result<Trajectory> {
    let d = model.dim();
    if config.initial_state.len() != d {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: d,
            got: config.initial_state.len(),
        });
    }
    config.validate()?;
    let mut state = config.initial_state.clone();
    fold_chain(model, config.eta, config.burn_in, config.blow_up, &mut state, source, 0, |_, _| {})?;

    let m = config.m;
    let sqrt_eta = config.eta.sqrt();
    let bound_sq = config.blow_up * config.blow_up;
    let mut states = Vec::with_capacity((m + 1) * d);
    let mut noises = Vec::with_capacity(m * d);
    states.extend_from_slice(&state);
    let mut g = vec![0.0; d];
    let mut sn = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut next = vec![0.0; d];
    for k in 0..m {
        source.fill_normals(&mut noise);
        noises.extend_from_slice(&noise);
        step_into(model, &state, config.eta, sqrt_eta, &noise, &mut g, &mut sn, &mut next).map_err(
            |e| match e {
                Error::NonFiniteDrift { state, .. } => Error::NonFiniteDrift {
                    step: Some(config.burn_in + k),
                    state,
                },
                other => other,
            },
        )?;
        state.copy_from_slice(&next);
        states.extend_from_slice(&state);
        let nsq = linalg::norm_sq(&state);
        if !(nsq <= bound_sq) {
            return Err(Error::Divergence {
                step: config.burn_in + k,
                norm: nsq.sqrt(),
                bound: config.blow_up,
            });
        }
    }
    Trajectory::from_parts(config.eta, d, states, noises, source.provenance())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{NoiseStream, ZeroNoise};

    fn zero_drift(dim: usize) -> SdeModel {
        let drift: DriftFn = Arc::new(|_, out| out.fill(0.0));
        let mut sigma = vec![0.0; dim * dim];
        for i in 0..dim {
            sigma[i * dim + i] = 1.0;
        }
        SdeModel::new("zero", dim, drift, sigma).unwrap()
    }

    #[test]
    fn step_zero_dynamics_fixed_point() {
        let model = zero_drift(1);
        let next = em_step(&model, &[3.0], 0.3, &[0.0]).unwrap();
        assert_eq!(next, vec![3.0]);
    }

    #[test]
    fn step_ou_hand_value() {
        // 1.0 - 0.04 + 0.2 * 0.5 = 1.06
        let model = SdeModel::ou(1.0, 1.0).unwrap();
        let next = em_step(&model, &[1.0], 0.04, &[0.5]).unwrap();
        assert!((next[0] - 1.06).abs() < 1e-15);
    }

    #[test]
    fn step_2d_diagonal_sigma_hand_value() {
        // g(x) = -x, sigma = diag(1,2), eta = 0.01, noise = (1,-1)
        let drift: DriftFn = Arc::new(|x, out| {
            out[0] = -x[0];
            out[1] = -x[1];
        });
        let model = SdeModel::new("ou2", 2, drift, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let next = em_step(&model, &[1.0, 1.0], 0.01, &[1.0, -1.0]).unwrap();
        assert!((next[0] - 1.09).abs() < 1e-15);
        assert!((next[1] - 0.79).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_dimension_mismatch() {
        let model = zero_drift(2);
        assert!(matches!(
            em_step(&model, &[1.0], 0.1, &[0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            em_step(&model, &[1.0, 2.0], 0.1, &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn step_reports_non_finite_drift() {
        let drift: DriftFn = Arc::new(|x, out| out[0] = if x[0] > 2.0 { f64::NAN } else { -x[0] });
        let model = SdeModel::new("bad", 1, drift, vec![1.0]).unwrap();
        match em_step(&model, &[3.0], 0.1, &[0.0]) {
            Err(Error::NonFiniteDrift { state, .. }) => assert_eq!(state, vec![3.0]),
            other => panic!("expected NonFiniteDrift, got {other:?}"),
        }
    }

    #[test]
    fn singular_sigma_rejected() {
        let drift: DriftFn = Arc::new(|_, out| out.fill(0.0));
        let err = SdeModel::new("sing", 2, drift, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn simulate_zero_drift_zero_noise_constant() {
        let model = zero_drift(1);
        let config = EmConfig::new(0.5, vec![5.0]).unwrap().with_m(20).unwrap();
        let traj = simulate_trajectory(&model, &config, &mut ZeroNoise).unwrap();
        for k in 0..=20 {
            assert_eq!(traj.state(k), &[5.0]);
        }
    }

    #[test]
    fn simulate_ou_zero_noise_geometric_decay() {
        let model = SdeModel::ou(1.0, 1.0).unwrap();
        let config = EmConfig::new(0.1, vec![1.0]).unwrap().with_m(50).unwrap();
        let traj = simulate_trajectory(&model, &config, &mut ZeroNoise).unwrap();
        for k in 0..=50 {
            let want = 0.9_f64.powi(k as i32);
            assert!((traj.state(k)[0] - want).abs() < 1e-13, "k = {k}");
        }
    }

    #[test]
    fn simulate_length_contract() {
        let model = SdeModel::ou(1.0, 1.0).unwrap();
        let config = EmConfig::new(0.2, vec![0.0]).unwrap().with_m(100).unwrap();
        let mut stream = NoiseStream::new(1, 0);
        let traj = simulate_trajectory(&model, &config, &mut stream).unwrap();
        assert_eq!(traj.steps(), 100);
        assert_eq!(traj.states.len(), 101);
        assert_eq!(traj.noises.len(), 100);
    }

    #[test]
    fn replay_is_bitwise() {
        let model = SdeModel::ou(1.3, 0.7).unwrap();
        let config = EmConfig::new(0.05, vec![2.0]).unwrap().with_m(300).unwrap().with_burn_in(17);
        let mut stream = NoiseStream::new(42, 9);
        let traj = simulate_trajectory(&model, &config, &mut stream).unwrap();
        traj.verify_replay(&model).unwrap();
        // and the run itself is reproducible from the same stream
        let mut stream2 = NoiseStream::new(42, 9);
        let traj2 = simulate_trajectory(&model, &config, &mut stream2).unwrap();
        assert_eq!(traj.states.len(), traj2.states.len());
        for (a, b) in traj.states.iter().zip(traj2.states.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn divergence_guard_trips_for_unstable_drift() {
        // g(x) = +x with a generous step blows up from any nonzero start
        let drift: DriftFn = Arc::new(|x, out| out[0] = x[0]);
        let model = SdeModel::new("anti", 1, drift, vec![1.0]).unwrap();
        let config = EmConfig::new(0.9, vec![1.0])
            .unwrap()
            .with_m(10_000)
            .unwrap()
            .with_blow_up(1e6)
            .unwrap();
        match simulate_trajectory(&model, &config, &mut ZeroNoise) {
            Err(Error::Divergence { norm, bound, .. }) => {
                assert!(norm > bound);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn default_chain_length_handles_decimal_eta() {
        assert_eq!(default_chain_length(0.1), 100);
        assert_eq!(default_chain_length(0.05), 400);
        assert_eq!(default_chain_length(0.025), 1600);
        assert_eq!(default_chain_length(0.2), 25);
        // non-integer eta^-2 floors
        assert_eq!(default_chain_length(0.3), 11);
    }

    #[test]
    fn em_config_rejects_bad_eta() {
        assert!(EmConfig::new(0.0, vec![0.0]).is_err());
        assert!(EmConfig::new(1.0, vec![0.0]).is_err());
        assert!(EmConfig::new(-0.5, vec![0.0]).is_err());
    }
}
