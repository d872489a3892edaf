//! Solutions φ of the Stein (Poisson) equation `h − π(h) = Aφ` with
//! `Aφ = <g, ∇φ> + ½ <σσᵀ, ∇²φ>_HS`, packaged with their derivatives.
//!
//! Analytic bundles exist for the OU benchmarks; for general observables φ is
//! estimated by the Feynman-Kac time integral
//!
//! ```text
//! φ(x) = −∫₀^∞ E[h(X_t(x)) − π(h)] dt
//! ```
//!
//! truncated at `t_max` (the integrand decays like e^{-K₁ t}) and discretized
//! by the trapezoid rule over an inner EM chain at step `dt`. Derivatives of
//! a Monte Carlo φ come from central differences under common random
//! numbers; they are low-trust and the decomposition experiments use
//! analytic bundles instead.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ergodic::Observable;
use crate::linalg;
use crate::parallel;
use crate::rng::{NoiseStream, NormalSource};
use crate::sde::{SdeModel, BLOW_UP_DEFAULT};
use crate::stats;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Writes a length-d gradient.
pub type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Writes a row-major d×d Hessian.
pub type HessFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Writes a d³ tensor, index [i·d² + j·d + k].
pub type ThirdFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Analytic,
    MonteCarloFd,
}

/// φ with evaluators for its first three derivative orders.
#[derive(Clone)]
pub struct SteinBundle {
    dim: usize,
    phi: ScalarFn,
    grad: GradFn,
    hess: HessFn,
    third: Option<ThirdFn>,
    third_is_zero: bool,
    provenance: Provenance,
    /// sup-norm estimates for orders 0..3 where known
    derivative_bounds: Option<[f64; 4]>,
}

impl std::fmt::Debug for SteinBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SteinBundle")
            .field("dim", &self.dim)
            .field("provenance", &self.provenance)
            .field("third_is_zero", &self.third_is_zero)
            .finish()
    }
}

impl SteinBundle {
    pub fn new(dim: usize, phi: ScalarFn, grad: GradFn, hess: HessFn, provenance: Provenance) -> Self {
        SteinBundle {
            dim,
            phi,
            grad,
            hess,
            third: None,
            third_is_zero: false,
            provenance,
            derivative_bounds: None,
        }
    }

    pub fn with_third(mut self, third: ThirdFn) -> Self {
        self.third = Some(third);
        self.third_is_zero = false;
        self
    }

    /// Declares ∇³φ ≡ 0 (quadratic φ); the remainder terms that contract it
    /// are then structurally zero.
    pub fn with_zero_third(mut self) -> Self {
        self.third = Some(Arc::new(|_, out: &mut [f64]| out.fill(0.0)));
        self.third_is_zero = true;
        self
    }

    pub fn with_derivative_bounds(mut self, bounds: [f64; 4]) -> Self {
        self.derivative_bounds = Some(bounds);
        self
    }

    /// The zero solution, matching a centered constant observable.
    pub fn zero(dim: usize) -> Self {
        SteinBundle::new(
            dim,
            Arc::new(|_| 0.0),
            Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
            Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
            Provenance::Analytic,
        )
        .with_zero_third()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn derivative_bounds(&self) -> Option<[f64; 4]> {
        self.derivative_bounds
    }

    #[inline]
    pub fn phi(&self, x: &[f64]) -> f64 {
        (self.phi)(x)
    }

    #[inline]
    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        (self.grad)(x, out);
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.grad_into(x, &mut out);
        out
    }

    #[inline]
    pub fn hess_into(&self, x: &[f64], out: &mut [f64]) {
        (self.hess)(x, out);
    }

    pub fn hess(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.hess_into(x, &mut out);
        out
    }

    pub fn has_third(&self) -> bool {
        self.third.is_some()
    }

    pub fn third_is_zero(&self) -> bool {
        self.third_is_zero
    }

    pub fn third_into(&self, x: &[f64], out: &mut [f64], needed_by: &'static str) -> Result<()> {
        match &self.third {
            Some(t) => {
                t(x, out);
                Ok(())
            }
            None => Err(Error::MissingThirdDerivative { term: needed_by }),
        }
    }

    /// Max relative Hessian asymmetry and worst third-order permutation
    /// mismatch at a point; both should be at rounding level.
    pub fn symmetry_defect(&self, x: &[f64]) -> (f64, f64) {
        let d = self.dim;
        let h = self.hess(x);
        let scale = 1.0 + h.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let mut hess_defect = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                hess_defect = hess_defect.max((h[i * d + j] - h[j * d + i]).abs() / scale);
            }
        }
        let mut third_defect = 0.0f64;
        if self.third.is_some() {
            let mut t = vec![0.0; d * d * d];
            self.third_into(x, &mut t, "symmetry check").unwrap();
            let tscale = 1.0 + t.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let idx = |i: usize, j: usize, k: usize| i * d * d + j * d + k;
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        let base = t[idx(i, j, k)];
                        for &perm in &[
                            t[idx(i, k, j)],
                            t[idx(j, i, k)],
                            t[idx(j, k, i)],
                            t[idx(k, i, j)],
                            t[idx(k, j, i)],
                        ] {
                            third_defect = third_defect.max((base - perm).abs() / tscale);
                        }
                    }
                }
            }
        }
        (hess_defect, third_defect)
    }
}

/// Observable kinds with known OU Stein solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuSteinKind {
    /// h(x) = x: φ(x) = −x/a
    Linear,
    /// h(x) = x²: φ(x) = −(x² − σ²/(2a))/(2a)
    Quadratic,
    /// h(x) = tanh(x): Monte Carlo φ with finite-difference derivatives
    TanhNumeric,
}

/// Stein solution for the 1D OU model `g(x) = -a x`.
///
/// The analytic kinds follow from `φ(x) = −∫₀^∞ E[h(X_t(x)) − π(h)] dt`
/// with `E[X_t(x)] = x e^{-at}` and `Var X_t(x) = σ²(1−e^{-2at})/(2a)`. The
/// tanh kind runs [`estimate_phi`] under fixed internal seeds; it is
/// low-trust and carries `Provenance::MonteCarloFd`.
pub fn stein_solution_ou(a: f64, sigma: f64, kind: OuSteinKind) -> Result<SteinBundle> {
    if !(a > 0.0 && sigma > 0.0) {
        return Err(Error::Config(format!("need a > 0 and sigma > 0, got a={a}, sigma={sigma}")));
    }
    match kind {
        OuSteinKind::Linear => {
            let inv_a = 1.0 / a;
            Ok(SteinBundle::new(
                1,
                Arc::new(move |x: &[f64]| -x[0] * inv_a),
                Arc::new(move |_: &[f64], out: &mut [f64]| out[0] = -inv_a),
                Arc::new(|_: &[f64], out: &mut [f64]| out[0] = 0.0),
                Provenance::Analytic,
            )
            .with_zero_third()
            .with_derivative_bounds([f64::INFINITY, inv_a, 0.0, 0.0]))
        }
        OuSteinKind::Quadratic => {
            let inv_2a = 1.0 / (2.0 * a);
            let pi_h = sigma * sigma * inv_2a;
            let inv_a = 1.0 / a;
            Ok(SteinBundle::new(
                1,
                Arc::new(move |x: &[f64]| -(x[0] * x[0] - pi_h) * inv_2a),
                Arc::new(move |x: &[f64], out: &mut [f64]| out[0] = -x[0] * inv_a),
                Arc::new(move |_: &[f64], out: &mut [f64]| out[0] = -inv_a),
                Provenance::Analytic,
            )
            .with_zero_third()
            .with_derivative_bounds([f64::INFINITY, f64::INFINITY, inv_a, 0.0]))
        }
        OuSteinKind::TanhNumeric => {
            let model = SdeModel::ou(a, sigma)?;
            // tanh is odd and pi = N(0, sigma²/2a) is symmetric, so pi(h) = 0
            let opts = PhiEstimateOpts {
                t_max: 12.0 / a,
                dt: 0.01,
                replicas: 5_000,
                truncation_tol: 1e-2,
            };
            Ok(numeric_bundle(&model, &Observable::tanh(), 0.0, &opts, 0x7A6E)?)
        }
    }
}

/// Options for the Feynman-Kac estimate of φ.
#[derive(Debug, Clone, Copy)]
pub struct PhiEstimateOpts {
    pub t_max: f64,
    pub dt: f64,
    pub replicas: usize,
    /// tail estimates above this attach a truncation warning
    pub truncation_tol: f64,
}

impl PhiEstimateOpts {
    /// `t_max = 15/K₁` places the e^{-K₁ t} tail below 4e-7 of its scale.
    pub fn for_model(model: &SdeModel, dt: f64, replicas: usize) -> Self {
        let k1 = model.dissipativity().map(|(k1, _)| k1).unwrap_or(1.0);
        PhiEstimateOpts {
            t_max: 15.0 / k1,
            dt,
            replicas,
            truncation_tol: 1e-2,
        }
    }
}

/// Monte Carlo value of φ at one point.
#[derive(Debug, Clone, Copy)]
pub struct PhiEstimate {
    pub value: f64,
    pub std_err: f64,
    pub t_max: f64,
    pub dt: f64,
    pub replicas: usize,
    /// |mean integrand at t_max| / K₁: the mass the truncation discards
    pub tail_estimate: f64,
    pub truncation_warning: bool,
}

/// `φ(x) ≈ −(trapezoid over [0, t_max] of the replica-mean of h(X̂_t) − π(h))`
/// where X̂ is the EM chain at step `dt` started at x. The standard error
/// comes from the replica variance of the per-path integral, so common
/// random numbers across calls with the same `master_seed` cancel correctly.
pub fn estimate_phi(
    model: &SdeModel,
    h: &Observable,
    pi_h: f64,
    x: &[f64],
    opts: &PhiEstimateOpts,
    master_seed: u64,
    threads: usize,
) -> Result<PhiEstimate> {
    if !(opts.dt > 0.0 && opts.dt < 1.0) {
        return Err(Error::Config(format!("dt must lie in (0,1), got {}", opts.dt)));
    }
    if !(opts.t_max > 0.0) || opts.replicas == 0 {
        return Err(Error::Config("need t_max > 0 and replicas >= 1".into()));
    }
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            what: "phi estimate point",
            expected: model.dim(),
            got: x.len(),
        });
    }
    let n_steps = (opts.t_max / opts.dt).round() as usize;
    if n_steps == 0 {
        return Err(Error::Config("t_max shorter than dt".into()));
    }

    // per replica: (path integral, integrand at t_max)
    let d = model.dim();
    let sqrt_dt = opts.dt.sqrt();
    let bound_sq = BLOW_UP_DEFAULT * BLOW_UP_DEFAULT;
    let outcomes: Vec<Result<(f64, f64)>> = parallel::map_indexed(opts.replicas, threads, |r| {
        let mut stream = NoiseStream::new(master_seed, r as u64);
        let mut state = x.to_vec();
        let mut g = vec![0.0; d];
        let mut sn = vec![0.0; d];
        let mut noise = vec![0.0; d];
        let mut next = vec![0.0; d];
        let f0 = h.eval(&state) - pi_h;
        if !f0.is_finite() {
            return Err(Error::NonFiniteObservable { step: 0, value: f0 });
        }
        let mut integral = 0.5 * opts.dt * f0;
        let mut last = f0;
        for j in 1..=n_steps {
            stream.fill_normals(&mut noise);
            crate::sde::step_into(model, &state, opts.dt, sqrt_dt, &noise, &mut g, &mut sn, &mut next)?;
            state.copy_from_slice(&next);
            let nsq = linalg::norm_sq(&state);
            if !(nsq <= bound_sq) {
                return Err(Error::Divergence {
                    step: j,
                    norm: nsq.sqrt(),
                    bound: BLOW_UP_DEFAULT,
                });
            }
            let f = h.eval(&state) - pi_h;
            if !f.is_finite() {
                return Err(Error::NonFiniteObservable { step: j, value: f });
            }
            let w = if j == n_steps { 0.5 } else { 1.0 };
            integral += w * opts.dt * f;
            last = f;
        }
        Ok((integral, last))
    });

    let mut integrals = Vec::with_capacity(opts.replicas);
    let mut tail_sum = 0.0;
    for o in outcomes {
        let (integral, last) = o?;
        integrals.push(-integral);
        tail_sum += last;
    }
    let (value, _, std_err) = stats::mean_sd_se(&integrals);
    let decay_rate = model.dissipativity().map(|(k1, _)| k1).unwrap_or(1.0);
    let tail_estimate = (tail_sum / opts.replicas as f64).abs() / decay_rate;
    Ok(PhiEstimate {
        value,
        std_err,
        t_max: opts.t_max,
        dt: opts.dt,
        replicas: opts.replicas,
        tail_estimate,
        truncation_warning: tail_estimate > opts.truncation_tol,
    })
}

/// Central-difference step for analytic evaluators: ε^{1/3}(1 + |x_i|).
pub fn fd_step_analytic(xi: f64) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + xi.abs())
}

/// Central-difference step for Monte Carlo evaluators; bias/variance
/// trade-off under common random numbers.
pub const FD_STEP_MC: f64 = 0.05;

/// Central differences `(φ(x + s eᵢ) − φ(x − s eᵢ))/(2s)` per coordinate.
pub fn grad_phi_fd(phi: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let d = x.len();
    let mut out = vec![0.0; d];
    let mut p = x.to_vec();
    for i in 0..d {
        p[i] = x[i] + step;
        let hi = phi(&p);
        p[i] = x[i] - step;
        let lo = phi(&p);
        p[i] = x[i];
        out[i] = (hi - lo) / (2.0 * step);
    }
    out
}

/// Symmetric second differences; exactly symmetric by construction (each
/// unordered pair is evaluated once and mirrored).
pub fn hess_phi_fd(phi: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0);
    let d = x.len();
    let mut out = vec![0.0; d * d];
    let mut p = x.to_vec();
    let center = phi(x);
    for i in 0..d {
        p[i] = x[i] + step;
        let hi = phi(&p);
        p[i] = x[i] - step;
        let lo = phi(&p);
        p[i] = x[i];
        out[i * d + i] = (hi - 2.0 * center + lo) / (step * step);
    }
    for i in 0..d {
        for j in i + 1..d {
            let mut eval = |si: f64, sj: f64| {
                p[i] = x[i] + si;
                p[j] = x[j] + sj;
                let v = phi(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (eval(step, step) - eval(step, -step) - eval(-step, step) + eval(-step, -step))
                / (4.0 * step * step);
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
    out
}

/// Third derivatives as central differences of [`hess_phi_fd`], filled over
/// all index permutations of each sorted triple.
pub fn third_phi_fd(phi: &(dyn Fn(&[f64]) -> f64 + Sync), x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0);
    let d = x.len();
    let mut out = vec![0.0; d * d * d];
    let mut p = x.to_vec();
    for i in 0..d {
        p[i] = x[i] + step;
        let hess_hi = hess_phi_fd(phi, &p, step);
        p[i] = x[i] - step;
        let hess_lo = hess_phi_fd(phi, &p, step);
        p[i] = x[i];
        for j in 0..d {
            for k in 0..d {
                if i <= j && j <= k {
                    let v = (hess_hi[j * d + k] - hess_lo[j * d + k]) / (2.0 * step);
                    for (a, b, c) in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                        out[a * d * d + b * d + c] = v;
                    }
                }
            }
        }
    }
    out
}

/// Bundle whose φ is the Monte Carlo integral and whose derivatives are
/// common-random-number central differences of it. Low trust: every
/// evaluation reruns the inner ensemble.
pub fn numeric_bundle(
    model: &SdeModel,
    h: &Observable,
    pi_h: f64,
    opts: &PhiEstimateOpts,
    master_seed: u64,
) -> Result<SteinBundle> {
    let d = model.dim();
    let model = model.clone();
    let h = h.clone();
    let opts = *opts;
    let phi_eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync> = Arc::new(move |x: &[f64]| {
        estimate_phi(&model, &h, pi_h, x, &opts, master_seed, 1)
            .map(|e| e.value)
            .unwrap_or(f64::NAN)
    });
    let phi_g = Arc::clone(&phi_eval);
    let phi_h = Arc::clone(&phi_eval);
    let phi_t = Arc::clone(&phi_eval);
    Ok(SteinBundle::new(
        d,
        Arc::clone(&phi_eval),
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&grad_phi_fd(phi_g.as_ref(), x, FD_STEP_MC));
        }),
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&hess_phi_fd(phi_h.as_ref(), x, FD_STEP_MC));
        }),
        Provenance::MonteCarloFd,
    )
    .with_third(Arc::new(move |x: &[f64], out: &mut [f64]| {
        out.copy_from_slice(&third_phi_fd(phi_t.as_ref(), x, FD_STEP_MC));
    })))
}

/// `Aφ(x) = <g(x), ∇φ(x)> + ½ <σσᵀ, ∇²φ(x)>_HS`.
pub fn generator_apply(model: &SdeModel, bundle: &SteinBundle, x: &[f64]) -> Result<f64> {
    let d = model.dim();
    if bundle.dim() != d || x.len() != d {
        return Err(Error::DimensionMismatch {
            what: "generator_apply",
            expected: d,
            got: x.len(),
        });
    }
    let g = model.drift_at(x);
    let grad = bundle.grad(x);
    let hess = bundle.hess(x);
    Ok(linalg::dot(&g, &grad) + 0.5 * linalg::frobenius_dot(model.sigma_sigma_t(), &hess))
}

/// Residual of the Stein equation on a point grid.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub rows: Vec<(Vec<f64>, f64)>,
    pub max_abs: f64,
}

/// `max over grid of |Aφ(x) − (h(x) − π(h))|` with per-point residuals.
pub fn stein_residual(
    model: &SdeModel,
    bundle: &SteinBundle,
    h: &Observable,
    pi_h: f64,
    grid: &[Vec<f64>],
) -> Result<ResidualReport> {
    let mut rows = Vec::with_capacity(grid.len());
    let mut max_abs = 0.0f64;
    for x in grid {
        let r = generator_apply(model, bundle, x)? - (h.eval(x) - pi_h);
        max_abs = max_abs.max(r.abs());
        rows.push((x.clone(), r));
    }
    Ok(ResidualReport { rows, max_abs })
}
