//! Self-normalized fluctuation statistics and their ensemble verification.
//!
//! Per replica the chain supplies
//!
//! ```text
//! Π_η(h) = (1/m) Σ_{k<m} h(θ_k)
//! Y_η    = (1/m) Σ_{k<m} |σᵀ∇φ(θ_k)|²
//! W_η    = η^{-1/2} (Π_η(h) − π(h)) / √Y_η
//! ```
//!
//! with m = ⌊η⁻²⌋ and approximate-stationary starts. The CLT check compares
//! the empirical law of `η^{-1/2}(Π_η(h) − π(h))` against
//! `N(0, π(|σᵀ∇φ|²))`; the moderate-deviation check tracks the tail ratio
//! `P(W_η ≥ x) / (1 − Φ(x))`, which tends to 1 as η vanishes.

use crate::decomposition::{tail_table, TailTable};
use crate::error::{Error, Result};
use crate::ergodic::Observable;
use crate::linalg;
use crate::parallel;
use crate::rng::NoiseStream;
use crate::sde::{default_chain_length, SdeModel, Trajectory, BLOW_UP_DEFAULT};
use crate::stats;
pub use crate::stats::normal_sf;
use crate::stein::SteinBundle;

/// Per-replica outcome of one ensemble member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicaRecord {
    pub replica_index: u64,
    pub pi_eta_h: f64,
    pub y_eta: f64,
    pub w_eta: f64,
}

/// All replica records of one ensemble run, divergences excluded and listed.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub eta: f64,
    pub m: usize,
    pub pi_h: f64,
    pub model_id: String,
    pub observable_id: String,
    pub master_seed: u64,
    pub burn_in: usize,
    pub requested: usize,
    pub records: Vec<ReplicaRecord>,
    pub divergent: Vec<u64>,
}

impl EnsembleResult {
    /// η^{-1/2}(Π_η(h) − π(h)) per record.
    pub fn scaled_fluctuations(&self) -> Vec<f64> {
        let inv_sqrt_eta = 1.0 / self.eta.sqrt();
        self.records
            .iter()
            .map(|r| (r.pi_eta_h - self.pi_h) * inv_sqrt_eta)
            .collect()
    }

    pub fn w_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.w_eta).collect()
    }
}

/// `Y_η = (1/m) Σ_{k<m} |σᵀ∇φ(θ_k)|²`; always ≥ 0, and constant across
/// trajectories when ∇φ is constant.
pub fn self_normalizer(traj: &Trajectory, bundle: &SteinBundle, model: &SdeModel) -> Result<f64> {
    let d = model.dim();
    if traj.dim() != d || bundle.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "self_normalizer",
            expected: d,
            got: traj.dim(),
        });
    }
    let m = traj.steps();
    if m == 0 {
        return Err(Error::Config("trajectory has no steps".into()));
    }
    let mut grad = vec![0.0; d];
    let mut sg = vec![0.0; d];
    let mut sum = 0.0;
    for k in 0..m {
        bundle.grad_into(traj.state(k), &mut grad);
        linalg::mat_t_vec(model.sigma(), &grad, &mut sg);
        sum += linalg::norm_sq(&sg);
    }
    Ok(sum / m as f64)
}

/// `W_η = η^{-1/2} (Π_η(h) − π(h)) / √Y_η`.
pub fn self_normalized_stat(pi_eta_h: f64, pi_h: f64, y_eta: f64, eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Config(format!("eta must lie in (0,1), got {eta}")));
    }
    if y_eta < 0.0 {
        return Err(Error::Config(format!("Y_eta must be >= 0, got {y_eta}")));
    }
    if y_eta == 0.0 {
        return Err(Error::DegenerateNormalizer);
    }
    Ok((pi_eta_h - pi_h) / eta.sqrt() / y_eta.sqrt())
}

/// Runs `n_replicas` independent chains of length m = ⌊η⁻²⌋ after `burn_in`
/// steps each and records (Π_η(h), Y_η, W_η) per replica.
///
/// Replica r draws from `NoiseStream::new(master_seed, r)`, so the result is
/// bitwise identical for any worker count. Divergent replicas are excluded
/// and listed; more than 1% of them aborts the ensemble.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    model: &SdeModel,
    h: &Observable,
    pi_h: f64,
    bundle: &SteinBundle,
    eta: f64,
    n_replicas: usize,
    burn_in: usize,
    master_seed: u64,
    threads: usize,
) -> Result<EnsembleResult> {
    if n_replicas < 1 {
        return Err(Error::Config("need at least one replica".into()));
    }
    let d = model.dim();
    if bundle.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "ensemble bundle",
            expected: d,
            got: bundle.dim(),
        });
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Config(format!("eta must lie in (0,1), got {eta}")));
    }
    let m = default_chain_length(eta);

    let outcomes: Vec<Result<Option<ReplicaRecord>>> =
        parallel::map_indexed(n_replicas, threads, |r| {
            let mut stream = NoiseStream::new(master_seed, r as u64);
            let mut state = vec![0.0; d];
            let burn = crate::sde::fold_chain(
                model, eta, burn_in, BLOW_UP_DEFAULT, &mut state, &mut stream, 0, |_, _| {},
            );
            match burn {
                Err(Error::Divergence { .. }) => return Ok(None),
                Err(e) => return Err(e),
                Ok(()) => {}
            }
            let mut grad = vec![0.0; d];
            let mut sg = vec![0.0; d];
            let mut sum_h = 0.0;
            let mut sum_y = 0.0;
            let mut bad_h: Option<(usize, f64)> = None;
            let run = crate::sde::fold_chain(
                model,
                eta,
                m,
                BLOW_UP_DEFAULT,
                &mut state,
                &mut stream,
                burn_in,
                |k, s| {
                    let v = h.eval(s);
                    if !v.is_finite() && bad_h.is_none() {
                        bad_h = Some((k, v));
                    }
                    sum_h += v;
                    bundle.grad_into(s, &mut grad);
                    linalg::mat_t_vec(model.sigma(), &grad, &mut sg);
                    sum_y += linalg::norm_sq(&sg);
                },
            );
            if let Some((step, value)) = bad_h {
                return Err(Error::NonFiniteObservable { step, value });
            }
            match run {
                Err(Error::Divergence { .. }) => return Ok(None),
                Err(e) => return Err(e),
                Ok(()) => {}
            }
            let pi_eta_h = sum_h / m as f64;
            let y_eta = sum_y / m as f64;
            let w_eta = self_normalized_stat(pi_eta_h, pi_h, y_eta, eta)?;
            Ok(Some(ReplicaRecord {
                replica_index: r as u64,
                pi_eta_h,
                y_eta,
                w_eta,
            }))
        });

    let mut records = Vec::with_capacity(n_replicas);
    let mut divergent = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o? {
            Some(rec) => records.push(rec),
            None => divergent.push(r as u64),
        }
    }
    if divergent.len() * 100 > n_replicas {
        return Err(Error::DivergenceBudget {
            diverged: divergent.len(),
            total: n_replicas,
        });
    }
    Ok(EnsembleResult {
        eta,
        m,
        pi_h,
        model_id: model.name().to_string(),
        observable_id: h.name().to_string(),
        master_seed,
        burn_in,
        requested: n_replicas,
        records,
        divergent,
    })
}

/// CLT comparison of the scaled fluctuation against N(0, target_variance).
#[derive(Debug, Clone, Copy)]
pub struct CltCheck {
    pub ks_stat: f64,
    pub variance_ratio: f64,
    pub n_used: usize,
}

/// Kolmogorov-Smirnov distance and variance ratio of
/// `η^{-1/2}(Π_η(h) − π(h))` against the theoretical limit law.
///
/// Needs at least 500 non-divergent records and a positive target variance.
pub fn clt_check(ensemble: &EnsembleResult, target_variance: f64) -> Result<CltCheck> {
    if !(target_variance > 0.0) {
        return Err(Error::Config(format!(
            "target variance must be > 0, got {target_variance}"
        )));
    }
    let lhs = ensemble.scaled_fluctuations();
    if lhs.len() < 500 {
        return Err(Error::Config(format!(
            "clt_check needs >= 500 records, got {}",
            lhs.len()
        )));
    }
    let sd = target_variance.sqrt();
    let ks_stat = stats::ks_statistic(&lhs, |x| stats::normal_cdf(x / sd));
    let variance_ratio = stats::sample_variance(&lhs) / target_variance;
    Ok(CltCheck {
        ks_stat,
        variance_ratio,
        n_used: lhs.len(),
    })
}

/// One abscissa of the moderate-deviation tail-ratio curve.
#[derive(Debug, Clone, Copy)]
pub struct TailRatioRow {
    pub x: f64,
    /// (#{W ≥ x}/N) / (1 − Φ(x))
    pub ratio: f64,
    /// Wilson bounds on the numerator divided by the known denominator
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_exceed: u64,
    pub sf_x: f64,
    pub trusted: bool,
}

#[derive(Debug, Clone)]
pub struct TailRatioCurve {
    pub rows: Vec<TailRatioRow>,
    pub n: usize,
}

impl TailRatioCurve {
    pub fn row_at(&self, x: f64) -> Option<&TailRatioRow> {
        self.rows.iter().find(|r| (r.x - x).abs() < 1e-12)
    }
}

/// Empirical `P(W_η ≥ x)/(1 − Φ(x))` over an increasing grid.
pub fn tail_ratio_curve(ensemble: &EnsembleResult, x_grid: &[f64]) -> Result<TailRatioCurve> {
    if ensemble.records.is_empty() {
        return Err(Error::Config("tail ratio needs a nonempty ensemble".into()));
    }
    if x_grid.is_empty() || x_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("x grid must be nonempty and strictly increasing".into()));
    }
    let n = ensemble.records.len();
    let mut rows = Vec::with_capacity(x_grid.len());
    for &x in x_grid {
        let n_exceed = ensemble.records.iter().filter(|r| r.w_eta >= x).count() as u64;
        let sf_x = stats::normal_sf(x);
        let (lo, hi) = stats::wilson_interval(n_exceed, n as u64, stats::Z_95);
        rows.push(TailRatioRow {
            x,
            ratio: (n_exceed as f64 / n as f64) / sf_x,
            ci_low: lo / sf_x,
            ci_high: hi / sf_x,
            n_exceed,
            sf_x,
            trusted: n_exceed >= 10,
        });
    }
    Ok(TailRatioCurve { rows, n })
}

/// Fixed landmarks merged with data quantiles, for tail-ratio grids; the
/// theorem's admissible-x constants are unspecified, so the grid follows
/// the data and CI-based trust flags replace a hard cutoff.
pub fn default_tail_grid(w_values: &[f64]) -> Vec<f64> {
    let mut grid = vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
    if !w_values.is_empty() {
        let mut sorted = w_values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite W"));
        for p in [0.9, 0.95, 0.99, 0.999] {
            grid.push(stats::quantile_sorted(&sorted, p));
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    grid
}

/// Outcome of the stationary-sum concentration probe.
#[derive(Debug, Clone)]
pub struct StationarySumConcentration {
    pub k_steps: usize,
    /// long-run mean of |σᵀ∇φ|² from the calibration chain
    pub mu_hat: f64,
    /// survival of |S_k − k μ̂| with the fit taken against y²/k
    pub table: TailTable,
}

/// Calibration chain length for μ̂.
const CALIBRATION_STEPS: usize = 500_000;

/// Tail of `|Σ_{i<k} |σᵀ∇φ(θ_i)|² − k μ̂|` from approximate-stationary
/// starts. Sub-Gaussian concentration makes log-survival linear in y²/k
/// with negative slope, uniformly over k.
#[allow(clippy::too_many_arguments)]
pub fn stationary_sum_concentration(
    model: &SdeModel,
    bundle: &SteinBundle,
    eta: f64,
    k_steps: usize,
    replicas: usize,
    y_grid: Option<&[f64]>,
    burn_in: usize,
    master_seed: u64,
    threads: usize,
) -> Result<StationarySumConcentration> {
    if k_steps == 0 || replicas < 2 {
        return Err(Error::Config("need k >= 1 and replicas >= 2".into()));
    }
    let d = model.dim();

    // calibration run on its own reserved stream
    let mu_hat = {
        let mut stream = NoiseStream::new(master_seed, u64::MAX);
        let mut state = vec![0.0; d];
        crate::sde::fold_chain(model, eta, burn_in, BLOW_UP_DEFAULT, &mut state, &mut stream, 0, |_, _| {})?;
        let mut grad = vec![0.0; d];
        let mut sg = vec![0.0; d];
        let mut sum = 0.0;
        crate::sde::fold_chain(
            model,
            eta,
            CALIBRATION_STEPS,
            BLOW_UP_DEFAULT,
            &mut state,
            &mut stream,
            burn_in,
            |_, s| {
                bundle.grad_into(s, &mut grad);
                linalg::mat_t_vec(model.sigma(), &grad, &mut sg);
                sum += linalg::norm_sq(&sg);
            },
        )?;
        sum / CALIBRATION_STEPS as f64
    };

    let center = k_steps as f64 * mu_hat;
    let samples: Vec<Option<f64>> = parallel::map_indexed(replicas, threads, |r| {
        let mut stream = NoiseStream::new(master_seed, r as u64);
        let mut state = vec![0.0; d];
        crate::sde::fold_chain(model, eta, burn_in, BLOW_UP_DEFAULT, &mut state, &mut stream, 0, |_, _| {})
            .ok()?;
        let mut grad = vec![0.0; d];
        let mut sg = vec![0.0; d];
        let mut sum = 0.0;
        crate::sde::fold_chain(
            model,
            eta,
            k_steps,
            BLOW_UP_DEFAULT,
            &mut state,
            &mut stream,
            burn_in,
            |_, s| {
                bundle.grad_into(s, &mut grad);
                linalg::mat_t_vec(model.sigma(), &grad, &mut sg);
                sum += linalg::norm_sq(&sg);
            },
        )
        .ok()?;
        Some((sum - center).abs())
    });
    let diverged = samples.iter().filter(|s| s.is_none()).count();
    if diverged * 100 > replicas {
        return Err(Error::DivergenceBudget {
            diverged,
            total: replicas,
        });
    }
    let clean: Vec<f64> = samples.into_iter().flatten().collect();
    let kf = k_steps as f64;
    Ok(StationarySumConcentration {
        k_steps,
        mu_hat,
        table: tail_table(&clean, y_grid, diverged, move |y| y * y / kf),
    })
}
