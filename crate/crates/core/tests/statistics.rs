//! Cross-module statistical oracles at moderate ensemble sizes: the
//! quadratic-observable CLT target, the martingale-part moments, and the
//! full-pipeline tail ratio at a landmark abscissa.

use emfluct_core::decomposition::martingale_part;
use emfluct_core::ergodic::{default_burn_in, Observable};
use emfluct_core::moderate_deviation::{clt_check, run_ensemble, tail_ratio_curve};
use emfluct_core::parallel;
use emfluct_core::rng::NoiseStream;
use emfluct_core::sde::{simulate_trajectory, EmConfig, SdeModel};
use emfluct_core::stats;
use emfluct_core::stein::{stein_solution_ou, OuSteinKind};

/// CLT target for h = x²: pi(|sigma grad phi|²) with grad phi = -x/a under
/// pi = N(0, sigma²/2a) gives sigma⁴/(2a³) = 1/2 at a = sigma = 1. The
/// fluctuation law is visibly skewed at finite eta, so the KS distance is
/// only required to shrink as eta falls.
#[test]
fn clt_quadratic_observable_variance_target() {
    let model = SdeModel::ou(1.0, 1.0).unwrap();
    let bundle = stein_solution_ou(1.0, 1.0, OuSteinKind::Quadratic).unwrap();
    let h = Observable::quadratic();
    let mut ks_by_eta = Vec::new();
    for eta in [0.1, 0.025] {
        let burn = default_burn_in(eta, 20.0);
        let ens = run_ensemble(&model, &h, 0.5, &bundle, eta, 3000, burn, 414, 1).unwrap();
        let check = clt_check(&ens, 0.5).unwrap();
        assert!(
            (check.variance_ratio - 1.0).abs() < 0.15,
            "eta {eta}: variance ratio {}",
            check.variance_ratio
        );
        ks_by_eta.push(check.ks_stat);
    }
    assert!(
        ks_by_eta[1] < ks_by_eta[0],
        "KS should shrink with eta: {ks_by_eta:?}"
    );
}

/// The martingale part has mean zero and its variance approaches
/// pi(|sigma grad phi|²) as eta falls (for h = x² the finite-eta value is
/// the chain variance 1/(2-eta), converging to 1/2).
#[test]
fn martingale_part_moments() {
    let model = SdeModel::ou(1.0, 1.0).unwrap();
    let bundle = stein_solution_ou(1.0, 1.0, OuSteinKind::Quadratic).unwrap();
    let replicas = 4000;
    let target = 0.5;
    let mut gaps = Vec::new();
    for (i, eta) in [0.2, 0.05].into_iter().enumerate() {
        let burn = default_burn_in(eta, 20.0);
        let hs: Vec<f64> = parallel::map_indexed(replicas, 2, |r| {
            let config = EmConfig::new(eta, vec![0.0]).unwrap().with_burn_in(burn);
            let mut stream = NoiseStream::new(777 + i as u64, r as u64);
            let traj = simulate_trajectory(&model, &config, &mut stream).unwrap();
            martingale_part(&traj, &bundle, &model).unwrap()
        });
        let (mean, sd, se) = stats::mean_sd_se(&hs);
        assert!(mean.abs() <= 4.0 * se, "eta {eta}: mean {mean}, se {se}");
        let var = sd * sd;
        // finite-eta oracle: Var H = eta² m E[theta²] = sigma²/(2a - a²eta)
        let oracle = 1.0 / (2.0 - eta);
        let var_se = var * (2.0 / replicas as f64).sqrt();
        assert!(
            (var - oracle).abs() < 4.0 * var_se,
            "eta {eta}: var {var} vs oracle {oracle}"
        );
        gaps.push((var - target).abs());
    }
    assert!(
        gaps[1] < gaps[0],
        "martingale variance should approach {target}: gaps {gaps:?}"
    );
}

/// Full pipeline at eta = 0.1, moderate N: the tail ratio at x = 1 sits in
/// the ±10% band (the million-replica version is the acceptance run).
#[test]
fn tail_ratio_pipeline_landmark() {
    let model = SdeModel::ou(1.0, 1.0).unwrap();
    let bundle = stein_solution_ou(1.0, 1.0, OuSteinKind::Linear).unwrap();
    let h = Observable::linear();
    let eta = 0.1;
    let burn = default_burn_in(eta, 20.0);
    let ens = run_ensemble(&model, &h, 0.0, &bundle, eta, 50_000, burn, 2027, 1).unwrap();
    let curve = tail_ratio_curve(&ens, &[1.0]).unwrap();
    let row = &curve.rows[0];
    assert!(
        row.ratio > 0.9 && row.ratio < 1.1,
        "ratio(1) = {} [{}, {}]",
        row.ratio,
        row.ci_low,
        row.ci_high
    );
    assert!(row.trusted);
}

/// The decomposition identity also holds for the linear-h bundle, where the
/// only nonzero remainder is the boundary term R1.
#[test]
fn identity_exact_for_linear_bundle() {
    let model = SdeModel::ou(1.0, 1.0).unwrap();
    let bundle = stein_solution_ou(1.0, 1.0, OuSteinKind::Linear).unwrap();
    let h = Observable::linear();
    let eta = 0.1;
    let config = EmConfig::new(eta, vec![0.4]).unwrap().with_burn_in(250);
    let mut stream = NoiseStream::new(4242, 0);
    let traj = simulate_trajectory(&model, &config, &mut stream).unwrap();
    let rep = emfluct_core::decomposition::decomposition_residual(
        &traj, &h, 0.0, &bundle, &model, 5, 1e-10,
    )
    .unwrap();
    assert!(
        rep.residual.abs() < 1e-12 * (1.0 + rep.lhs.abs()),
        "residual {}",
        rep.residual
    );
    for i in 1..6 {
        assert_eq!(rep.r_parts[i], 0.0, "R{} should vanish for linear phi", i + 1);
    }
    assert!(rep.r_parts[0] != 0.0);
}
