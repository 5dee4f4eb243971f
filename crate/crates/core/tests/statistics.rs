//! Statistical behaviour of the sampler and estimators on small models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wlqmc::checks::chi_square_p_value;
use wlqmc::estimators::{estimate_all, importance_correlations, importance_sampling_with, run_mcmc, ImportanceParams};
use wlqmc::{Boundary, ChainState, Dynamics, Estimate, McmcParams, ModelSpec, MoveKind, Observable, ThermalState, WorldlineConfig};

fn four_site_chain() -> ModelSpec {
    ModelSpec::ising_chain(4, 0.8, 0.3, 0.9, 1.0, Boundary::Free)
}

fn within(a: &Estimate, b: &Estimate, sigmas: f64) -> bool {
    (a.mean - b.mean).abs() <= sigmas * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
}

#[test]
fn chain_importance_and_exact_agree() {
    let spec = four_site_chain();
    let f = Observable::spin_product(&[0, 1]).unwrap();
    let (a, b) = (Observable::spin(0), Observable::spin(3));
    let exact = ThermalState::new(&spec).unwrap();
    let exact_mean = exact.expectation(&f).unwrap();
    let exact_cov = exact.truncated_correlation(&a, &b).unwrap();

    let params = McmcParams::new(100.0, 40_000.0, 40, 3).with_chains(2);
    let run = estimate_all(&spec, std::slice::from_ref(&f), &[(a.clone(), b.clone())], &params, None).unwrap();
    let ip = ImportanceParams::new(200_000, 3);
    let is_mean = importance_sampling_with(&spec, &[f], &ip).unwrap()[0];
    let is_cov = importance_correlations(&spec, &[(a, b)], &ip).unwrap()[0];

    let exact_as = |v: f64| Estimate { mean: v, stderr: 0.0, n_samples: 0, tau_int: 0.0, ess: 0.0 };
    for (chain, is, value) in [(run.means[0], is_mean, exact_mean), (run.correlations[0], is_cov, exact_cov)] {
        assert!(within(&chain, &exact_as(value), 3.0), "chain {chain:?} vs {value}");
        assert!(within(&is, &exact_as(value), 3.0), "importance {is:?} vs {value}");
        assert!(within(&chain, &is, 3.0), "chain {chain:?} vs importance {is:?}");
    }
}

#[test]
fn disjoint_seeds_are_compatible() {
    let spec = four_site_chain();
    let f = [Observable::spin(1)];
    let a = run_mcmc(&spec, &f, &McmcParams::new(50.0, 10_000.0, 20, 11)).unwrap()[0];
    let b = run_mcmc(&spec, &f, &McmcParams::new(50.0, 10_000.0, 20, 12)).unwrap()[0];
    assert_ne!(a.mean, b.mean);
    assert!(within(&a, &b, 3.0), "{a:?} vs {b:?}");
}

#[test]
fn stderr_shrinks_with_root_run_length() {
    let spec = four_site_chain();
    let f = [Observable::spin(0)];
    let mean_stderr = |run_length: f64| {
        let seeds = 0..8u64;
        let n = seeds.clone().count() as f64;
        seeds.map(|s| run_mcmc(&spec, &f, &McmcParams::new(50.0, run_length, 50, 100 + s)).unwrap()[0].stderr).sum::<f64>() / n
    };
    let ratio = mean_stderr(4_000.0) / mean_stderr(8_000.0);
    let expected = std::f64::consts::SQRT_2;
    assert!((ratio / expected - 1.0).abs() < 0.2, "ratio {ratio}");
}

/// Without interactions every flip proposal is accepted, so flips at a site
/// form a rate-one Poisson process.
#[test]
fn free_flips_are_a_unit_rate_poisson_process() {
    let spec = ModelSpec::ising_chain(3, 0.0, 0.0, 0.7, 1.5, Boundary::Free);
    let dynamics = Dynamics::new(&spec);
    let mut state = ChainState::new(WorldlineConfig::empty(3, 1.5, 1), ChaCha8Rng::seed_from_u64(9));
    let windows = 2000;
    let mut counts = vec![vec![0usize; windows]; 3];
    loop {
        let e = dynamics.step(&mut state);
        if e.clock >= windows as f64 {
            break;
        }
        if e.kind == MoveKind::Flip {
            assert!(e.accepted);
            counts[e.site][e.clock as usize] += 1;
        }
    }
    let poisson = |max: usize| {
        let mut p = vec![(-1.0f64).exp()];
        for k in 1..=max {
            p.push(p[k - 1] / k as f64);
        }
        p
    };
    for site in &counts {
        let p = chi_square_p_value(site, poisson);
        assert!(p > 0.01, "p-value {p}");
    }
}
