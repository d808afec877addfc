use nalgebra::{DMatrix, DVector};
use skewfa::ecm::{fit_with_progress, FitConfig};
use skewfa::metrics::ari;
use skewfa::{ComponentParams, Dataset, Dims, Family, MixtureModel};
use std::time::Instant;

fn main() {
    let p = 6;
    let q = 2;
    let r = 2;
    let comp = |pi: f64, shift: f64, nu: f64, sk: f64| ComponentParams {
        pi,
        mu: DVector::from_fn(p, |i, _| shift + 0.3 * i as f64),
        loadings: DMatrix::from_fn(p, q, |i, j| {
            0.8 * ((i + 2 * j + 1) as f64 * 0.7).sin() + if i % q == j { 0.6 } else { 0.1 }
        }),
        skew: DMatrix::from_fn(q, r, |i, j| if i == j { sk } else { -0.2 * sk }),
        uniquenesses: DVector::from_fn(p, |i, _| 0.3 + 0.05 * i as f64),
        nu,
    };
    let truth = MixtureModel::new(
        vec![comp(0.45, 0.0, 5.0, 1.6), comp(0.55, 6.0, 8.0, -1.4)],
        Dims { p, q, r },
        Family::Cfustfa,
    )
    .unwrap();
    let n = 2000;
    let (y, labels) = skewfa::sample_mixture(&truth, n, 7).unwrap();
    let data = Dataset::new(y, None).unwrap();

    let mut cfg = FitConfig::new(2, q, r, Family::Cfustfa);
    cfg.seed = 1;
    cfg.tol = 1e-4;
    cfg.max_iter = 100;
    let t0 = Instant::now();
    let mut last = f64::NEG_INFINITY;
    let mut violations = 0;
    let report = fit_with_progress(&data, &cfg, |k, ll, gap| {
        if ll < last - 1e-8 * last.abs().max(1.0) {
            violations += 1;
            eprintln!("  MONOTONICITY VIOLATION at iter {k}: {last} -> {ll}");
        }
        last = ll;
        if k % 10 == 0 {
            eprintln!("iter={k} loglik={ll:.4} gap={gap:?}");
        }
    })
    .unwrap();
    eprintln!(
        "done: iters={} converged={} loglik={:.4} elapsed={:.1}s violations={violations}",
        report.iterations,
        report.converged,
        report.loglik(),
        t0.elapsed().as_secs_f64()
    );
    let truth_i64: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
    let pred_i64: Vec<i64> = report.labels.iter().map(|&l| l as i64).collect();
    eprintln!("ARI vs generating labels: {:.4}", ari(&pred_i64, &truth_i64).unwrap());
    eprintln!(
        "nu estimates: {:?}",
        report.model.components.iter().map(|c| c.nu).collect::<Vec<_>>()
    );
    eprintln!(
        "pi estimates: {:?}",
        report.model.components.iter().map(|c| c.pi).collect::<Vec<_>>()
    );
}
