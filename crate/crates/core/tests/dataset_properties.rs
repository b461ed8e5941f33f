use nbrdf_core::dataset::*;
use nbrdf_core::oracle::{Bottom, GridSpec};
use nbrdf_core::{Error, RngStream};

/// Two-sided KS statistic against a continuous CDF.
fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

// asymptotic critical value for p = 0.01
fn ks_critical(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

#[test]
fn parameter_distributions_match_table() {
    let n = 10_000;
    let mut rng = RngStream::new(77, 0);
    let mut alphas = Vec::new();
    let mut etas = Vec::new();
    let mut r0s = Vec::new();
    let mut albedos = Vec::new();
    let mut sigmas = [0usize; 4];
    for _ in 0..n {
        let BrdfParams::Layered { stack, .. } = sample_params(BrdfKind::TwoLayer, &mut rng) else { unreachable!() };
        let Bottom::Conductor(c) = stack.bottom else { unreachable!() };
        alphas.push(stack.top.alpha);
        etas.push(stack.top.eta);
        r0s.push(c.r0);
        albedos.push(stack.medium.albedo);
        sigmas[SIGMA_T_SUPPORT.iter().position(|&s| s == stack.medium.sigma_t).unwrap()] += 1;
    }
    let alpha_cdf = |a: f64| ((a.cbrt() - 0.216) / 0.784).clamp(0.0, 1.0);
    let eta_cdf = |e: f64| ((e - 1.05) / 0.95).clamp(0.0, 1.0);
    let unit_cdf = |r: f64| r.clamp(0.0, 1.0);
    let albedo_cdf = |a: f64| 1.0 - (1.0 - a).max(0.0).sqrt();
    assert!(ks_statistic(alphas, alpha_cdf) < ks_critical(n));
    assert!(ks_statistic(etas, eta_cdf) < ks_critical(n));
    assert!(ks_statistic(r0s, unit_cdf) < ks_critical(n));
    assert!(ks_statistic(albedos.clone(), albedo_cdf) < ks_critical(n));
    let mean_albedo = albedos.iter().sum::<f64>() / n as f64;
    assert!(mean_albedo > 0.6, "albedo should be biased toward 1");
    assert!(sigmas.iter().all(|&c| c > 2_300 && c < 2_700), "{sigmas:?}");
}

fn small_manifest() -> DatasetManifest {
    DatasetManifest { counts: [2, 2, 3, 1], seed: 3, grid: GridSpec::new(2, 4), paths_per_pair: 8, validation_fraction: 0.0 }
}

#[test]
fn epochs_are_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.nbds");
    generate_dataset(&small_manifest(), &path, |_, _| {}).unwrap();
    let epoch = || load_batches(&path, 7, 11).unwrap().flatten().collect::<Vec<_>>();
    let a = epoch();
    let b = epoch();
    assert_eq!(a.len(), 8 * 64);
    assert_eq!(a, b);
    let mut seen: Vec<(usize, usize)> = a.iter().map(|s| (s.record, s.pair)).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 8 * 64);
    let other = load_batches(&path, 7, 12).unwrap().flatten().collect::<Vec<_>>();
    assert_ne!(a, other);
}

#[test]
fn regeneration_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("1.nbds"), dir.path().join("2.nbds"));
    generate_dataset(&small_manifest(), &p1, |_, _| {}).unwrap();
    generate_dataset(&small_manifest(), &p2, |_, _| {}).unwrap();
    assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.nbds");
    generate_dataset(&small_manifest(), &path, |_, _| {}).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_batches(&path, 4, 0), Err(Error::Format(_))));

    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_batches(&path, 4, 0), Err(Error::TruncatedFile)));
}

#[test]
fn desk_preset_has_560_records() {
    assert_eq!(DatasetManifest::desk().total_records(), 560);
    assert_eq!(DatasetManifest::paper().total_records(), 300 + 300 + 12_720 + 1_800);
    assert_eq!(GridSpec::new(25, 25).pairs(), 390_625);
}
