use nbrdf_core::analytic::{eval_conductor, ConductorParams, DielectricParams};
use nbrdf_core::math::spherical_to_dir;
use nbrdf_core::oracle::{eval_layered, sample_layered, LayerStack, MediumParams};
use nbrdf_core::stats::RunningStats;
use nbrdf_core::{Direction, RngStream};

fn random_stack(rng: &mut RngStream) -> LayerStack {
    let alpha = |r: &mut RngStream| (0.216 + 0.784 * r.next_f64()).powi(3).max(0.05);
    LayerStack::two_layer(
        DielectricParams { alpha: alpha(rng), eta: 1.05 + 0.95 * rng.next_f64() },
        MediumParams { albedo: 1.0 - rng.next_f64().powi(2), sigma_t: [0.0, 1.0, 2.0, 5.0][rng.below(4) as usize] },
        ConductorParams { alpha: alpha(rng), r0: rng.next_f64() },
    )
}

fn random_dir(rng: &mut RngStream) -> Direction {
    spherical_to_dir(rng.next_f64() * 1.3, rng.next_f64() * std::f64::consts::TAU)
}

#[test]
fn reciprocity_on_random_stacks() {
    let mut rng = RngStream::new(100, 0);
    for k in 0..10 {
        let s = random_stack(&mut rng);
        let (a, b) = (random_dir(&mut rng), random_dir(&mut rng));
        let mut r1 = RngStream::new(101, k);
        let mut r2 = RngStream::new(102, k);
        let f_ab = eval_layered(&s, a, b, 20_000, &mut r1).unwrap();
        let f_ba = eval_layered(&s, b, a, 20_000, &mut r2).unwrap();
        let sigma = (f_ab.stderr.powi(2) + f_ba.stderr.powi(2)).sqrt();
        assert!((f_ab.value - f_ba.value).abs() <= 3.0 * sigma + 1e-12, "stack {k}: {f_ab:?} vs {f_ba:?}");
    }
}

#[test]
fn degenerate_stack_matches_bottom_at_random_pairs() {
    let mut rng = RngStream::new(200, 0);
    for k in 0..20 {
        let bottom = ConductorParams { alpha: 0.1 + 0.9 * rng.next_f64(), r0: rng.next_f64() };
        let s = LayerStack::two_layer(
            DielectricParams { alpha: 0.4, eta: 1.0 },
            MediumParams { albedo: 0.5, sigma_t: 0.0 },
            bottom,
        );
        let (a, b) = (random_dir(&mut rng), random_dir(&mut rng));
        let est = eval_layered(&s, a, b, 4_000, &mut RngStream::new(201, k)).unwrap();
        let exact = eval_conductor(&bottom, a, b);
        assert!((est.value - exact).abs() <= 3.0 * est.stderr + 1e-9, "pair {k}: {est:?} vs {exact}");
    }
}

#[test]
fn lower_albedo_never_brightens() {
    let wi = spherical_to_dir(0.3, 0.0);
    let wo = spherical_to_dir(0.6, 2.0);
    let mut prev: Option<(f64, f64)> = None;
    for &a in &[1.0, 0.8, 0.5, 0.2, 0.0] {
        let s = LayerStack::two_layer(
            DielectricParams { alpha: 0.3, eta: 1.5 },
            MediumParams { albedo: a, sigma_t: 2.0 },
            ConductorParams { alpha: 0.4, r0: 0.9 },
        );
        let e = eval_layered(&s, wi, wo, 20_000, &mut RngStream::new(300, 0)).unwrap();
        if let Some((v, se)) = prev {
            assert!(e.value <= v + 3.0 * (se * se + e.stderr * e.stderr).sqrt(), "albedo {a}");
        }
        prev = Some((e.value, e.stderr));
    }
}

#[test]
fn transparent_top_samples_like_bottom() {
    let bottom = ConductorParams { alpha: 0.3, r0: 0.7 };
    let s = LayerStack::two_layer(DielectricParams { alpha: 0.3, eta: 1.0 }, MediumParams { albedo: 1.0, sigma_t: 0.0 }, bottom);
    let wi = spherical_to_dir(0.5, 0.0);
    let mut layered = RunningStats::default();
    let mut bare = RunningStats::default();
    let mut rng = RngStream::new(400, 0);
    let iface = nbrdf_core::analytic::Interface::Conductor(bottom);
    for _ in 0..50_000 {
        layered.push(sample_layered(&s, wi, &mut rng).unwrap().1);
        bare.push(iface.sample(wi, &mut rng).map(|s| s.weight).unwrap_or(0.0));
    }
    let sigma = (layered.stderr().powi(2) + bare.stderr().powi(2)).sqrt();
    assert!((layered.mean() - bare.mean()).abs() <= 3.0 * sigma);
}

#[test]
#[ignore]
fn tabulation_timing() {
    let mut rng = RngStream::new(5, 0);
    let s = random_stack(&mut rng);
    let t = std::time::Instant::now();
    let v = nbrdf_core::oracle::tabulate_layered(&s, nbrdf_core::oracle::GridSpec::new(12, 24), 64, 1).unwrap();
    println!("{} values in {:?} for {:?}", v.len(), t.elapsed(), s);
}
