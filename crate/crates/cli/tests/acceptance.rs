//! Acceptance suite: prints one PASS/FAIL line per criterion.
//!
//! Criteria that need trained desk-scale networks read them from
//! `NBRDF_ACCEPTANCE_DIR` (default `target/acceptance`), in the layout written
//! by `scripts/desk_pipeline.sh`. The process exits nonzero on a failed
//! criterion only when `NBRDF_ACCEPTANCE_STRICT=1`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nbrdf_core::analytic::{eval_conductor, eval_dielectric_reflect, ConductorParams, DielectricParams};
use nbrdf_core::dataset::{generate_dataset, sample_conductor, tabulate_analytic, BrdfKind, BrdfParams, Dataset, DatasetManifest, Split};
use nbrdf_core::math::spherical_to_dir;
use nbrdf_core::oracle::{eval_layered, sample_layered, GridSpec, LayerStack, MediumParams};
use nbrdf_core::stats::{relative_l1, RunningStats};
use nbrdf_core::{Direction, RngStream};
use nbrdf_neural::decoder::{build_decoder, project_channel, DecodedTarget, DecoderTrainConfig, FnTarget, ProjectConfig};
use nbrdf_neural::latent::ONES;
use nbrdf_neural::layering::{build_layering_net, layer, train_layering, LayerTriple, LayeringNet, LayeringTrainConfig, TripleFile};
use nbrdf_neural::sampler::{build_sampler_net, chi_square_test, fit_params, integrate_pdf, train_sampler, GndfConfig, ProxyParams, ProxyPdf, SamplerNet, SamplerTrainConfig};
use nbrdf_neural::texture::{build_mipmap, interpolate, LatentTexture};
use nbrdf_neural::{project_brdf, train_decoder, Decoder, LatentBrdf, LatentFile, LATENT_DIM};
use nbrdf_nn::check::gradient_check;
use nbrdf_nn::{Layer, MlpGraph, MlpWeights, SkipAdd, Tensor};
use nbrdf_render::image::ImageBuffer;
use nbrdf_render::{render, render_lobe, render_lobe_with, Material, NeuralSampling, RenderOptions, Scene, Strategy};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn artifacts_dir() -> PathBuf {
    std::env::var_os("NBRDF_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

struct Artifacts {
    dataset: Dataset,
    decoder: Decoder,
    latents: LatentFile,
    layering: Option<LayeringNet>,
    sampler: Option<SamplerNet>,
}

fn load_artifacts(dir: &Path) -> Result<Artifacts, String> {
    let dataset = Dataset::load(&dir.join("dataset.nbds")).map_err(|e| format!("dataset: {e}"))?;
    let decoder = Decoder::load(&dir.join("decoder/decoder.nbw")).map_err(|e| format!("decoder: {e}"))?;
    let latents = LatentFile::load(&dir.join("decoder/latents.nblv")).map_err(|e| format!("latents: {e}"))?;
    let layering = LayeringNet::load(&dir.join("layering/layering.nbw")).ok();
    let sampler = SamplerNet::load(&dir.join("sampler/sampler.nbw"), SamplerTrainConfig::desk().wi_side).ok();
    Ok(Artifacts { dataset, decoder, latents, layering, sampler })
}

fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut r = RngStream::new(seed, 77);
    move || r.next_f64()
}

fn grad_error(graph: &MlpGraph, batch: usize, params: Option<&[usize]>, seed: u64) -> f64 {
    let mut w: MlpWeights<f64> = graph.init_weights(lcg(seed));
    let mut r = lcg(seed + 1);
    for v in &mut w.data {
        *v += 0.2 * (r() - 0.5);
    }
    let x = Tensor::matrix(batch, graph.input_dim, (0..batch * graph.input_dim).map(|_| 2.0 * r() - 1.0).collect()).unwrap();
    let p = gradient_check(graph, &w, &x, params, lcg(seed + 2), 3e-4).unwrap();
    let i = gradient_check(graph, &w, &x, Some(&[]), lcg(seed + 2), 1e-5).unwrap();
    p.max_rel_err_params.max(i.max_rel_err_input)
}

fn gradient_correctness() -> Verdict {
    let t0 = Instant::now();
    let small = [
        ("linear", MlpGraph::new(4, vec![Layer::Linear { in_dim: 4, out_dim: 3 }], vec![])),
        ("layernorm", MlpGraph::new(5, vec![Layer::LayerNorm { dim: 5 }], vec![])),
        ("relu", MlpGraph::new(4, vec![Layer::Linear { in_dim: 4, out_dim: 6 }, Layer::Relu], vec![])),
        ("residual", MlpGraph::new(6, vec![Layer::ResidualBlock { dim: 6 }], vec![])),
        (
            "skip",
            MlpGraph::new(
                3,
                vec![
                    Layer::Linear { in_dim: 3, out_dim: 4 },
                    Layer::Relu,
                    Layer::ResidualBlock { dim: 4 },
                    Layer::LayerNorm { dim: 4 },
                    Layer::Relu,
                    Layer::Linear { in_dim: 4, out_dim: 2 },
                ],
                vec![SkipAdd { from: 1, to: 2 }],
            ),
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (i, (name, g)) in small.into_iter().enumerate() {
        let e = grad_error(&g.unwrap(), 3, None, 10 + i as u64);
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    for (i, (name, g)) in [("decoder", build_decoder()), ("layering", build_layering_net()), ("sampler", build_sampler_net())].into_iter().enumerate() {
        let n = g.param_count();
        let idx: Vec<usize> = (0..96).map(|k| k * n / 96).chain([n - 1]).collect();
        let e = grad_error(&g, 1, Some(&idx), 20 + i as u64);
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(worst < 1e-6 && secs < 60.0, format!("max rel err {worst:.2e} ({}), {secs:.0} s", parts.join(", ")))
}

fn alpha_draw(r: &mut RngStream) -> f64 {
    (0.216 + 0.784 * r.next_f64()).powi(3).max(0.05)
}

fn random_dir(rng: &mut RngStream) -> Direction {
    spherical_to_dir(rng.next_f64() * 1.3, rng.next_f64() * std::f64::consts::TAU)
}

fn oracle_validity() -> Verdict {
    let t0 = Instant::now();
    let mut rng = RngStream::new(300, 0);
    let mut furnace_ok = 0;
    let mut worst_excess = f64::NEG_INFINITY;
    for k in 0..20 {
        let s = LayerStack::two_layer(
            DielectricParams { alpha: alpha_draw(&mut rng), eta: 1.05 + 0.95 * rng.next_f64() },
            MediumParams { albedo: 1.0, sigma_t: [0.0, 1.0, 2.0, 5.0][rng.below(4) as usize] },
            ConductorParams { alpha: alpha_draw(&mut rng), r0: 1.0 },
        );
        let wi = random_dir(&mut rng);
        let mut walk = RngStream::new(301, k);
        let mut st = RunningStats::default();
        for _ in 0..100_000 {
            st.push(sample_layered(&s, wi, &mut walk).unwrap().1);
        }
        let excess = (st.mean() - 1.0) / st.stderr().max(1e-300);
        worst_excess = worst_excess.max(excess);
        furnace_ok += usize::from(st.mean() <= 1.0 + 3.0 * st.stderr());
    }

    let mut degenerate_ok = 0;
    let mut rng = RngStream::new(200, 0);
    for k in 0..20 {
        let bottom = ConductorParams { alpha: 0.1 + 0.9 * rng.next_f64(), r0: rng.next_f64() };
        let s = LayerStack::two_layer(DielectricParams { alpha: 0.4, eta: 1.0 }, MediumParams { albedo: 0.5, sigma_t: 0.0 }, bottom);
        let (a, b) = (random_dir(&mut rng), random_dir(&mut rng));
        let est = eval_layered(&s, a, b, 4_000, &mut RngStream::new(201, k)).unwrap();
        degenerate_ok += usize::from((est.value - eval_conductor(&bottom, a, b)).abs() <= 3.0 * est.stderr + 1e-9);
    }

    let mut reciprocity_ok = 0;
    let mut rng = RngStream::new(100, 0);
    for k in 0..10 {
        let s = LayerStack::two_layer(
            DielectricParams { alpha: alpha_draw(&mut rng), eta: 1.05 + 0.95 * rng.next_f64() },
            MediumParams { albedo: 1.0 - rng.next_f64().powi(2), sigma_t: [0.0, 1.0, 2.0, 5.0][rng.below(4) as usize] },
            ConductorParams { alpha: alpha_draw(&mut rng), r0: rng.next_f64() },
        );
        let (a, b) = (random_dir(&mut rng), random_dir(&mut rng));
        let f_ab = eval_layered(&s, a, b, 20_000, &mut RngStream::new(101, k)).unwrap();
        let f_ba = eval_layered(&s, b, a, 20_000, &mut RngStream::new(102, k)).unwrap();
        let sigma = (f_ab.stderr.powi(2) + f_ba.stderr.powi(2)).sqrt();
        reciprocity_ok += usize::from((f_ab.value - f_ba.value).abs() <= 3.0 * sigma + 1e-12);
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        furnace_ok == 20 && degenerate_ok == 20 && reciprocity_ok == 10 && secs < 600.0,
        format!("furnace {furnace_ok}/20 (max excess {worst_excess:.2} sigma), degenerate {degenerate_ok}/20, reciprocity {reciprocity_ok}/10, {secs:.0} s"),
    )
}

fn proxy_normalization() -> Verdict {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        let sigma = 0.02 + 0.98 * i as f64 / 4.0;
        for j in 0..5 {
            let p = ProxyPdf::new(ProxyParams { sigma, w: j as f64 / 4.0 });
            for t in [0.0f64, 30.0, 60.0] {
                worst = worst.max((integrate_pdf(&p, spherical_to_dir(t.to_radians(), 0.3), 256) - 1.0).abs());
            }
        }
    }
    let mut min_p: f64 = 1.0;
    for (k, (sigma, w, t)) in [(0.3, 1.0, 0.0f64), (0.1, 0.0, 30.0), (0.2, 0.3, 60.0), (0.5, 0.5, 75.0)].into_iter().enumerate() {
        let p = ProxyPdf::new(ProxyParams { sigma, w });
        let r = chi_square_test(&p, spherical_to_dir(t.to_radians(), 0.3), 1_000_000, 32, &mut RngStream::new(11, k as u64));
        min_p = min_p.min(r.p_value);
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(worst < 1e-2 && min_p > 0.01 && secs < 300.0, format!("max |integral - 1| {worst:.2e}, min chi-square p {min_p:.3}, {secs:.0} s"))
}

fn clamped_grid(decoder: &Decoder, z: &[f32; LATENT_DIM], grid: GridSpec) -> Vec<f32> {
    decoder.decode_grid(z, grid).into_iter().map(|v| v.max(0.0)).collect()
}

fn decoder_fit(a: &Artifacts) -> Verdict {
    let grid = a.dataset.grid();
    let held = a.dataset.indices(|r| r.split == Split::Validation && r.kind() == BrdfKind::TwoLayer);
    let errs: Vec<f64> = held.iter().map(|&r| relative_l1(&clamped_grid(&a.decoder, a.latents.entries[r].channel(0), grid), &a.dataset.records[r].values)).collect();
    let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    let mut rng = RngStream::new(4040, 0);
    let mut proj = Vec::new();
    for k in 0..5 {
        let p = sample_conductor(&mut rng);
        let t = FnTarget(move |wi, wo| eval_conductor(&p, wi, wo));
        let z = project_brdf(&a.decoder, &[&t], &ProjectConfig { seed: k, ..ProjectConfig::default() }).unwrap();
        proj.push(relative_l1(&clamped_grid(&a.decoder, z.channel(0), grid), &tabulate_analytic(&BrdfParams::Conductor(p), grid)));
    }
    let pass = mean <= 0.15 && proj.iter().all(|&e| e <= 0.15);
    let list: Vec<String> = proj.iter().map(|e| format!("{e:.3}")).collect();
    verdict(pass, format!("held-out two-layer mean rel L1 {mean:.3} over {} records; projected conductors {}", errs.len(), list.join(" ")))
}

fn projection_fixed_point(a: Option<&Artifacts>) -> Verdict {
    let t0 = Instant::now();
    let grid = GridSpec::new(12, 24);
    let (decoder, v, note) = match a {
        Some(a) => {
            let r = a.dataset.indices(|r| r.split == Split::Train && r.kind() == BrdfKind::TwoLayer)[0];
            (a.decoder.clone(), *a.latents.entries[r].channel(0), "trained decoder")
        }
        None => {
            let mut r = lcg(5);
            (Decoder::init(5), std::array::from_fn(|_| 1.0 + (r() - 0.5) as f32), "untrained decoder, artifacts missing")
        }
    };
    let target = DecodedTarget { decoder: &decoder, latent: v };
    let p = project_channel(&decoder, &target, &ProjectConfig::default()).unwrap();
    let err = relative_l1(&clamped_grid(&decoder, &p.latent, grid), &clamped_grid(&decoder, &v, grid));
    let dist = p.latent.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    let start = ONES.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        err < 1e-3 && secs < 300.0,
        format!("grid rel L1 {err:.2e} after {} steps ({note}); max latent gap {dist:.3} from {start:.3} at start; {secs:.0} s", p.steps),
    )
}

struct LayerConfig {
    top: DielectricParams,
    albedo: f64,
    sigma_t: f64,
    bottom: ConductorParams,
}

fn layering_fidelity(a: &Artifacts, net: &LayeringNet) -> Verdict {
    const RES: usize = 32;
    let wi = spherical_to_dir(0.0, 0.0);
    let cond = |alpha| ConductorParams { alpha, r0: 0.8 };
    let diel = |alpha| DielectricParams { alpha, eta: 1.5 };
    let configs = [
        LayerConfig { top: diel(0.05), albedo: 0.9, sigma_t: 1.0, bottom: cond(0.1) },
        LayerConfig { top: diel(0.05), albedo: 0.9, sigma_t: 1.0, bottom: cond(0.5) },
        LayerConfig { top: diel(0.3), albedo: 0.9, sigma_t: 1.0, bottom: cond(0.1) },
        LayerConfig { top: diel(0.3), albedo: 0.5, sigma_t: 2.0, bottom: cond(0.5) },
        LayerConfig { top: diel(0.6), albedo: 0.9, sigma_t: 1.0, bottom: cond(0.3) },
        LayerConfig { top: diel(0.1), albedo: 0.2, sigma_t: 2.0, bottom: cond(0.3) },
        LayerConfig { top: diel(0.1), albedo: 0.95, sigma_t: 5.0, bottom: cond(0.3) },
        LayerConfig { top: diel(0.3), albedo: 0.5, sigma_t: 5.0, bottom: cond(0.3) },
        LayerConfig { top: DielectricParams { alpha: 0.216f64.powi(3), eta: 1.05 }, albedo: 0.9, sigma_t: 0.0, bottom: cond(0.3) },
        LayerConfig { top: diel(0.05), albedo: 0.7, sigma_t: 0.5, bottom: cond(0.05) },
    ];
    let near_transparent = 8;
    let project = |f: Box<dyn Fn(Direction, Direction) -> f64 + Sync>| project_brdf(&a.decoder, &[&FnTarget(f)], &ProjectConfig::default()).unwrap();
    let lobe_of = |z: LatentBrdf| render_lobe(&Material::Latent { decoder: 0, latent: z, sampling: NeuralSampling::Cosine }, &[&a.decoder], wi, RES).unwrap();
    let mut errs = Vec::new();
    let mut to_bottom = Vec::new();
    for (k, c) in configs.iter().enumerate() {
        let (top, bottom) = (c.top, c.bottom);
        let zt = project(Box::new(move |i, o| eval_dielectric_reflect(&top, i, o)));
        let zb = project(Box::new(move |i, o| eval_conductor(&bottom, i, o)));
        let zl = layer(net, &zt, &zb, &[c.albedo], c.sigma_t).unwrap();
        let decoded = lobe_of(zl);
        let stack = LayerStack::two_layer(c.top, MediumParams { albedo: c.albedo, sigma_t: c.sigma_t }, c.bottom);
        let oracle = render_lobe_with(
            |wi, dirs| {
                dirs.iter()
                    .enumerate()
                    .map(|(j, &wo)| [eval_layered(&stack, wi, wo, 512, &mut RngStream::new(600 + k as u64, j as u64)).unwrap().value; 3])
                    .collect()
            },
            wi,
            RES,
        )
        .unwrap();
        let bottom_lobe = render_lobe_with(|wi, dirs| dirs.iter().map(|&wo| [eval_conductor(&bottom, wi, wo); 3]).collect(), wi, RES).unwrap();
        errs.push(relative_l1(&decoded.data, &oracle.data));
        to_bottom.push(relative_l1(&decoded.data, &bottom_lobe.data));
    }
    let ordered = configs
        .iter()
        .enumerate()
        .filter(|(_, c)| c.sigma_t == 5.0 && c.bottom == configs[near_transparent].bottom)
        .all(|(k, _)| to_bottom[near_transparent] < to_bottom[k]);
    let list: Vec<String> = errs.iter().map(|e| format!("{e:.3}")).collect();
    let dist: Vec<String> = to_bottom.iter().map(|e| format!("{e:.3}")).collect();
    verdict(
        errs.iter().all(|&e| e <= 0.2) && ordered,
        format!("per-config rel L1 [{}]; distance to bottom [{}]; near-transparent closest: {ordered}", list.join(" "), dist.join(" ")),
    )
}

fn latent_operators() -> Verdict {
    let t0 = Instant::now();
    let dyadic = |seed: u64| -> LatentBrdf {
        let mut r = RngStream::new(seed, 1);
        LatentBrdf::mono(std::array::from_fn(|_| (r.below(512) as f32 - 256.0) / 8.0))
    };
    let (a, b) = (dyadic(1), dyadic(2));
    let identity = interpolate(&[a.clone()], &[1.0]).unwrap() == a && interpolate(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap() == a;
    let mid = interpolate(&[a.clone(), b.clone()], &[0.5, 0.5]).unwrap();
    let linear = (0..LATENT_DIM).all(|i| mid.channel(0)[i] == (a.channel(0)[i] + b.channel(0)[i]) / 2.0);
    let texels: Vec<LatentBrdf> = (0..16).map(|k| dyadic(10 + k)).collect();
    let mip = build_mipmap(&LatentTexture::new(4, 4, &texels).unwrap());
    let mut box_exact = true;
    for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        let p = mip.texel(1, x, y);
        for i in 0..LATENT_DIM {
            let s: f32 = [(0, 0), (1, 0), (0, 1), (1, 1)].iter().map(|(dx, dy)| mip.texel(0, 2 * x + dx, 2 * y + dy).channel(0)[i]).sum();
            box_exact &= p.channel(0)[i] == s / 4.0;
        }
    }
    let top = mip.texel(2, 0, 0);
    let mean_exact = (0..LATENT_DIM).all(|i| top.channel(0)[i] == texels.iter().map(|t| t.channel(0)[i]).sum::<f32>() / 16.0);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        identity && linear && box_exact && mean_exact && secs < 1.0,
        format!("identity {identity}, linearity {linear}, box filter {box_exact}, 4x4 two-level mean {mean_exact}, {:.3} s", secs),
    )
}

fn mis_scene(small_light: bool, size: usize) -> Scene {
    let light = if small_light {
        "light type=area origin=-0.1,-0.1,4 e1=0,0.2,0 e2=0.2,0,0 radiance=400"
    } else {
        "light type=area origin=-2,-2,4 e1=0,4,0 e2=4,0,0 radiance=1"
    };
    let text = format!(
        "camera position=0,-6,2.5 look_at=0,0,0.6 up=0,0,1 fov=30 width={size} height={size}
         material name=floor type=lambert albedo=0.4
         material name=m1 type=conductor alpha=0.02 r0=0.9
         material name=m2 type=conductor alpha=0.08 r0=0.9
         material name=m3 type=conductor alpha=0.25 r0=0.9
         material name=m4 type=lambert albedo=0.6
         plane point=0,0,0 normal=0,0,1 material=floor
         sphere center=-1.8,0,0.6 radius=0.6 material=m1
         sphere center=-0.6,0,0.6 radius=0.6 material=m2
         sphere center=0.6,0,0.6 radius=0.6 material=m3
         sphere center=1.8,0,0.6 radius=0.6 material=m4
         {light}
         light type=env radiance=0.05"
    );
    Scene::parse(&text, Path::new(".")).unwrap()
}

fn mis_behavior() -> Verdict {
    let t0 = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, small) in [("large lights", false), ("small light", true)] {
        let scene = mis_scene(small, 128);
        let var = |s: Strategy| render(&scene, &RenderOptions::new(64, s, 8)).unwrap().mean_variance();
        let (l, b, m) = (var(Strategy::LightOnly), var(Strategy::BrdfOnly), var(Strategy::Mis));
        let best = if l.0 <= b.0 { l } else { b };
        let ok = m.0 <= best.0 + 3.0 * (m.1 * m.1 + best.1 * best.1).sqrt();
        pass &= ok;
        parts.push(format!("{name}: light {:.3e} brdf {:.3e} mis {:.3e} (se {:.1e})", l.0, b.0, m.0, m.1));
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(pass && secs < 900.0, format!("mean per-pixel luminance variance; {}; {secs:.0} s", parts.join("; ")))
}

fn glossy_scene(decoder: &Decoder, latent: LatentBrdf, sampling: NeuralSampling) -> Scene {
    let mut s = Scene::parse(
        "camera position=0,-3,0.3 look_at=0,0,0 up=0,0,1 fov=18 width=16 height=16
         sphere center=0,0,0 radius=0.5 material=glossy
         light type=area origin=-1.5,-1.5,2 e1=0,1,0 e2=1,0,0 radiance=6
         light type=env radiance=0.2",
        Path::new("."),
    )
    .unwrap();
    let d = s.add_decoder("desk", Arc::new(decoder.clone()));
    s.add_material("glossy", Material::Latent { decoder: d, latent, sampling });
    s
}

fn sampling_improvement(a: &Artifacts, sampler: &SamplerNet) -> Verdict {
    let t0 = Instant::now();
    let glossiest = a
        .dataset
        .indices(|r| r.split == Split::Train && r.kind() == BrdfKind::Conductor)
        .into_iter()
        .filter_map(|r| match &a.dataset.records[r].params {
            BrdfParams::Conductor(p) if p.alpha >= 0.1 => Some((p.alpha, r)),
            _ => None,
        })
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .expect("a conductor with alpha >= 0.1");
    let latent = a.latents.entries[glossiest.1].clone();
    let params = fit_params(sampler, &latent);
    let proxy = NeuralSampling::Proxy(Arc::new(ProxyPdf::new(params)));
    let reference = render(&glossy_scene(&a.decoder, latent.clone(), proxy.clone()), &RenderOptions::new(16_384, Strategy::Mis, 91)).unwrap();
    let mse = |sampling| {
        let img = render(&glossy_scene(&a.decoder, latent.clone(), sampling), &RenderOptions::new(256, Strategy::BrdfOnly, 7)).unwrap();
        nbrdf_render::image_metrics(&img.image, &reference.image).unwrap().mse
    };
    let (m_proxy, m_cos) = (mse(proxy), mse(NeuralSampling::Cosine));
    verdict(
        m_proxy <= m_cos,
        format!(
            "record {} (alpha {:.3}), fitted sigma {:.3} w {:.3}: proxy MSE {m_proxy:.3e} vs cosine {m_cos:.3e}; {:.0} s",
            glossiest.1,
            glossiest.0,
            params.sigma,
            params.w,
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest { counts: [4, 4, 6, 2], seed: 9, grid: GridSpec::new(4, 8), paths_per_pair: 8, validation_fraction: 0.25 };
    let (pa, pb) = (dir.path().join("a.nbds"), dir.path().join("b.nbds"));
    generate_dataset(&manifest, &pa, |_, _| {}).unwrap();
    generate_dataset(&manifest, &pb, |_, _| {}).unwrap();
    let dataset_same = std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap();

    let ds = Dataset::load(&pa).unwrap();
    let cfg = DecoderTrainConfig { epochs: 2, samples_per_epoch: 1024, batch_size: 256, validation_batch: 32, ..DecoderTrainConfig::desk() };
    let run = || train_decoder(&ds, &cfg, |_, _, _| Ok(())).unwrap();
    let (d1, d2) = (run(), run());
    let decoder_same = d1.decoder.fingerprint() == d2.decoder.fingerprint() && d1.latents == d2.latents;

    let z = |k: usize| d1.latents[k];
    let triples = TripleFile {
        decoder: d1.decoder.fingerprint(),
        triples: (0..6).map(|k| LayerTriple { top: z(4 + k % 4), bottom: z(k % 4), albedo: 0.5, sigma_t: 1.0, target: z(8 + k) }).collect(),
    };
    let lcfg = LayeringTrainConfig { epochs: 2, ..LayeringTrainConfig::desk() };
    let lrun = || train_layering(&triples, None, None, &lcfg, |_, _| Ok(())).unwrap().0.fingerprint();
    let layering_same = lrun() == lrun();

    let gcfg = GndfConfig { resolution: 8, wi_theta: 4, wi_phi: 4 };
    let items: Vec<_> = (0..3)
        .map(|k| {
            let p = ConductorParams { alpha: 0.1 + 0.3 * k as f64, r0: 0.9 };
            (z(k), nbrdf_neural::sampler::compute_gndf(&|wi, wo| eval_conductor(&p, wi, wo), &gcfg).unwrap())
        })
        .collect();
    let scfg = SamplerTrainConfig { epochs: 2, wi_side: 4, ..SamplerTrainConfig::desk() };
    let srun = || train_sampler(&items, &scfg, |_, _| Ok(())).unwrap().0.fingerprint();
    let sampler_same = srun() == srun();

    let scene = mis_scene(false, 32);
    let image = |threads: usize| -> ImageBuffer {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| render(&scene, &RenderOptions::new(16, Strategy::Mis, 3)).unwrap().image)
    };
    let (i1, i3) = (image(1), image(3));
    let image_same = i1.data.iter().map(|v| v.to_bits()).eq(i3.data.iter().map(|v| v.to_bits()));
    verdict(
        dataset_same && decoder_same && layering_same && sampler_same && image_same,
        format!("dataset {dataset_same}, decoder {decoder_same}, layering {layering_same}, sampler {sampler_same}, image across 1/3 threads {image_same}"),
    )
}

fn main() {
    let dir = artifacts_dir();
    let artifacts = load_artifacts(&dir);
    if let Err(e) = &artifacts {
        println!("note: desk artifacts unavailable in {} ({e}); criteria 4, 6 and 9 cannot run", dir.display());
    }
    let art = artifacts.as_ref().ok();
    let missing = |what: &str| verdict(false, format!("not run: {what} missing from {}", dir.display()));
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Verdict>)> = vec![
        (1, "gradient correctness", Box::new(gradient_correctness)),
        (2, "oracle validity", Box::new(oracle_validity)),
        (3, "proxy pdf normalization", Box::new(proxy_normalization)),
        (4, "decoder desk-scale fit (soft)", Box::new(|| art.map_or_else(|| missing("trained decoder"), decoder_fit))),
        (5, "projection fixed point", Box::new(|| projection_fixed_point(art))),
        (
            6,
            "layering desk-scale fidelity (soft)",
            Box::new(|| match art.and_then(|a| a.layering.as_ref().map(|n| (a, n))) {
                Some((a, n)) => layering_fidelity(a, n),
                None => missing("layering network"),
            }),
        ),
        (7, "latent operator exactness", Box::new(latent_operators)),
        (8, "MIS behavior", Box::new(mis_behavior)),
        (
            9,
            "sampling-strategy improvement",
            Box::new(|| match art.and_then(|a| a.sampler.as_ref().map(|s| (a, s))) {
                Some((a, s)) => sampling_improvement(a, s),
                None => missing("sampler network"),
            }),
        ),
        (10, "determinism", Box::new(determinism)),
    ];
    let only: Option<Vec<u32>> = std::env::var("NBRDF_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (id, name, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let v = check();
        failed += usize::from(!v.pass);
        writeln!(out, "{} criterion {id} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail).unwrap();
        out.flush().unwrap();
    }
    if failed > 0 && std::env::var("NBRDF_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
