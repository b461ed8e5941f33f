//! Subcommand implementations. Each takes a resolved [`RunConfig`] and
//! returns the manifest of the files it read and wrote.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use nbrdf_core::analytic::{eval_conductor, eval_dielectric_reflect, ConductorParams, DielectricParams};
use nbrdf_core::dataset::{generate_dataset, BrdfKind, BrdfParams, Dataset, DatasetManifest, Split, TabulatedBrdf};
use nbrdf_core::math::spherical_to_dir;
use nbrdf_core::oracle::GridSpec;
use nbrdf_core::Direction;
use nbrdf_neural::decoder::{project_channel, DecoderTrainConfig, FnTarget, GridTarget, ProjectConfig, ProjectionTarget};
use nbrdf_neural::layering::{layer, train_layering, LayerTriple, LayeringNet, LayeringTrainConfig, TripleFile};
use nbrdf_neural::sampler::{compute_gndf, fit_params, train_sampler, GndfConfig, ProxyCache, SamplerNet, SamplerTrainConfig};
use nbrdf_neural::{project_brdf, train_decoder, Decoder, LatentBrdf, LatentFile, LatentVector};
use nbrdf_render::image::ImageBuffer;
use nbrdf_render::{image_metrics, render, render_lobe, Filter, Material, NeuralSampling, RenderOptions, Scene, Strategy};

use crate::config::RunConfig;
use crate::manifest::{beside, Manifest};
use crate::CliError;

/// Runs a resolved configuration and writes its manifest.
pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.command {
        "gen-dataset" => gen_dataset(cfg),
        "train decoder" => train_decoder_cmd(cfg),
        "train layering" => train_layering_cmd(cfg),
        "train sampler" => train_sampler_cmd(cfg),
        "project" => project(cfg),
        "layer" => layer_cmd(cfg),
        "fit-sampler" => fit_sampler(cfg),
        "render" => render_cmd(cfg),
        "lobe" => lobe(cfg),
        "compare" => compare(cfg),
        other => Err(CliError::Config(format!("unknown command {other}"))),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn manifest_for_dir(m: &Manifest, cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    m.write(cfg, &dir.join("manifest.txt"))
}

pub fn gen_dataset(cfg: &RunConfig) -> Result<(), CliError> {
    let counts: Vec<u32> = cfg.list("counts")?;
    let grid: Vec<usize> = cfg.list("grid")?;
    let (Ok(counts), [nt, np]) = (<[u32; 4]>::try_from(counts), grid.as_slice()) else {
        return Err(CliError::Config("counts needs 4 values and grid 2".into()));
    };
    let manifest = DatasetManifest {
        counts,
        seed: cfg.get("seed")?,
        grid: GridSpec::new(*nt, *np),
        paths_per_pair: cfg.get("paths_per_pair")?,
        validation_fraction: cfg.get("validation_fraction")?,
    };
    let out = cfg.path("out")?;
    let t0 = Instant::now();
    generate_dataset(&manifest, &out, |done, total| {
        if done % 20 == 0 || done == total {
            log::info!("{done}/{total} records, {:.0} s", t0.elapsed().as_secs_f64());
        }
    })
    .map_err(|e| match e {
        nbrdf_core::Error::Format(m) => CliError::Config(m),
        e => e.into(),
    })?;
    let mut m = Manifest::default();
    m.output(&out);
    m.write(cfg, &beside(&out))
}

pub fn train_decoder_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = cfg.path("dataset")?;
    let out = cfg.path("out_dir")?;
    let tc = DecoderTrainConfig {
        epochs: cfg.get("epochs")?,
        samples_per_epoch: cfg.get("samples_per_epoch")?,
        batch_size: cfg.get("batch_size")?,
        weight_lr: cfg.get("weight_lr")?,
        latent_lr: cfg.get("latent_lr")?,
        lr_decay: cfg.get("lr_decay")?,
        validation_batch: cfg.get("validation_batch")?,
        seed: cfg.get("seed")?,
    };
    let ds = Dataset::load(&dataset)?;
    create_dir(&out)?;
    let (wpath, lpath, csv) = (out.join("decoder.nbw"), out.join("latents.nblv"), out.join("loss.csv"));
    let mut loss = BufWriter::new(File::create(&csv)?);
    writeln!(loss, "epoch,train_l1,val_l1,weight_lr,latent_lr,seconds")?;
    let save = |d: &Decoder, z: &[LatentVector]| -> Result<(), nbrdf_neural::Error> {
        d.save(&wpath)?;
        LatentFile { decoder: d.fingerprint(), entries: z.iter().map(|v| LatentBrdf::mono(*v)).collect() }.save(&lpath)
    };
    train_decoder(&ds, &tc, |s, d, z| {
        log::info!("epoch {} train {:.5} val {:.5} ({:.0} s)", s.epoch, s.train_l1, s.val_l1, s.seconds);
        writeln!(loss, "{},{},{},{},{},{:.3}", s.epoch, s.train_l1, s.val_l1, s.weight_lr, s.latent_lr, s.seconds)
            .and_then(|_| loss.flush())
            .map_err(nbrdf_core::Error::from)?;
        save(d, z)
    })?;
    let mut m = Manifest::default();
    m.input(&dataset);
    for p in [&wpath, &lpath, &csv] {
        m.output(p);
    }
    manifest_for_dir(&m, cfg, &out)
}

/// Loads a latent file and checks it belongs to `decoder`.
fn load_latents(path: &Path, decoder: Option<&Decoder>) -> Result<LatentFile, CliError> {
    let f = LatentFile::load(path)?;
    if let Some(d) = decoder {
        if f.decoder != 0 && f.decoder != d.fingerprint() {
            return Err(CliError::Config(format!("{} was produced by a different decoder", path.display())));
        }
    }
    Ok(f)
}

/// One mono latent per dataset record, optionally refined by projection
/// under the frozen decoder, for the records in `needed`.
fn record_latents(ds: &Dataset, decoder: &Decoder, latents: &LatentFile, needed: &[usize], steps: usize, lr: f64, seed: u64) -> Result<Vec<Option<LatentVector>>, CliError> {
    if latents.entries.len() != ds.records.len() {
        return Err(CliError::Config(format!("{} latents for {} records", latents.entries.len(), ds.records.len())));
    }
    let grid = ds.grid();
    let refined: Vec<Result<(usize, LatentVector), CliError>> = needed
        .par_iter()
        .map(|&r| {
            let z = *latents.entries[r].channel(0);
            if steps == 0 {
                return Ok((r, z));
            }
            let target = GridTarget::new(grid, &ds.records[r].values);
            let pc = ProjectConfig { lr, lr_final: lr, max_steps: steps, seed: seed ^ r as u64, init: Some(z), min_rel_improvement: 0.0, ..ProjectConfig::default() };
            Ok((r, project_channel(decoder, &target, &pc)?.latent))
        })
        .collect();
    let mut out = vec![None; ds.records.len()];
    for item in refined {
        let (r, z) = item?;
        out[r] = Some(z);
    }
    Ok(out)
}

fn refs(p: &BrdfParams) -> Option<(usize, usize, f64, f64)> {
    match p {
        BrdfParams::Layered { stack, top_ref: Some(t), bottom_ref: Some(b) } => Some((*t as usize, *b as usize, stack.medium.albedo, stack.medium.sigma_t)),
        _ => None,
    }
}

pub fn train_layering_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (dpath, wpath, lpath, out) = (cfg.path("dataset")?, cfg.path("decoder")?, cfg.path("latents")?, cfg.path("out_dir")?);
    let ds = Dataset::load(&dpath)?;
    let decoder = Decoder::load(&wpath)?;
    let latents = load_latents(&lpath, Some(&decoder))?;
    let seed: u64 = cfg.get("seed")?;
    let tc = LayeringTrainConfig {
        epochs: cfg.get("epochs")?,
        lr: cfg.get("lr")?,
        lr_decay: cfg.get("lr_decay")?,
        decay_every: cfg.get("decay_every")?,
        batch_size: cfg.get("batch_size")?,
        seed,
    };
    let mut needed = Vec::new();
    for (i, r) in ds.records.iter().enumerate() {
        if let Some((t, b, _, _)) = refs(&r.params) {
            needed.extend([i, t, b]);
        }
    }
    needed.sort_unstable();
    needed.dedup();
    let t0 = Instant::now();
    let z = record_latents(&ds, &decoder, &latents, &needed, cfg.get("refine_steps")?, cfg.get("refine_lr")?, seed)?;
    log::info!("{} record latents ready in {:.0} s", needed.len(), t0.elapsed().as_secs_f64());

    let fp = decoder.fingerprint();
    let mut sets: [TripleFile; 4] = std::array::from_fn(|_| TripleFile { decoder: fp, triples: Vec::new() });
    for (i, r) in ds.records.iter().enumerate() {
        let Some((t, b, albedo, sigma_t)) = refs(&r.params) else { continue };
        let triple = LayerTriple { top: z[t].unwrap(), bottom: z[b].unwrap(), albedo: albedo as f32, sigma_t: sigma_t as f32, target: z[i].unwrap() };
        let k = usize::from(r.kind() == BrdfKind::ThreeLayer) * 2 + usize::from(r.split == Split::Validation);
        sets[k].triples.push(triple);
    }
    create_dir(&out)?;
    let names = ["triples_train.nbl3", "triples_val.nbl3", "triples3_train.nbl3", "triples3_val.nbl3"];
    let mut m = Manifest::default();
    for p in [&dpath, &wpath, &lpath] {
        m.input(p);
    }
    for (set, name) in sets.iter().zip(names) {
        set.save(&out.join(name))?;
        m.output(out.join(name));
    }
    let csv = out.join("loss.csv");
    let mut loss = BufWriter::new(File::create(&csv)?);
    writeln!(loss, "stage,epoch,lr,train_l1,val_l1,seconds")?;
    let mut log_epoch = |stage: &str, e: &nbrdf_neural::layering::LayeringEpoch| -> Result<(), nbrdf_neural::Error> {
        log::info!("{stage} epoch {} train {:.5} val {:.5}", e.epoch, e.train_l1, e.val_l1);
        writeln!(loss, "{stage},{},{},{},{},{:.3}", e.epoch, e.lr, e.train_l1, e.val_l1, e.seconds)
            .and_then(|_| loss.flush())
            .map_err(|e| nbrdf_core::Error::from(e).into())
    };
    let val = (!sets[1].triples.is_empty()).then_some(&sets[1]);
    let (mut net, _) = train_layering(&sets[0], val, None, &tc, |e, _| log_epoch("two_layer", e))?;
    let base = out.join("layering_two_layer.nbw");
    net.save(&base)?;
    m.output(&base);
    if cfg.get::<bool>("fine_tune")? && !sets[2].triples.is_empty() {
        let val3 = (!sets[3].triples.is_empty()).then_some(&sets[3]);
        net = train_layering(&sets[2], val3, Some(net), &tc.fine_tune(), |e, _| log_epoch("three_layer", e))?.0;
    }
    drop(log_epoch);
    let final_path = out.join("layering.nbw");
    net.save(&final_path)?;
    m.output(&final_path);
    m.output(&csv);
    manifest_for_dir(&m, cfg, &out)
}

pub fn train_sampler_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (dpath, lpath, out) = (cfg.path("dataset")?, cfg.path("latents")?, cfg.path("out_dir")?);
    let ds = Dataset::load(&dpath)?;
    let latents = load_latents(&lpath, None)?;
    if latents.entries.len() != ds.records.len() {
        return Err(CliError::Config(format!("{} latents for {} records", latents.entries.len(), ds.records.len())));
    }
    let res: usize = cfg.get("gndf_resolution")?;
    let side: usize = cfg.get("gndf_wi")?;
    let gc = GndfConfig { resolution: res, wi_theta: side, wi_phi: side };
    let train = ds.indices(|r| r.split == Split::Train);
    let t0 = Instant::now();
    let items = train
        .iter()
        .map(|&r| {
            let table = TabulatedBrdf::new(ds.grid(), ds.records[r].values.clone())?;
            let g = compute_gndf(&|wi, wo| table.eval(wi, wo), &gc)?;
            Ok((*latents.entries[r].channel(0), g))
        })
        .collect::<Result<Vec<_>, nbrdf_neural::Error>>()?;
    log::info!("{} GNDFs in {:.0} s", items.len(), t0.elapsed().as_secs_f64());
    let sc = SamplerTrainConfig {
        epochs: cfg.get("epochs")?,
        lr: cfg.get("lr")?,
        lr_decay: cfg.get("lr_decay")?,
        decay_every: cfg.get("decay_every")?,
        wi_side: cfg.get("wi_side")?,
        seed: cfg.get("seed")?,
    };
    create_dir(&out)?;
    let (wpath, csv) = (out.join("sampler.nbw"), out.join("loss.csv"));
    let mut loss = BufWriter::new(File::create(&csv)?);
    writeln!(loss, "epoch,lr,kld,seconds")?;
    let (net, _) = train_sampler(&items, &sc, |e, net| {
        log::info!("epoch {} kld {:.5}", e.epoch, e.kld);
        writeln!(loss, "{},{},{},{:.3}", e.epoch, e.lr, e.kld, e.seconds)
            .and_then(|_| loss.flush())
            .map_err(nbrdf_core::Error::from)?;
        net.save(&wpath)
    })?;
    net.save(&wpath)?;
    let mut m = Manifest::default();
    m.input(&dpath);
    m.input(&lpath);
    m.output(&wpath);
    m.output(&csv);
    manifest_for_dir(&m, cfg, &out)
}

fn parse_target_args(spec: &str, n: usize) -> Result<Vec<f64>, CliError> {
    let v: Vec<f64> = spec.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|_| CliError::Config(format!("bad target parameters `{spec}`")))?;
    if v.len() != n {
        return Err(CliError::Config(format!("target needs {n} parameters, got `{spec}`")));
    }
    Ok(v)
}

pub fn project(cfg: &RunConfig) -> Result<(), CliError> {
    let wpath = cfg.path("decoder")?;
    let decoder = Decoder::load(&wpath)?;
    let channels: usize = cfg.get("channels")?;
    let pc = ProjectConfig {
        lr: cfg.get("lr")?,
        lr_final: cfg.get("lr_final")?,
        max_steps: cfg.get("max_steps")?,
        batch_size: cfg.get("batch_size")?,
        window: cfg.get("window")?,
        min_rel_improvement: cfg.get("min_rel_improvement")?,
        seed: cfg.get("seed")?,
        init: None,
    };
    let target = cfg.str("target");
    let (kind, args) = target.split_once(':').ok_or_else(|| CliError::Config(format!("target `{target}` lacks a kind prefix")))?;
    let mut m = Manifest::default();
    m.input(&wpath);
    let latent = match kind {
        "conductor" => {
            let a = parse_target_args(args, 2)?;
            let p = ConductorParams { alpha: a[0], r0: a[1] };
            let t = FnTarget(move |wi, wo| eval_conductor(&p, wi, wo));
            project_brdf(&decoder, &vec![&t as &dyn ProjectionTarget; channels], &pc)?
        }
        "dielectric" => {
            let a = parse_target_args(args, 2)?;
            let p = DielectricParams { alpha: a[0], eta: a[1] };
            let t = FnTarget(move |wi, wo| eval_dielectric_reflect(&p, wi, wo));
            project_brdf(&decoder, &vec![&t as &dyn ProjectionTarget; channels], &pc)?
        }
        "lambert" => {
            let a = parse_target_args(args, 1)?;
            let t = FnTarget(move |_: Direction, _: Direction| a[0] / std::f64::consts::PI);
            project_brdf(&decoder, &vec![&t as &dyn ProjectionTarget; channels], &pc)?
        }
        "record" => {
            let index: usize = args.trim().parse().map_err(|_| CliError::Config(format!("bad record index `{args}`")))?;
            let dpath = cfg.path("dataset")?;
            let ds = Dataset::load(&dpath)?;
            m.input(&dpath);
            let rec = ds.records.get(index).ok_or_else(|| CliError::Config(format!("record {index} out of range")))?;
            let t = GridTarget::new(ds.grid(), &rec.values);
            project_brdf(&decoder, &vec![&t as &dyn ProjectionTarget; channels], &pc)?
        }
        other => return Err(CliError::Config(format!("unknown target kind `{other}`"))),
    };
    let out = cfg.path("out")?;
    LatentFile { decoder: decoder.fingerprint(), entries: vec![latent] }.save(&out)?;
    m.output(&out);
    m.write(cfg, &beside(&out))
}

fn single_latent(path: &Path) -> Result<(LatentBrdf, u64), CliError> {
    let f = LatentFile::load(path)?;
    let n = f.entries.len();
    let entry = f.entries.into_iter().next().ok_or_else(|| CliError::Format(format!("{} holds no latents", path.display())))?;
    if n > 1 {
        log::warn!("{} holds {n} latents; using the first", path.display());
    }
    Ok((entry, f.decoder))
}

pub fn layer_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let (npath, tpath, bpath, out) = (cfg.path("layering")?, cfg.path("top")?, cfg.path("bottom")?, cfg.path("out")?);
    let net = LayeringNet::load(&npath)?;
    let (top, dt) = single_latent(&tpath)?;
    let (bottom, db) = single_latent(&bpath)?;
    if dt != 0 && db != 0 && dt != db {
        return Err(CliError::Config("top and bottom latents come from different decoders".into()));
    }
    let albedo: Vec<f64> = cfg.list("albedo")?;
    let z = layer(&net, &top, &bottom, &albedo, cfg.get("sigma_t")?)?;
    LatentFile { decoder: dt.max(db), entries: vec![z] }.save(&out)?;
    let mut m = Manifest::default();
    for p in [&npath, &tpath, &bpath] {
        m.input(p);
    }
    m.output(&out);
    m.write(cfg, &beside(&out))
}

pub fn fit_sampler(cfg: &RunConfig) -> Result<(), CliError> {
    let (spath, lpath) = (cfg.path("sampler")?, cfg.path("latent")?);
    let net = SamplerNet::load(&spath, cfg.get("wi_side")?)?;
    let latents = LatentFile::load(&lpath)?;
    let cache = match cfg.opt_path("cache") {
        Some(p) if p.exists() => ProxyCache::load(&p)?,
        _ => ProxyCache::default(),
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "index,sigma,w")?;
    for (i, z) in latents.entries.iter().enumerate() {
        let p = cache.get(&net, z);
        debug_assert_eq!(p, fit_params(&net, z));
        writeln!(stdout, "{i},{},{}", p.sigma, p.w)?;
    }
    let mut m = Manifest::default();
    m.input(&spath);
    m.input(&lpath);
    if let Some(p) = cfg.opt_path("cache") {
        cache.save(&p)?;
        m.output(&p);
        m.write(cfg, &beside(&p))?;
    } else {
        eprint!("{}", m.render(cfg)?);
    }
    Ok(())
}

fn parse_filter(s: &str) -> Result<Filter, CliError> {
    match s.split_once(':') {
        None if s == "box" => Ok(Filter::Box),
        None if s == "gaussian" => Ok(Filter::Gaussian(0.5)),
        Some(("gaussian", sigma)) => sigma.parse().map(Filter::Gaussian).map_err(|_| CliError::Config(format!("bad filter `{s}`"))),
        _ => Err(CliError::Config(format!("unknown filter `{s}`"))),
    }
}

fn write_outputs(img: &ImageBuffer, cfg: &RunConfig, m: &mut Manifest) -> Result<PathBuf, CliError> {
    let out = cfg.path("out")?;
    img.write_pfm(&out)?;
    m.output(&out);
    if let Some(png) = cfg.opt_path("png") {
        img.write_png(&png, cfg.get("exposure")?)?;
        m.output(&png);
    }
    Ok(out)
}

pub fn render_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let strategy: Strategy = cfg.str("strategy").parse().map_err(|_| CliError::Config(format!("unknown strategy `{}`", cfg.str("strategy"))))?;
    let mut opts = RenderOptions::new(cfg.get("spp")?, strategy, cfg.get("seed")?);
    let batch: usize = cfg.get("batch_size")?;
    opts.batch_size = (batch > 0).then_some(batch);
    opts.filter = parse_filter(cfg.str("filter"))?;
    opts.audit = cfg.get("audit")?;
    let spath = cfg.path("scene")?;
    let scene = Scene::load(&spath)?;
    let t0 = Instant::now();
    let r = render(&scene, &opts)?;
    let (var, se) = r.mean_variance();
    log::info!("rendered in {:.1} s, {} neural queries, mean luminance variance {var:.4e} +- {se:.1e}", t0.elapsed().as_secs_f64(), r.queries);
    if opts.audit {
        println!("pdf_mismatches {}", r.pdf_mismatches);
    }
    let mut m = Manifest::default();
    m.input(&spath);
    let out = write_outputs(&r.image, cfg, &mut m)?;
    m.write(cfg, &beside(&out))
}

pub fn lobe(cfg: &RunConfig) -> Result<(), CliError> {
    let wi = spherical_to_dir(cfg.get::<f64>("theta_i")?.to_radians(), cfg.get::<f64>("phi_i")?.to_radians());
    let res: usize = cfg.get("resolution")?;
    let mut m = Manifest::default();
    let img = match (cfg.opt_path("latent"), cfg.opt_path("dataset")) {
        (Some(lpath), None) => {
            let dpath = cfg.path("decoder")?;
            let decoder = Decoder::load(&dpath)?;
            let f = load_latents(&lpath, Some(&decoder))?;
            let index: usize = cfg.get("index")?;
            let latent = f.entries.get(index).cloned().ok_or_else(|| CliError::Config(format!("latent index {index} out of range")))?;
            m.input(&dpath);
            m.input(&lpath);
            render_lobe(&Material::Latent { decoder: 0, latent, sampling: NeuralSampling::Cosine }, &[&decoder], wi, res)?
        }
        (None, Some(dpath)) => {
            let ds = Dataset::load(&dpath)?;
            let index: usize = cfg.get("record")?;
            let rec = ds.records.get(index).ok_or_else(|| CliError::Config(format!("record {index} out of range")))?;
            m.input(&dpath);
            let table = Arc::new(TabulatedBrdf::new(ds.grid(), rec.values.clone())?);
            render_lobe(&Material::Tabulated { table, tint: [1.0; 3] }, &[], wi, res)?
        }
        _ => return Err(CliError::Config("give exactly one of --latent or --dataset".into())),
    };
    let out = write_outputs(&img, cfg, &mut m)?;
    m.write(cfg, &beside(&out))
}

pub fn compare(cfg: &RunConfig) -> Result<(), CliError> {
    let (a, b) = (cfg.path("a")?, cfg.path("b")?);
    let metrics = image_metrics(&ImageBuffer::read_pfm(&a)?, &ImageBuffer::read_pfm(&b)?)?;
    println!("mse {:.6e}", metrics.mse);
    println!("relative_l1 {:.6e}", metrics.relative_l1);
    let mut m = Manifest::default();
    m.input(&a);
    m.input(&b);
    eprint!("{}", m.render(cfg)?);
    Ok(())
}
