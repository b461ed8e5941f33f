//! Run configuration: defaults, presets, `key = value` files and flags.
//!
//! Every subcommand has a fixed schema. A run resolves each key from, in
//! increasing priority: the schema default, the preset override, the config
//! file, and finally an explicit command-line flag.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::CliError;

#[derive(Debug, Clone, Copy)]
pub struct Opt {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

#[derive(Debug, Clone, Copy)]
pub struct CommandSpec {
    /// Space-separated path, e.g. `train decoder`.
    pub name: &'static str,
    pub about: &'static str,
    pub opts: &'static [Opt],
    /// Defaults replaced when `preset = paper`.
    pub full_scale: &'static [(&'static str, &'static str)],
}

const fn opt(key: &'static str, default: &'static str, help: &'static str) -> Opt {
    Opt { key, default, help }
}

/// Keys shared by every subcommand.
pub const COMMON: &[Opt] = &[opt("threads", "0", "worker threads; 0 uses every logical core")];

pub const GEN_DATASET: CommandSpec = CommandSpec {
    name: "gen-dataset",
    about: "Tabulate analytic and layered BRDFs into a dataset file",
    opts: &[
        opt("preset", "desk", "scale preset: desk or paper"),
        opt("out", "dataset.nbds", "output dataset file"),
        opt("seed", "1", "master seed"),
        opt("counts", "50,50,400,60", "records per kind: conductor,dielectric,two-layer,three-layer"),
        opt("grid", "12,24", "tabulation grid: theta strata,phi strata"),
        opt("paths_per_pair", "512", "Monte Carlo paths per direction pair for layered records"),
        opt("validation_fraction", "0.1", "fraction of each kind held out"),
    ],
    full_scale: &[("counts", "300,300,12720,1800"), ("grid", "25,25")],
};

pub const TRAIN_DECODER: CommandSpec = CommandSpec {
    name: "train decoder",
    about: "Jointly train the decoder and one latent per record",
    opts: &[
        opt("preset", "desk", "scale preset: desk or paper"),
        opt("dataset", "dataset.nbds", "input dataset"),
        opt("out_dir", "decoder", "output directory"),
        opt("epochs", "10", "training epochs"),
        opt("samples_per_epoch", "2000000", "direction-pair samples per epoch; 0 uses every pair"),
        opt("batch_size", "1024", "samples per optimizer step"),
        opt("weight_lr", "3e-4", "initial network learning rate"),
        opt("latent_lr", "1e-4", "initial latent learning rate"),
        opt("lr_decay", "0.9", "multiplicative learning-rate decay per epoch"),
        opt("validation_batch", "128", "validation samples per step for latent-only fitting"),
        opt("seed", "1", "seed for initialization and shuffling"),
    ],
    full_scale: &[("epochs", "50"), ("samples_per_epoch", "0"), ("batch_size", "4096"), ("validation_batch", "512")],
};

pub const TRAIN_LAYERING: CommandSpec = CommandSpec {
    name: "train layering",
    about: "Train the latent-space layering network on projected triples",
    opts: &[
        opt("preset", "desk", "scale preset: desk or paper"),
        opt("dataset", "dataset.nbds", "dataset the decoder was trained on"),
        opt("decoder", "decoder/decoder.nbw", "trained decoder weights"),
        opt("latents", "decoder/latents.nblv", "per-record latents from decoder training"),
        opt("out_dir", "layering", "output directory"),
        opt("refine_steps", "0", "projection steps refining each record latent under the final decoder"),
        opt("refine_lr", "1e-4", "learning rate of the refinement projection"),
        opt("epochs", "200", "training epochs"),
        opt("lr", "3e-3", "initial learning rate"),
        opt("lr_decay", "0.7", "learning-rate decay factor"),
        opt("decay_every", "10", "epochs between decays"),
        opt("batch_size", "64", "triples per step"),
        opt("fine_tune", "true", "fine-tune on three-layer triples after the main run"),
        opt("seed", "1", "seed for initialization and shuffling"),
    ],
    full_scale: &[("epochs", "1000"), ("decay_every", "50"), ("refine_steps", "2000")],
};

pub const TRAIN_SAMPLER: CommandSpec = CommandSpec {
    name: "train sampler",
    about: "Train the proxy-parameter network on GNDFs of the training BRDFs",
    opts: &[
        opt("preset", "desk", "scale preset: desk or paper"),
        opt("dataset", "dataset.nbds", "dataset the decoder was trained on"),
        opt("latents", "decoder/latents.nblv", "per-record latents from decoder training"),
        opt("out_dir", "sampler", "output directory"),
        opt("gndf_resolution", "40", "GNDF bins per side"),
        opt("gndf_wi", "20", "incoming directions per side averaged into each GNDF"),
        opt("epochs", "10", "training epochs"),
        opt("lr", "3e-5", "initial learning rate"),
        opt("lr_decay", "0.7", "learning-rate decay factor"),
        opt("decay_every", "3", "epochs between decays"),
        opt("wi_side", "20", "incoming directions per side queried per latent"),
        opt("seed", "1", "seed for initialization and shuffling"),
    ],
    full_scale: &[("wi_side", "40"), ("gndf_wi", "40")],
};

pub const PROJECT: CommandSpec = CommandSpec {
    name: "project",
    about: "Fit a latent to a BRDF with the decoder frozen",
    opts: &[
        opt("decoder", "decoder/decoder.nbw", "decoder weights"),
        opt("target", "conductor:0.3,0.9", "conductor:ALPHA,R0 | dielectric:ALPHA,ETA | lambert:ALBEDO | record:INDEX"),
        opt("dataset", "", "dataset for record targets"),
        opt("channels", "1", "latent channels (1 or 3); analytic targets repeat per channel"),
        opt("out", "projected.nblv", "output latent file"),
        opt("lr", "1e-4", "initial learning rate"),
        opt("lr_final", "1e-4", "final learning rate, reached geometrically at max-steps"),
        opt("max_steps", "2000", "step budget"),
        opt("batch_size", "256", "direction pairs per step"),
        opt("window", "50", "steps per convergence window"),
        opt("min_rel_improvement", "1e-4", "stop when a window improves the mean loss by less than this fraction"),
        opt("seed", "1", "sampling seed"),
    ],
    full_scale: &[],
};

pub const LAYER: CommandSpec = CommandSpec {
    name: "layer",
    about: "Combine a top and a bottom latent through a medium",
    opts: &[
        opt("layering", "layering/layering.nbw", "layering network weights"),
        opt("top", "top.nblv", "top interface latent"),
        opt("bottom", "bottom.nblv", "bottom latent"),
        opt("albedo", "0.9", "medium albedo, one value or one per channel"),
        opt("sigma_t", "1", "medium extinction"),
        opt("out", "layered.nblv", "output latent file"),
    ],
    full_scale: &[],
};

pub const FIT_SAMPLER: CommandSpec = CommandSpec {
    name: "fit-sampler",
    about: "Predict proxy sampling parameters for latents",
    opts: &[
        opt("sampler", "sampler/sampler.nbw", "sampler network weights"),
        opt("wi_side", "20", "incoming directions per side the network was trained with"),
        opt("latent", "latent.nblv", "latent file; every entry is fitted"),
        opt("cache", "", "proxy cache file to create or extend"),
    ],
    full_scale: &[],
};

pub const RENDER: CommandSpec = CommandSpec {
    name: "render",
    about: "Path trace a scene file",
    opts: &[
        opt("scene", "scene.txt", "scene description"),
        opt("spp", "64", "samples per pixel"),
        opt("strategy", "mis", "light, brdf or mis"),
        opt("seed", "1", "sampling seed"),
        opt("batch_size", "16384", "queries per neural flush; 0 evaluates each query alone"),
        opt("filter", "box", "box, or gaussian:SIGMA with SIGMA in pixels"),
        opt("audit", "false", "count sampler pdf mismatches"),
        opt("out", "render.pfm", "radiance output"),
        opt("png", "", "optional tonemapped PNG"),
        opt("exposure", "0", "PNG exposure in stops"),
    ],
    full_scale: &[],
};

pub const LOBE: CommandSpec = CommandSpec {
    name: "lobe",
    about: "Image of f(wi, wo) cos(theta_o) over the outgoing hemisphere",
    opts: &[
        opt("decoder", "", "decoder weights for latent lobes"),
        opt("latent", "", "latent file"),
        opt("index", "0", "entry in the latent file"),
        opt("dataset", "", "dataset for tabulated lobes"),
        opt("record", "0", "dataset record"),
        opt("theta_i", "0", "incoming elevation in degrees"),
        opt("phi_i", "0", "incoming azimuth in degrees"),
        opt("resolution", "128", "image side"),
        opt("out", "lobe.pfm", "radiance output"),
        opt("png", "", "optional tonemapped PNG"),
        opt("exposure", "0", "PNG exposure in stops"),
    ],
    full_scale: &[],
};

pub const COMPARE: CommandSpec = CommandSpec {
    name: "compare",
    about: "Print MSE and relative L1 between two PFM images",
    opts: &[opt("a", "", "test image"), opt("b", "", "reference image")],
    full_scale: &[],
};

pub const ALL: &[CommandSpec] = &[GEN_DATASET, TRAIN_DECODER, TRAIN_LAYERING, TRAIN_SAMPLER, PROJECT, LAYER, FIT_SAMPLER, RENDER, LOBE, COMPARE];

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn spec_args(spec: &CommandSpec) -> Vec<Arg> {
    let mut args: Vec<Arg> = spec
        .opts
        .iter()
        .chain(COMMON)
        .map(|o| {
            let a = Arg::new(o.key).long(flag_name(o.key)).action(ArgAction::Set);
            if o.default.is_empty() {
                a.help(format!("{} [default: none]", o.help))
            } else {
                a.help(o.help).default_value(o.default)
            }
        })
        .collect();
    args.push(Arg::new("config").long("config").help("key = value file applied before flags").action(ArgAction::Set));
    args.push(Arg::new("print_config").long("print-config").help("print the resolved configuration and exit").action(ArgAction::SetTrue));
    args
}

/// The clap command tree generated from the schemas.
pub fn cli() -> Command {
    let mut root = Command::new("nbrdf")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Neural BRDF datasets, training, latent operators and rendering")
        .subcommand_required(true)
        .arg_required_else_help(true);
    let mut train = Command::new("train").about("Train one of the networks").subcommand_required(true);
    for spec in ALL {
        let mut c = Command::new(spec.name.rsplit(' ').next().unwrap()).about(spec.about).args(spec_args(spec));
        if spec.name == "compare" {
            c = c.mut_arg("a", |a| a.index(1)).mut_arg("b", |a| a.index(2));
        }
        if spec.name.starts_with("train ") {
            train = train.subcommand(c);
        } else {
            root = root.subcommand(c);
        }
    }
    root.subcommand(train)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: &'static str,
    pub values: BTreeMap<String, String>,
}

/// Parses a `key = value` file; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config(format!("config line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults(spec: &CommandSpec) -> Self {
        let values = spec.opts.iter().chain(COMMON).map(|o| (o.key.to_owned(), o.default.to_owned())).collect();
        Self { command: spec.name, values }
    }

    /// Resolves a subcommand's matches against its schema.
    pub fn from_matches(spec: &CommandSpec, m: &ArgMatches) -> Result<Self, CliError> {
        let mut cfg = Self::defaults(spec);
        let mut file = Vec::new();
        if let Some(path) = m.get_one::<String>("config") {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
            file = parse_config_text(&text)?;
            for (k, _) in &file {
                if !cfg.values.contains_key(k) {
                    return Err(CliError::Config(format!("unknown key `{k}` in {path}")));
                }
            }
        }
        let explicit = |k: &str| m.value_source(k) == Some(ValueSource::CommandLine);
        let preset = if explicit("preset") {
            m.get_one::<String>("preset").cloned()
        } else {
            file.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.clone())
        };
        if let Some(p) = preset {
            cfg.apply_preset(spec, &p)?;
        }
        for (k, v) in file {
            cfg.values.insert(k, v);
        }
        for o in spec.opts.iter().chain(COMMON) {
            if explicit(o.key) {
                cfg.values.insert(o.key.to_owned(), m.get_one::<String>(o.key).unwrap().clone());
            }
        }
        Ok(cfg)
    }

    pub fn apply_preset(&mut self, spec: &CommandSpec, preset: &str) -> Result<(), CliError> {
        match preset {
            "desk" => {}
            "paper" => {
                for (k, v) in spec.full_scale {
                    self.values.insert((*k).to_owned(), (*v).to_owned());
                }
            }
            other => return Err(CliError::Config(format!("unknown preset `{other}` (desk, paper)"))),
        }
        self.values.insert("preset".into(), preset.to_owned());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        assert!(self.values.contains_key(key), "unknown key {key}");
        self.values.insert(key.to_owned(), value.to_string());
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} is not in the schema"))
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.str(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.opt_path(key).ok_or_else(|| CliError::Config(format!("`{}` is required", flag_name(key))))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.str(key);
        v.parse().map_err(|_| CliError::Config(format!("invalid value `{v}` for `{}`", flag_name(key))))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.str(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("invalid list `{}` for `{}`", self.str(key), flag_name(key)))))
            .collect()
    }

    /// `key = value` lines in schema order, loadable with `--config`.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn spec_by_name(name: &str) -> Option<&'static CommandSpec> {
    ALL.iter().find(|s| s.name == name)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    parse_config_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schemas_are_consistent() {
        cli().debug_assert();
        for spec in ALL {
            for (k, _) in spec.full_scale {
                assert!(spec.opts.iter().any(|o| o.key == *k), "{} paper key {k}", spec.name);
            }
            let mut keys: Vec<_> = spec.opts.iter().map(|o| o.key).collect();
            keys.sort();
            keys.dedup();
            assert_eq!(keys.len(), spec.opts.len(), "{}", spec.name);
        }
    }

    #[test]
    fn precedence_is_default_preset_file_flag() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        std::fs::write(&file, "# comment\npreset = paper\nbatch_size = 77\n").unwrap();
        let m = cli().get_matches_from(["nbrdf", "train", "decoder", "--config", file.to_str().unwrap(), "--epochs", "3"]);
        let (_, sub) = m.subcommand().unwrap();
        let (_, sub) = sub.subcommand().unwrap();
        let cfg = RunConfig::from_matches(&TRAIN_DECODER, sub).unwrap();
        assert_eq!(cfg.str("epochs"), "3");
        assert_eq!(cfg.str("batch_size"), "77");
        assert_eq!(cfg.str("validation_batch"), "512");
        assert_eq!(cfg.str("weight_lr"), "3e-4");
        std::fs::write(&file, "bogus = 1\n").unwrap();
        let m = cli().get_matches_from(["nbrdf", "render", "--config", file.to_str().unwrap()]);
        let (_, sub) = m.subcommand().unwrap();
        assert!(matches!(RunConfig::from_matches(&RENDER, sub), Err(CliError::Config(_))));
    }

    #[test]
    fn printed_config_round_trips() {
        let mut cfg = RunConfig::defaults(&RENDER);
        cfg.set("spp", 9);
        let parsed = parse_config_text(&cfg.to_text()).unwrap();
        assert_eq!(parsed.len(), cfg.values.len());
        assert!(parsed.contains(&("spp".into(), "9".into())));
    }
}
