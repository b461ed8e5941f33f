//! Run manifests.
//!
//! A manifest is a config file: the resolved `key = value` lines of the run,
//! preceded by `#` lines naming the command, the version and the sha256 of
//! every input and output. Passing it back with `--config` repeats the run.

use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Default)]
pub struct Manifest {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn render(&self, cfg: &RunConfig) -> Result<String, CliError> {
        let mut s = String::from("# nbrdf run manifest\n");
        s += &format!("# command: {}\n# version: {}\n", cfg.command, env!("CARGO_PKG_VERSION"));
        for (tag, list) in [("input", &self.inputs), ("output", &self.outputs)] {
            for p in list {
                s += &format!("# {tag} {} sha256 {}\n", p.display(), sha256_file(p)?);
            }
        }
        s += &cfg.to_text();
        Ok(s)
    }

    pub fn write(&self, cfg: &RunConfig, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.render(cfg)?)?;
        log::info!("manifest written to {}", path.display());
        Ok(())
    }
}

/// `<file>.manifest` next to a single output file.
pub fn beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}
