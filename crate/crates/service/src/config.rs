use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use dtraj_core::{Engine, Vocabulary, WeightsArchive};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_SAMPLES: usize = 1000;
pub const DEFAULT_MAX_BODY_BYTES: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub model_path: PathBuf,
    pub vocab_path: PathBuf,
    pub bind_address: SocketAddr,
    /// Binding to a non-loopback address must be requested explicitly.
    pub allow_remote: bool,
    pub max_samples_per_request: usize,
    pub max_body_bytes: usize,
    /// Threads available for Monte Carlo work across all requests.
    pub workers: usize,
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.bind_address.ip().is_loopback() && !self.allow_remote {
            bail!(
                "refusing to bind non-loopback address {} without --allow-remote",
                self.bind_address
            );
        }
        if self.max_samples_per_request == 0 || self.max_body_bytes == 0 || self.workers == 0 {
            bail!("limits and worker count must be positive");
        }
        Ok(())
    }
}

pub fn load_archive(path: &Path) -> Result<WeightsArchive> {
    let f = File::open(path).with_context(|| format!("opening model {}", path.display()))?;
    WeightsArchive::load(BufReader::new(f))
        .with_context(|| format!("loading model {}", path.display()))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let f = File::open(path).with_context(|| format!("opening vocabulary {}", path.display()))?;
    Vocabulary::load(BufReader::new(f))
        .with_context(|| format!("loading vocabulary {}", path.display()))
}

pub fn load_engine(model: &Path, vocab: &Path) -> Result<Engine> {
    let archive = load_archive(model)?;
    let vocab = load_vocab(vocab)?;
    Ok(Engine::new(&archive, vocab)?)
}
