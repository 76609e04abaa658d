//! Run configuration: built-in defaults, then a TOML file with `[model]`,
//! `[train]` and `[paths]` tables, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use ddxt_core::model::ModelConfig;
use ddxt_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESOLVED_FILE: &str = "config.resolved.toml";

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_enc_layers: Option<usize>,
    #[arg(long)]
    pub n_dec_layers: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long)]
    pub max_enc_len: Option<usize>,
    #[arg(long)]
    pub max_dec_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<u32>,
    #[arg(long, env = "DDXT_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Training CSV or preprocessed cache.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub vocab_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

/// One layer of settings; unset fields fall through to the layer below.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Layer {
    #[command(flatten)]
    pub model: ModelSection,
    #[command(flatten)]
    pub train: TrainSection,
    #[command(flatten)]
    pub paths: PathsSection,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )+
    };
}

impl Layer {
    pub fn from_toml(path: &Path) -> Result<Layer> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `self` with every value set in `top` replaced.
    pub fn under(mut self, top: &Layer) -> Layer {
        overlay!(self.model, top.model, d_model, n_heads, n_enc_layers, n_dec_layers, ffn_mult, max_enc_len, max_dec_len, dropout);
        overlay!(self.train, top.train, epochs, batch_size, lr0, gamma, eval_every, seed);
        overlay!(self.paths, top.paths, train, val, test, vocab_dir, checkpoint_dir, report_dir);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

/// Fully resolved settings. Vocabulary sizes in `model` are filled in from
/// the vocabulary files when a command loads them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Defaults, then the optional config file, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Layer) -> Result<RunConfig> {
        let base = match file {
            Some(p) => Layer::from_toml(p)?,
            None => Layer::default(),
        };
        let l = base.under(flags);
        let dm = ModelConfig::default();
        let dt = TrainConfig::default();
        let m = &l.model;
        let t = &l.train;
        let p = l.paths;
        let cfg = RunConfig {
            model: ModelConfig {
                d_model: m.d_model.unwrap_or(dm.d_model),
                n_heads: m.n_heads.unwrap_or(dm.n_heads),
                n_enc_layers: m.n_enc_layers.unwrap_or(dm.n_enc_layers),
                n_dec_layers: m.n_dec_layers.unwrap_or(dm.n_dec_layers),
                ffn_mult: m.ffn_mult.unwrap_or(dm.ffn_mult),
                max_enc_len: m.max_enc_len.unwrap_or(dm.max_enc_len),
                max_dec_len: m.max_dec_len.unwrap_or(dm.max_dec_len),
                dropout: m.dropout.unwrap_or(dm.dropout),
                ..dm
            },
            train: TrainConfig {
                epochs: t.epochs.unwrap_or(dt.epochs),
                batch_size: t.batch_size.unwrap_or(dt.batch_size),
                lr0: t.lr0.unwrap_or(dt.lr0),
                gamma: t.gamma.unwrap_or(dt.gamma),
                eval_every: t.eval_every.unwrap_or(dt.eval_every),
                seed: t.seed.unwrap_or(dt.seed),
            },
            paths: Paths {
                train: p.train,
                val: p.val,
                test: p.test,
                vocab_dir: p.vocab_dir.unwrap_or_else(|| "vocab".into()),
                checkpoint_dir: p.checkpoint_dir.unwrap_or_else(|| "checkpoints".into()),
                report_dir: p.report_dir.unwrap_or_else(|| "report".into()),
            },
        };
        cfg.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if cfg.train.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_flags_and_file_layering() {
        let cfg = RunConfig::resolve(None, &Layer::default()).unwrap();
        assert_eq!(cfg.model.d_model, 128);
        assert_eq!(cfg.model.n_heads, 4);
        assert_eq!(cfg.model.n_enc_layers, 6);
        assert_eq!(cfg.model.dropout, 0.1);
        assert_eq!(cfg.train.lr0, 1e-3);
        assert_eq!(cfg.train.gamma, 0.95);
        assert_eq!(cfg.train.epochs, 20);

        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        fs::write(&file, "[model]\nd_model = 64\nn_heads = 2\n[train]\nepochs = 3\n").unwrap();
        let mut flags = Layer::default();
        flags.train.epochs = Some(7);
        let cfg = RunConfig::resolve(Some(&file), &flags).unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.train.epochs, 7);

        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut flags = Layer::default();
        flags.model.n_heads = Some(3);
        assert!(matches!(RunConfig::resolve(None, &flags), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        fs::write(&file, "[model]\nwidth = 3\n").unwrap();
        assert!(matches!(RunConfig::resolve(Some(&file), &Layer::default()), Err(Error::Config(_))));
    }
}
