//! `key = value` run configuration files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::shuffle::BlockGrouping;
use crate::train::{OptimizerKind, TrainConfig};
use crate::vit::EncoderConfig;

/// Everything a CLI run needs besides file paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            n_train: 800,
            n_test: 200,
            threshold: 0.1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        let t = &mut self.train;
        match key {
            "image_size" => e.image_size = parse(key, value)?,
            "patch_size" => e.patch_size = parse(key, value)?,
            "channels" => e.channels = parse(key, value)?,
            "embed_dim" => e.embed_dim = parse(key, value)?,
            "layers" => e.layers = parse(key, value)?,
            "heads" => e.heads = parse(key, value)?,
            "mlp_ratio" => e.mlp_ratio = parse(key, value)?,
            "num_classes" => e.num_classes = parse(key, value)?,
            "across_dim" => e.across_dim = parse(key, value)?,
            "across_heads" => e.across_heads = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "eta" => t.eta = parse(key, value)?,
            "mu" => t.mu = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "sinkhorn_iters" => t.sinkhorn_iters = parse(key, value)?,
            "sinkhorn_tol" => t.sinkhorn_tol = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "local_shuffle" => t.use_local_shuffle = parse_bool(key, value)?,
            "global_shuffle" => t.use_global_shuffle = parse_bool(key, value)?,
            "matching" => t.use_matching = parse_bool(key, value)?,
            "across" => t.use_across = parse_bool(key, value)?,
            "grouping" => {
                t.grouping = match value {
                    "spatial" => BlockGrouping::Spatial,
                    "flattened" => BlockGrouping::Flattened,
                    _ => {
                        return Err(Error::Config(format!(
                            "grouping: expected spatial or flattened, got {value:?}"
                        )))
                    }
                }
            }
            "optimizer" => {
                t.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adamw" => OptimizerKind::adamw(),
                    _ => {
                        return Err(Error::Config(format!(
                            "optimizer: expected sgd or adamw, got {value:?}"
                        )))
                    }
                }
            }
            "weight_decay" => match &mut t.optimizer {
                OptimizerKind::AdamW { weight_decay, .. } => *weight_decay = parse(key, value)?,
                OptimizerKind::Sgd => {
                    return Err(Error::Config(
                        "weight_decay needs optimizer = adamw set first".into(),
                    ))
                }
            },
            "threshold" => self.threshold = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`. Blank
    /// lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    no + 1
                ))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Serializes to lines that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let mut lines = vec![
            format!("image_size = {}", e.image_size),
            format!("patch_size = {}", e.patch_size),
            format!("channels = {}", e.channels),
            format!("embed_dim = {}", e.embed_dim),
            format!("layers = {}", e.layers),
            format!("heads = {}", e.heads),
            format!("mlp_ratio = {}", e.mlp_ratio),
            format!("num_classes = {}", e.num_classes),
            format!("across_dim = {}", e.across_dim),
            format!("across_heads = {}", e.across_heads),
            format!("lambda = {}", t.lambda),
            format!("lr = {}", t.lr),
            format!("epochs = {}", t.epochs),
            format!("batch_size = {}", t.batch_size),
            format!("eta = {}", t.eta),
            format!("mu = {}", t.mu),
            format!("epsilon = {}", t.epsilon),
            format!("sinkhorn_iters = {}", t.sinkhorn_iters),
            format!("sinkhorn_tol = {}", t.sinkhorn_tol),
            format!("seed = {}", t.seed),
            format!("local_shuffle = {}", t.use_local_shuffle),
            format!("global_shuffle = {}", t.use_global_shuffle),
            format!("matching = {}", t.use_matching),
            format!("across = {}", t.use_across),
            format!(
                "grouping = {}",
                match t.grouping {
                    BlockGrouping::Spatial => "spatial",
                    BlockGrouping::Flattened => "flattened",
                }
            ),
        ];
        match t.optimizer {
            OptimizerKind::Sgd => lines.push("optimizer = sgd".into()),
            OptimizerKind::AdamW { weight_decay, .. } => {
                lines.push("optimizer = adamw".into());
                lines.push(format!("weight_decay = {weight_decay}"));
            }
        }
        lines.push(format!("threshold = {}", self.threshold));
        lines.push(format!("n_train = {}", self.n_train));
        lines.push(format!("n_test = {}", self.n_test));
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nepochs = 3\nmatching=false\n\noptimizer = adamw\nweight_decay = 0.01 # tail\n")
            .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(!cfg.train.use_matching);
        let mut again = RunConfig::default();
        again.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let mut cfg = RunConfig::default();
        let err = cfg
            .apply_text("epochs = 3\nbogus = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(cfg.apply_text("lr: 3").is_err());
        assert!(cfg.apply_text("matching = maybe").is_err());
    }
}
