//! Line-based `key=value` run configuration shared by the CLI commands.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Model keys given explicitly; the rest fall back to defaults (and `d_w`
/// to the width of the data).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelOverrides {
    pub d_w: Option<usize>,
    pub d_v: Option<usize>,
    pub experts: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub n_max: Option<usize>,
    pub dropout: Option<f64>,
}

impl ModelOverrides {
    /// Full model configuration for input width `data_dim`.
    pub fn resolve(&self, data_dim: usize) -> Result<ModelConfig> {
        let d_w = self.d_w.unwrap_or(data_dim);
        if d_w != data_dim {
            return Err(Error::DimensionMismatch(format!(
                "configured d_w={d_w} but the embedding files have width {data_dim}"
            )));
        }
        let base = ModelConfig::default();
        let d_v = self.d_v.unwrap_or(base.d_v);
        let config = ModelConfig {
            d_w,
            d_v,
            experts: self.experts.unwrap_or(base.experts),
            layers: self.layers.unwrap_or(base.layers),
            heads: self.heads.unwrap_or(base.heads),
            d_ff: self.d_ff.unwrap_or(4 * d_v),
            n_max: self.n_max.unwrap_or(base.n_max),
            dropout: self.dropout.unwrap_or(base.dropout),
        };
        config.validate()?;
        Ok(config)
    }

    /// Rejects explicit keys that disagree with a checkpoint's architecture.
    pub fn check_against(&self, ckpt: &ModelConfig) -> Result<()> {
        let pairs = [
            ("d_w", self.d_w, ckpt.d_w),
            ("d_v", self.d_v, ckpt.d_v),
            ("experts", self.experts, ckpt.experts),
            ("layers", self.layers, ckpt.layers),
            ("heads", self.heads, ckpt.heads),
            ("d_ff", self.d_ff, ckpt.d_ff),
            ("n_max", self.n_max, ckpt.n_max),
        ];
        for (key, want, have) in pairs {
            if let Some(w) = want {
                if w != have {
                    return Err(Error::Incompatible(format!(
                        "config sets {key}={w}, checkpoint has {have}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSettings {
    pub eps: f64,
    pub tol: f64,
    pub max_coords: usize,
    /// Std of the Gaussian offset added to the initialized weights.
    pub perturb: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-4,
            max_coords: 100_000,
            perturb: 0.3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelOverrides,
    pub train: TrainConfig,
    pub gradcheck: GradcheckSettings,
    pub data: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::Config(format!("line {line}: bad value `{raw}` for {key}: {e}")))
}

fn list<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',').map(|v| value(key, v.trim(), line)).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, v) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key=value")))?;
            let (key, v) = (key.trim(), v.trim());
            let m = &mut c.model;
            let t = &mut c.train;
            let g = &mut c.gradcheck;
            match key {
                "d_w" => m.d_w = Some(value(key, v, line)?),
                "d_v" => m.d_v = Some(value(key, v, line)?),
                "experts" => m.experts = Some(value(key, v, line)?),
                "layers" => m.layers = Some(value(key, v, line)?),
                "heads" => m.heads = Some(value(key, v, line)?),
                "d_ff" => m.d_ff = Some(value(key, v, line)?),
                "n_max" => m.n_max = Some(value(key, v, line)?),
                "dropout" => m.dropout = Some(value(key, v, line)?),
                "lr" => t.lr = value(key, v, line)?,
                "batch_size" => t.batch_size = value(key, v, line)?,
                "epochs" | "max_epochs" => t.epochs = value(key, v, line)?,
                "patience" => t.patience = value(key, v, line)?,
                "tau" => t.tau = value(key, v, line)?,
                "lambda" => t.lambda = value(key, v, line)?,
                "item_drop_ratio" => t.item_drop_ratio = value(key, v, line)?,
                "augmentation" => t.augmentation = value(key, v, line)?,
                "gate_noise" => t.gate_noise = value(key, v, line)?,
                "negatives" => t.negatives = value(key, v, line)?,
                "mode" => t.mode = value(key, v, line)?,
                "finetune_scope" => t.finetune_scope = value(key, v, line)?,
                "checkpoint_interval" => t.checkpoint_interval = value(key, v, line)?,
                "eval_batch" => t.eval_batch = value(key, v, line)?,
                "long_tail_buckets" => t.long_tail_buckets = list(key, v, line)?,
                "seed" => t.seed = value(key, v, line)?,
                "threads" => t.threads = value(key, v, line)?,
                "gradcheck_eps" => g.eps = value(key, v, line)?,
                "gradcheck_tol" => g.tol = value(key, v, line)?,
                "gradcheck_max_coords" => g.max_coords = value(key, v, line)?,
                "gradcheck_perturb" => g.perturb = value(key, v, line)?,
                "data" => c.data = v.split(',').map(|p| PathBuf::from(p.trim())).collect(),
                "out" => c.out = Some(PathBuf::from(v)),
                "ckpt" => c.ckpt = Some(PathBuf::from(v)),
                "report" => c.report = Some(PathBuf::from(v)),
                other => return Err(Error::Config(format!("line {line}: unknown key `{other}`"))),
            }
        }
        c.train.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::FinetuneMode;

    #[test]
    fn parses_keys_and_comments() {
        let c = RunConfig::parse(
            "# tiny\nd_v = 8\nlr=0.003 # grid value\nmode=transductive\nlong_tail_buckets=0,3,9\ndata=a,b\n",
        )
        .unwrap();
        assert_eq!(c.model.d_v, Some(8));
        assert_eq!(c.train.lr, 0.003);
        assert_eq!(c.train.mode, FinetuneMode::Transductive);
        assert_eq!(c.train.long_tail_buckets, vec![0, 3, 9]);
        assert_eq!(c.data.len(), 2);
        let m = c.model.resolve(16).unwrap();
        assert_eq!((m.d_w, m.d_ff), (16, 32));
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = RunConfig::parse("lr=0.001\n\nlearning_rate=3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3") && err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("lr=0").is_err());
        assert!(RunConfig::parse("batch_size=0").is_err());
        assert!(RunConfig::parse("patience=0").is_err());
        assert!(RunConfig::parse("mode=sideways").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("d_w=12").unwrap().model.resolve(16).is_err());
    }

    #[test]
    fn tuning_grids_validate() {
        for lr in ["0.0003", "0.001", "0.003", "0.01"] {
            RunConfig::parse(&format!("lr={lr}")).unwrap();
        }
        for d in [64, 128, 300] {
            let c = RunConfig::parse(&format!("d_v={d}")).unwrap();
            c.model.resolve(32).unwrap();
        }
    }
}
