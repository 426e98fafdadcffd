//! Plain-text key-value run configuration with dotted override flags, and
//! sweep specifications expanding to bounded cartesian products.
//!
//! Format: one `key = value` per line, `#` comments. Unknown keys are
//! rejected. Every run directory receives a frozen copy of the fully
//! resolved config, so a run is reproducible from its directory alone.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nm::NmPattern;
use crate::schedule::{Recipe, RecipeSchedule};
use crate::task::ToyTask;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear learning-rate warmup steps (0 disables).
    pub warmup_steps: usize,
    /// Fraction of the base rate reached by linear decay at the final step
    /// (1.0 disables decay).
    pub lr_min_frac: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 200,
            lr_min_frac: 0.05,
        }
    }
}

impl OptimizerConfig {
    /// Effective rate at `step` of a `total_steps`-long run: linear warmup
    /// followed by linear decay toward `lr_min_frac · lr`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warm = if self.warmup_steps > 0 {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let progress = if total_steps > 1 {
            step as f64 / (total_steps - 1) as f64
        } else {
            0.0
        };
        let decay = 1.0 - (1.0 - self.lr_min_frac) * progress;
        self.lr * warm * decay
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// 0 means "use the schedule's update_period".
    pub eval_interval: usize,
    /// Validation examples per interval eval (the final eval always runs
    /// the full split). 0 means full split every time.
    pub eval_examples: usize,
    /// Greedy-decode budget per interval eval.
    pub seq_eval_examples: usize,
    /// Greedy-decode budget for the final eval. 0 means full split.
    pub final_seq_examples: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 8,
            eval_interval: 0,
            eval_examples: 128,
            seq_eval_examples: 32,
            final_seq_examples: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: ToyTask,
    pub schedule: RecipeSchedule,
    /// SR-STE sparse-refined regularization strength.
    pub lambda_w: f64,
    pub optimizer: OptimizerConfig,
    pub train: TrainSettings,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        // Desk schedule: the reference n=200K/d=20K/s=20K scaled down 40×,
        // preserving the 10%/10% dense/fine-tune fractions and the
        // per-window refresh count.
        Self {
            model: ModelConfig::desk(),
            task: ToyTask::default(),
            schedule: RecipeSchedule {
                recipe: Recipe::Dense,
                total_steps: 5000,
                dense_steps: 500,
                finetune_steps: 500,
                target_pattern: NmPattern::new(2, 4).unwrap(),
                beta: 0.9,
                update_period: 100,
                srste_warmup: 0,
            },
            lambda_w: 2e-4,
            optimizer: OptimizerConfig::default(),
            train: TrainSettings::default(),
            seed: 1,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "model.enc_layers" => self.model.enc_layers = parse_num(key, v)?,
            "model.dec_layers" => self.model.dec_layers = parse_num(key, v)?,
            "model.d_model" => self.model.d_model = parse_num(key, v)?,
            "model.d_ff" => self.model.d_ff = parse_num(key, v)?,
            "model.heads" => self.model.heads = parse_num(key, v)?,
            "model.vocab" => {
                self.model.vocab = parse_num(key, v)?;
                self.task.vocab = self.model.vocab;
            }
            "model.max_len" => self.model.max_len = parse_num(key, v)?,
            "task.len_min" => self.task.len_min = parse_num(key, v)?,
            "task.len_max" => self.task.len_max = parse_num(key, v)?,
            "task.train_examples" => self.task.train_examples = parse_num(key, v)?,
            "task.val_examples" => self.task.val_examples = parse_num(key, v)?,
            "schedule.recipe" => self.schedule.recipe = Recipe::parse(v)?,
            "schedule.n" => self.schedule.total_steps = parse_num(key, v)?,
            "schedule.d" => self.schedule.dense_steps = parse_num(key, v)?,
            "schedule.s" => self.schedule.finetune_steps = parse_num(key, v)?,
            "schedule.pattern" => self.schedule.target_pattern = NmPattern::parse(v)?,
            "schedule.beta" => self.schedule.beta = parse_num(key, v)?,
            "schedule.update_period" => self.schedule.update_period = parse_num(key, v)?,
            "schedule.srste_warmup" => self.schedule.srste_warmup = parse_num(key, v)?,
            "schedule.lambda_w" => self.lambda_w = parse_num(key, v)?,
            "optimizer.kind" => {
                self.optimizer.kind = match v {
                    "adam" => OptKind::Adam,
                    "sgd" => OptKind::Sgd,
                    other => {
                        return Err(Error::Config(format!("unknown optimizer kind '{other}'")))
                    }
                }
            }
            "optimizer.lr" => self.optimizer.lr = parse_num(key, v)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse_num(key, v)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse_num(key, v)?,
            "optimizer.eps" => self.optimizer.eps = parse_num(key, v)?,
            "optimizer.warmup_steps" => self.optimizer.warmup_steps = parse_num(key, v)?,
            "optimizer.lr_min_frac" => self.optimizer.lr_min_frac = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.eval_interval" => self.train.eval_interval = parse_num(key, v)?,
            "train.eval_examples" => self.train.eval_examples = parse_num(key, v)?,
            "train.seq_eval_examples" => self.train.seq_eval_examples = parse_num(key, v)?,
            "train.final_seq_examples" => self.train.final_seq_examples = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.apply(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_text(&text)
    }

    /// Apply `key=value` override flags after file parsing.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{ov}' is not of form key=value"))
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    /// Whole-config validation before any compute.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.task.vocab != self.model.vocab {
            return Err(Error::Config(format!(
                "task vocab {} differs from model vocab {}",
                self.task.vocab, self.model.vocab
            )));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.optimizer.lr
            )));
        }
        if !(self.optimizer.lr_min_frac > 0.0 && self.optimizer.lr_min_frac <= 1.0) {
            return Err(Error::Config(format!(
                "optimizer.lr_min_frac must be in (0, 1], got {}",
                self.optimizer.lr_min_frac
            )));
        }
        if self.lambda_w < 0.0 {
            return Err(Error::Config("schedule.lambda_w must be >= 0".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn eval_interval(&self) -> usize {
        if self.train.eval_interval == 0 {
            self.schedule.update_period
        } else {
            self.train.eval_interval
        }
    }

    /// Fully-resolved config, one key per line, stable ordering.
    pub fn resolved_text(&self) -> String {
        let o = &self.optimizer;
        let s = &self.schedule;
        format!(
            "seed = {}\n\
             out_dir = {}\n\
             model.enc_layers = {}\nmodel.dec_layers = {}\nmodel.d_model = {}\n\
             model.d_ff = {}\nmodel.heads = {}\nmodel.vocab = {}\nmodel.max_len = {}\n\
             task.len_min = {}\ntask.len_max = {}\ntask.train_examples = {}\n\
             task.val_examples = {}\n\
             schedule.recipe = {}\nschedule.n = {}\nschedule.d = {}\nschedule.s = {}\n\
             schedule.pattern = {}\nschedule.beta = {}\nschedule.update_period = {}\n\
             schedule.srste_warmup = {}\nschedule.lambda_w = {}\n\
             optimizer.kind = {}\noptimizer.lr = {}\noptimizer.beta1 = {}\n\
             optimizer.beta2 = {}\noptimizer.eps = {}\n\
             optimizer.warmup_steps = {}\noptimizer.lr_min_frac = {}\n\
             train.batch_size = {}\ntrain.eval_interval = {}\ntrain.eval_examples = {}\n\
             train.seq_eval_examples = {}\ntrain.final_seq_examples = {}\n",
            self.seed,
            self.out_dir.display(),
            self.model.enc_layers,
            self.model.dec_layers,
            self.model.d_model,
            self.model.d_ff,
            self.model.heads,
            self.model.vocab,
            self.model.max_len,
            self.task.len_min,
            self.task.len_max,
            self.task.train_examples,
            self.task.val_examples,
            s.recipe.name(),
            s.total_steps,
            s.dense_steps,
            s.finetune_steps,
            s.target_pattern,
            s.beta,
            s.update_period,
            s.srste_warmup,
            self.lambda_w,
            match o.kind {
                OptKind::Adam => "adam",
                OptKind::Sgd => "sgd",
            },
            o.lr,
            o.beta1,
            o.beta2,
            o.eps,
            o.warmup_steps,
            o.lr_min_frac,
            self.train.batch_size,
            self.train.eval_interval,
            self.train.eval_examples,
            self.train.seq_eval_examples,
            self.train.final_seq_examples,
        )
    }

    /// Stable id derived from the resolved config (FNV-1a of the text).
    pub fn run_id(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.resolved_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Sweep: a base config plus axis overrides, expanded as a cartesian
/// product bounded by an explicit run-count cap.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub axes: Vec<(String, Vec<String>)>,
    pub cap: usize,
}

impl SweepSpec {
    /// Spec format: optional `base = path` (resolved relative to the spec
    /// file), optional `cap = N` (default 64), and `axis.<config key> =
    /// v1, v2, ...` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut base = RunConfig::default();
        let mut axes = Vec::new();
        let mut cap = 64usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "base" {
                base = RunConfig::load(&dir.join(value))?;
            } else if key == "cap" {
                cap = parse_num(key, value)?;
            } else if let Some(axis_key) = key.strip_prefix("axis.") {
                let values: Vec<String> =
                    value.split(',').map(|v| v.trim().to_string()).collect();
                if values.is_empty() {
                    return Err(Error::Config(format!("axis '{axis_key}' has no values")));
                }
                axes.push((axis_key.to_string(), values));
            } else {
                return Err(Error::Config(format!(
                    "unknown sweep key '{key}' (expected base, cap or axis.*)"
                )));
            }
        }
        Ok(Self { base, axes, cap })
    }

    /// Expand into (cell label, config) pairs. Empty axes yield the single
    /// base run.
    pub fn expand(&self) -> Result<Vec<(String, RunConfig)>> {
        let count: usize = self.axes.iter().map(|(_, vs)| vs.len()).product();
        if count > self.cap {
            return Err(Error::Config(format!(
                "sweep expands to {count} runs, exceeding cap {}",
                self.cap
            )));
        }
        let mut cells = vec![(String::from("base"), self.base.clone())];
        for (key, values) in &self.axes {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for (label, cfg) in &cells {
                for v in values {
                    let mut c = cfg.clone();
                    c.apply(key, v)?;
                    let short = key.rsplit('.').next().unwrap_or(key);
                    let label = if label == "base" {
                        format!("{short}={v}")
                    } else {
                        format!("{label},{short}={v}")
                    };
                    next.push((label, c));
                }
            }
            cells = next;
        }
        Ok(cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut cfg = RunConfig::parse_text(
            "schedule.recipe = mask_decay\nschedule.beta = 0.5 # comment\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.schedule.recipe, Recipe::MaskDecay);
        assert_eq!(cfg.schedule.beta, 0.5);
        assert_eq!(cfg.seed, 9);
        cfg.apply_overrides(&["schedule.beta=0.9".to_string()]).unwrap();
        assert_eq!(cfg.schedule.beta, 0.9);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = RunConfig::parse_text("schedule.gamma = 1\n").unwrap_err();
        assert!(err.to_string().contains("schedule.gamma"));
    }

    #[test]
    fn non_power_of_two_pattern_rejected() {
        let err = RunConfig::parse_text("schedule.pattern = 1:12\n").unwrap_err();
        assert!(err.to_string().contains("power of two"), "{err}");
    }

    #[test]
    fn pattern_1_16_accepted_with_desk_dff() {
        let cfg = RunConfig::parse_text("schedule.pattern = 1:16\n").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.d_ff % 16, 0);
    }

    #[test]
    fn resolved_text_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.apply("schedule.recipe", "structure_decay").unwrap();
        cfg.apply("optimizer.lr", "0.002").unwrap();
        let re = RunConfig::parse_text(&cfg.resolved_text()).unwrap();
        assert_eq!(re.resolved_text(), cfg.resolved_text());
        assert_eq!(re.run_id(), cfg.run_id());
    }

    #[test]
    fn run_id_distinguishes_configs() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 2;
        assert_ne!(a.run_id(), b.run_id());
    }

    #[test]
    fn sweep_expansion_and_cap() {
        let spec = SweepSpec {
            base: RunConfig::default(),
            axes: vec![
                (
                    "schedule.update_period".into(),
                    vec!["100".into(), "1000".into()],
                ),
                ("seed".into(), vec!["1".into(), "2".into(), "3".into()]),
            ],
            cap: 6,
        };
        let cells = spec.expand().unwrap();
        assert_eq!(cells.len(), 6);
        assert!(cells[0].0.contains("update_period=100"));
        let over = SweepSpec { cap: 5, ..spec };
        assert!(over.expand().is_err());
    }

    #[test]
    fn empty_axes_single_base_run() {
        let spec = SweepSpec {
            base: RunConfig::default(),
            axes: vec![],
            cap: 1,
        };
        let cells = spec.expand().unwrap();
        assert_eq!(cells.len(), 1);
    }
}
