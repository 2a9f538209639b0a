//! Experiment configuration, read from TOML.
//!
//! Top-level keys `seed` and `output_dir`, then the tables `[world]`,
//! `[model]`, `[training]`, `[thresholds]`, `[loss]` and `[modules]`. Every
//! key is optional and falls back to its default; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PdpError, Result};
use crate::losses::LossWeights;
use crate::model::{ModelShape, ObjectiveConfig};
use crate::ppg::Thresholds;
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub prompt_len: usize,
    pub shared_size: usize,
    pub anchor_scale: f64,
    pub attention_gain: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = ModelShape::default();
        Self {
            dim: s.dim,
            heads: s.heads,
            num_queries: s.num_queries,
            prompt_len: s.prompt_len,
            shared_size: s.shared_size,
            anchor_scale: s.anchor_scale,
            attention_gain: s.attention_gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub prototype_capacity: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-2, batch_size: 4, prototype_capacity: crate::ppg::DEFAULT_CAPACITY }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_q: f64,
    pub lambda_ddl: f64,
    /// Degrees.
    pub theta_ddl: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub no_object: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let o = ObjectiveConfig::default();
        Self {
            lambda_q: o.lambda_q,
            lambda_ddl: o.lambda_ddl,
            theta_ddl: o.theta_ddl.to_degrees(),
            class: w.class,
            l1: w.l1,
            giou: w.giou,
            no_object: w.no_object,
        }
    }
}

/// Ablation switches; each is independent of the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Modules {
    pub shared_pool: bool,
    pub ppg: bool,
    pub ddl: bool,
}

impl Default for Modules {
    fn default() -> Self {
        Self { shared_pool: true, ppg: true, ddl: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub world: WorldConfig,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub thresholds: Thresholds,
    pub loss: LossSection,
    pub modules: Modules,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "pdp-out".into(),
            world: WorldConfig::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            thresholds: Thresholds::default(),
            loss: LossSection::default(),
            modules: Modules::default(),
        }
    }
}

/// First line (one-based) of `src` assigning `key` inside `[section]`, or at
/// top level when `section` is `None`.
fn locate(src: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (n, line) in src.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            continue;
        }
        let k = t.split('=').next().unwrap_or("").trim();
        if k == key && current.as_deref() == section {
            return Some(n + 1);
        }
    }
    None
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| src[..s.start].matches('\n').count() + 1);
            let msg = e.message().to_string();
            PdpError::Config(match line {
                Some(l) => format!("line {l}: {msg}"),
                None => msg,
            })
        })?;
        cfg.validate(src)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| PdpError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&src).map_err(|e| match e {
            PdpError::Config(m) => PdpError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Semantic checks; `src` is only used to point at the offending line.
    pub fn validate(&self, src: &str) -> Result<()> {
        let fail = |section: Option<&str>, key: &str, msg: String| {
            let at = match locate(src, section, key) {
                Some(l) => format!("line {l}: "),
                None => String::new(),
            };
            let name = match section {
                Some(s) => format!("{s}.{key}"),
                None => key.to_string(),
            };
            Err(PdpError::Config(format!("{at}{name}: {msg}")))
        };
        let th = &self.thresholds;
        for (key, v) in [("tau_high", th.tau_high), ("tau_low", th.tau_low)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(Some("thresholds"), key, format!("{v} must lie in (0, 1)"));
            }
        }
        if th.tau_low >= th.tau_high {
            return fail(Some("thresholds"), "tau_low", format!("{} must be below tau_high {}", th.tau_low, th.tau_high));
        }
        if !(-1.0..=1.0).contains(&th.theta_s) {
            return fail(Some("thresholds"), "theta_s", format!("{} must lie in [-1, 1]", th.theta_s));
        }
        let m = &self.model;
        if m.prompt_len % 2 != 0 {
            return fail(Some("model"), "prompt_len", format!("{} must be even", m.prompt_len));
        }
        if m.heads == 0 || m.dim % m.heads != 0 {
            return fail(Some("model"), "heads", format!("{} must divide dim {}", m.heads, m.dim));
        }
        if m.num_queries == 0 {
            return fail(Some("model"), "num_queries", "must be positive".into());
        }
        let l = &self.loss;
        for (key, v) in [
            ("lambda_q", l.lambda_q),
            ("lambda_ddl", l.lambda_ddl),
            ("class", l.class),
            ("l1", l.l1),
            ("giou", l.giou),
            ("no_object", l.no_object),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(Some("loss"), key, format!("{v} must be a finite non-negative weight"));
            }
        }
        if !(0.0..=180.0).contains(&l.theta_ddl) {
            return fail(Some("loss"), "theta_ddl", format!("{} degrees outside [0, 180]", l.theta_ddl));
        }
        let t = &self.training;
        if t.epochs == 0 {
            return fail(Some("training"), "epochs", "must be positive".into());
        }
        if t.batch_size == 0 {
            return fail(Some("training"), "batch_size", "must be positive".into());
        }
        if !t.lr.is_finite() || t.lr <= 0.0 {
            return fail(Some("training"), "lr", format!("{} must be positive", t.lr));
        }
        if t.prototype_capacity == 0 {
            return fail(Some("training"), "prototype_capacity", "must be positive".into());
        }
        if let Err(PdpError::Config(msg)) = self.world.check() {
            let line = ["image_size", "cell", "glyph", "min_objects", "max_objects", "task_sizes", "noise", "min_intensity"]
                .iter()
                .filter_map(|k| locate(src, Some("world"), k))
                .min();
            let at = line.map(|l| format!("line {l}: ")).unwrap_or_default();
            return Err(PdpError::Config(format!("{at}world: {msg}")));
        }
        Ok(())
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            image_size: self.world.image_size,
            patch_size: self.world.cell,
            dim: self.model.dim,
            heads: self.model.heads,
            num_queries: self.model.num_queries,
            num_classes: self.world.num_classes(),
            prompt_len: self.model.prompt_len,
            shared_size: if self.modules.shared_pool { self.model.shared_size } else { 0 },
            anchor_scale: self.model.anchor_scale,
            attention_gain: self.model.attention_gain,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        let l = &self.loss;
        ObjectiveConfig {
            weights: LossWeights { class: l.class, l1: l.l1, giou: l.giou, no_object: l.no_object },
            lambda_q: l.lambda_q,
            lambda_ddl: l.lambda_ddl,
            theta_ddl: l.theta_ddl.to_radians(),
            use_ddl: self.modules.ddl,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::default().objective().theta_ddl, std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 42;
        cfg.thresholds.theta_s = 0.35;
        cfg.loss.lambda_ddl = 0.1 + 0.2;
        cfg.modules.ppg = false;
        cfg.world.task_sizes = vec![3, 3];
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn diagnostics_name_the_line() {
        let src = "seed = 1\n\n[thresholds]\ntau_high = 0.3\ntau_low = 0.4\n";
        let err = ExperimentConfig::from_toml(src).unwrap_err().to_string();
        assert!(err.contains("line 5") && err.contains("tau_low"), "{err}");

        let src = "[model]\ndim = 32\nprompt_len = 7\n";
        let err = ExperimentConfig::from_toml(src).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("even"), "{err}");

        let src = "seed = 1\n[loss]\nlambda_q = -0.1\n";
        assert!(ExperimentConfig::from_toml(src).unwrap_err().to_string().contains("line 3"));

        let src = "seed = 1\n[modules]\nppg = true\nbogus = 3\n";
        let err = ExperimentConfig::from_toml(src).unwrap_err().to_string();
        assert!(err.contains("line 4") && err.contains("bogus"), "{err}");

        let src = "[world]\ntask_sizes = [5, 5]\n";
        assert!(ExperimentConfig::from_toml(src).unwrap_err().to_string().contains("line 2"));
    }

    #[test]
    fn shared_pool_toggle_empties_the_pool() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.shape().shared_size, 100);
        cfg.modules.shared_pool = false;
        assert_eq!(cfg.shape().shared_size, 0);
        assert_eq!(cfg.shape().num_classes, 8);
    }
}
