//! Strict run configuration: a TOML file with per-module sections, dotted
//! `key=value` overrides, and a canonical hash used to validate checkpoint
//! resumes. Unknown keys are rejected everywhere.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugParams;
use crate::data::synthetic::SyntheticSceneSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub train: TrainSection,
    pub model: ModelSection,
    pub multiscale: MultiscaleSection,
    pub loss: LossSection,
    pub pseudo: PseudoSection,
    pub epoch_corresponding: EpochSection,
    pub domain: DomainSection,
    pub aug: AugSection,
    pub eval: EvalSection,
    pub data: DataSection,
    pub synthetic: SyntheticSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            train: TrainSection::default(),
            model: ModelSection::default(),
            multiscale: MultiscaleSection::default(),
            loss: LossSection::default(),
            pseudo: PseudoSection::default(),
            epoch_corresponding: EpochSection::default(),
            domain: DomainSection::default(),
            aug: AugSection::default(),
            eval: EvalSection::default(),
            data: DataSection::default(),
            synthetic: SyntheticSection::default(),
        }
    }
}

/// Scene-generator parameters for `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    pub max_overlap: f64,
    pub hue_shift_deg: f64,
    pub blur_sigma: f64,
    pub max_distractors: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticSceneSpec::default();
        Self {
            canvas: s.canvas,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_size_frac: s.min_size_frac,
            max_size_frac: s.max_size_frac,
            max_overlap: s.max_overlap,
            hue_shift_deg: s.hue_shift_deg,
            blur_sigma: s.blur_sigma,
            max_distractors: s.max_distractors,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            canvas: self.canvas,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_size_frac: self.min_size_frac,
            max_size_frac: self.max_size_frac,
            max_overlap: self.max_overlap,
            hue_shift_deg: self.hue_shift_deg,
            blur_sigma: self.blur_sigma,
            max_distractors: self.max_distractors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    /// Defaults to 10% of `epochs` (rounded up) when unset.
    pub burnin_epochs: Option<usize>,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub momentum: f64,
    pub ema_momentum: f64,
    pub lambda_u: f64,
    pub lambda_da: f64,
    pub seed: u64,
    /// Defaults to ceil(labeled / batch_labeled).
    pub steps_per_epoch_burnin: Option<usize>,
    /// Defaults to ceil(unlabeled / batch_unlabeled).
    pub steps_per_epoch_ssod: Option<usize>,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    /// Dump per-epoch score lists and thresholds alongside metrics.
    pub dump_scores: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 500,
            burnin_epochs: None,
            batch_labeled: 8,
            batch_unlabeled: 8,
            lr: 0.01,
            momentum: 0.9,
            ema_momentum: 0.999,
            lambda_u: 1.0,
            lambda_da: 0.1,
            seed: 0,
            steps_per_epoch_burnin: None,
            steps_per_epoch_ssod: None,
            checkpoint_every: 1,
            eval_every: 1,
            dump_scores: true,
        }
    }
}

impl TrainSection {
    pub fn effective_burnin(&self) -> usize {
        self.burnin_epochs
            .unwrap_or_else(|| (self.epochs as f64 * 0.1).ceil() as usize)
            .min(self.epochs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub image_size: usize,
    pub width: usize,
    pub neck_width: usize,
    pub num_classes: usize,
    pub strides: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { image_size: 64, width: 8, neck_width: 32, num_classes: 3, strides: vec![8, 16, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiscaleSection {
    pub scales: Vec<usize>,
}

impl Default for MultiscaleSection {
    fn default() -> Self {
        Self { scales: vec![1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Teacher-objectness gate of the unsupervised regression loss.
    pub obj_gate: f64,
    /// Disable to drop the soft-objectness branch for unreliable cells.
    pub unreliable_branch: bool,
    /// Supervised component balance.
    pub w_cls: f64,
    pub w_reg: f64,
    /// Weight of positive cells inside the objectness weighted mean.
    pub obj_pos_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { obj_gate: 0.99, unreliable_branch: true, w_cls: 1.0, w_reg: 1.0, obj_pos_weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    pub conf_floor: f64,
    pub nms_iou: f64,
}

impl Default for PseudoSection {
    fn default() -> Self {
        Self { conf_floor: 0.05, nms_iou: 0.65 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpochSection {
    /// Reliable ratio in percent.
    pub alpha: f64,
    pub reservoir_cap: usize,
    /// Thresholds used while no score statistics exist.
    pub fallback_tau1: f64,
    pub fallback_tau2: f64,
}

impl Default for EpochSection {
    fn default() -> Self {
        Self { alpha: 50.0, reservoir_cap: 100_000, fallback_tau1: 0.0, fallback_tau2: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    /// Reverse gradients through the GRL (false trains the classifier
    /// without adversarial alignment, the ablation control).
    pub grl_enabled: bool,
    /// Ramp the reversal strength from 0 to 1 across the burn-in.
    pub grl_ramp: bool,
}

impl Default for DomainSection {
    fn default() -> Self {
        Self { grl_enabled: true, grl_ramp: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugSection {
    pub flip_prob: f64,
    pub scale_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub jitter_prob: f64,
    pub gray_prob: f64,
    pub blur_prob: f64,
    pub cutout_prob: f64,
    pub colorspace_prob: f64,
    pub mixup_ratio: f64,
    pub mixpl_mixup_prob: f64,
    pub mixpl_mosaic_prob: f64,
}

impl Default for AugSection {
    fn default() -> Self {
        let p = AugParams::default();
        Self {
            flip_prob: p.flip_prob,
            scale_prob: p.scale_prob,
            scale_min: p.scale_min,
            scale_max: p.scale_max,
            jitter_prob: p.jitter_prob,
            gray_prob: p.gray_prob,
            blur_prob: p.blur_prob,
            cutout_prob: p.cutout_prob,
            colorspace_prob: p.colorspace_prob,
            mixup_ratio: p.mixup_ratio,
            mixpl_mixup_prob: p.mixpl_mixup_prob,
            mixpl_mosaic_prob: p.mixpl_mosaic_prob,
        }
    }
}

impl AugSection {
    pub fn params(&self) -> AugParams {
        AugParams {
            flip_prob: self.flip_prob,
            scale_prob: self.scale_prob,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            jitter_prob: self.jitter_prob,
            gray_prob: self.gray_prob,
            blur_prob: self.blur_prob,
            cutout_prob: self.cutout_prob,
            colorspace_prob: self.colorspace_prob,
            mixup_ratio: self.mixup_ratio,
            mixpl_mixup_prob: self.mixpl_mixup_prob,
            mixpl_mosaic_prob: self.mixpl_mosaic_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub conf_floor: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { conf_floor: 0.05, nms_iou: 0.65, max_dets: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_dir: String,
    /// When set, validation comes from this directory and `val_frac` is
    /// ignored.
    pub val_dir: Option<String>,
    pub labeled_pct: f64,
    pub fold_seed: u64,
    pub val_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_dir: String::new(),
            val_dir: None,
            labeled_pct: 5.0,
            fold_seed: 0,
            val_frac: 0.1,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Parses the file (or defaults when `None`), applies dotted-path
    /// overrides, then re-validates under the strict schema.
    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut value: toml::Value =
            toml::from_str(&base).map_err(|e| Error::config(format!("config: {e}")))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: Config = value
            .try_into()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_labeled == 0 || t.batch_unlabeled == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if t.batch_labeled % 4 != 0 || t.batch_unlabeled % 4 != 0 {
            return Err(Error::config("batch sizes must be multiples of 4 (mosaic groups)"));
        }
        if !(0.0 < t.ema_momentum && t.ema_momentum < 1.0) {
            return Err(Error::config("ema_momentum must be in (0,1)"));
        }
        if t.lambda_u < 0.0 || t.lambda_da < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if t.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if self.model.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if let Some(&max_stride) = self.model.strides.iter().max() {
            if self.model.image_size % max_stride != 0 {
                return Err(Error::config(format!(
                    "image_size {} not divisible by stride {max_stride}",
                    self.model.image_size
                )));
            }
        }
        if !self.multiscale.scales.contains(&1) {
            return Err(Error::config("multiscale.scales must contain 1"));
        }
        if !(0.0..=1.0).contains(&self.loss.obj_gate) {
            return Err(Error::config("loss.obj_gate must be in [0,1]"));
        }
        if !(0.0..=100.0).contains(&self.epoch_corresponding.alpha) {
            return Err(Error::config("epoch_corresponding.alpha must be in [0,100]"));
        }
        let ec = &self.epoch_corresponding;
        if !(0.0..=1.0).contains(&ec.fallback_tau1)
            || !(0.0..=1.0).contains(&ec.fallback_tau2)
            || ec.fallback_tau1 > ec.fallback_tau2
        {
            return Err(Error::config("fallback thresholds must satisfy 0 <= tau1 <= tau2 <= 1"));
        }
        Ok(())
    }

    /// Canonical TOML snapshot of the resolved configuration.
    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies one `section.key=value` override onto a TOML value tree.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override \"{spec}\" is not key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() {
        return Err(Error::config("override key must not be empty"));
    }
    // parse the value as TOML; bare strings fall back to a quoted string
    let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        Ok(toml::Value::Table(mut t)) => t.remove("v").expect("parsed override"),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path {path} crosses a non-table")))?;
        cursor = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override path {path} crosses a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let snap = cfg.snapshot();
        let back = Config::from_toml(&snap).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_toml("[train]\nepoochs = 3\n").unwrap_err();
        assert!(err.to_string().contains("epoochs"), "{err}");
        assert!(Config::from_toml("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = Config::load(
            None,
            &[
                "train.epochs=7".into(),
                "train.lambda_u=0.5".into(),
                "multiscale.scales=[1, 2]".into(),
                "data.train_dir=some/dir".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.lambda_u, 0.5);
        assert_eq!(cfg.multiscale.scales, vec![1, 2]);
        assert_eq!(cfg.data.train_dir, "some/dir");
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        assert!(Config::load(None, &["train.epoochs=3".into()]).is_err());
    }

    #[test]
    fn invalid_cross_field_combinations_fail() {
        assert!(Config::load(None, &["train.batch_labeled=6".into()]).is_err());
        assert!(Config::load(None, &["train.ema_momentum=1.0".into()]).is_err());
        assert!(Config::load(None, &["model.image_size=50".into()]).is_err());
        assert!(Config::load(None, &["multiscale.scales=[2]".into()]).is_err());
    }

    #[test]
    fn snapshot_reproduces_run_config() {
        let a = Config::load(None, &["train.epochs=3".into(), "train.seed=9".into()]).unwrap();
        let text = a.snapshot();
        let b = Config::from_toml(&text).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn burnin_defaults_to_ten_percent() {
        let mut cfg = Config::default();
        cfg.train.epochs = 50;
        assert_eq!(cfg.train.effective_burnin(), 5);
        cfg.train.burnin_epochs = Some(2);
        assert_eq!(cfg.train.effective_burnin(), 2);
    }
}
