//! Training configuration, presets and JSON loading.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{BackboneKind, LiteIspConfig};
use crate::error::{Error, Result};
use crate::flowalign::{
    external_flow_adapter, AlignStrategy, BlockMatch, BruteForceTranslation, FlowEstimator, DEFAULT_EPSILON,
};
use crate::gcm::GcmConfig;
use crate::losses::{LossMode, LossWeights};
use crate::rawdata::{SceneStyle, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    /// First epoch trained at half the learning rate.
    pub lr_halve_epoch: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Stop after this many optimizer steps, whatever the epoch.
    pub max_steps: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            lr: 1e-4,
            lr_halve_epoch: 50,
            epochs: 100,
            batch: 16,
            max_steps: None,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_halve_epoch {
            self.lr * 0.5
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    BruteTranslation,
    BlockMatch,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub estimator: EstimatorKind,
    /// Search radius in pixels.
    pub radius: usize,
    /// Block size of the block matcher.
    pub block: usize,
    /// Manifest of the external estimator.
    pub weights_path: Option<PathBuf>,
    pub epsilon: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::BruteTranslation,
            radius: 8,
            block: 16,
            weights_path: None,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl FlowConfig {
    pub fn build(&self) -> Result<Box<dyn FlowEstimator>> {
        Ok(match self.estimator {
            EstimatorKind::BruteTranslation => Box::new(BruteForceTranslation { radius: self.radius }),
            EstimatorKind::BlockMatch => Box::new(BlockMatch {
                block: self.block,
                radius: self.radius,
            }),
            EstimatorKind::External => {
                let p = self
                    .weights_path
                    .as_deref()
                    .ok_or_else(|| Error::config("flow.estimator = external needs flow.weights_path"))?;
                Box::new(external_flow_adapter(p)?)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    /// Seed of the frozen random feature pyramid.
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self { seed: 0x5eed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    /// Epoch from which the adversarial term joins the generator loss.
    pub start_epoch: usize,
    pub disc_width: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            start_epoch: 0,
            disc_width: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset written by `synth-data`; when absent the pairs are generated
    /// from `synth`.
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Training crop size (raw pixels, multiple of 16).
    pub crop: Option<usize>,
    pub augment: bool,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synth: SynthConfig::default(),
            crop: None,
            augment: true,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub optimizer: OptimizerConfig,
    pub flow: FlowConfig,
    pub gcm: GcmConfig,
    pub backbone: BackboneKind,
    pub liteisp: LiteIspConfig,
    pub align_strategy: AlignStrategy,
    pub loss: LossWeights,
    pub perceptual: PerceptualConfig,
    pub gan: GanConfig,
    pub data: DataConfig,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every: usize,
    pub seed: u64,
    /// Output directory for checkpoints and reports.
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Isp,
            optimizer: OptimizerConfig::default(),
            flow: FlowConfig::default(),
            gcm: GcmConfig::default(),
            backbone: BackboneKind::Liteisp,
            liteisp: LiteIspConfig::default(),
            align_strategy: AlignStrategy::WithGcm,
            loss: LossWeights::default(),
            perceptual: PerceptualConfig::default(),
            gan: GanConfig::default(),
            data: DataConfig::default(),
            eval_every: 0,
            seed: 0,
            out: None,
        }
    }
}

pub const PRESETS: [&str; 2] = ["paper_zrr", "desk"];

impl TrainConfig {
    /// Full-size regime: 448×448 raw crops, batch 16, 100 epochs, an external
    /// flow network.
    pub fn paper_zrr() -> Self {
        let mut c = Self::default();
        c.data.crop = Some(448);
        c.data.dir = Some(PathBuf::from("zrr"));
        c.flow.estimator = EstimatorKind::External;
        c.flow.weights_path = Some(PathBuf::from("pwcnet.json"));
        c.eval_every = 1;
        c
    }

    /// Small CPU regime on synthetic 64×64 pairs with translations of
    /// `(3, −2) ± 3` px.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.optimizer.lr = 2e-3;
        c.optimizer.batch = 4;
        c.optimizer.max_steps = Some(1000);
        c.liteisp.base_width = 16;
        c.liteisp.n_rcab = 2;
        c.gan.disc_width = 16;
        c.flow.radius = 6;
        c.data.augment = false;
        let s = &mut c.data.synth;
        s.style = SceneStyle::Smooth;
        s.max_shift = 3.0;
        s.shift_bias = [3.0, -2.0];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper_zrr" => Ok(Self::paper_zrr()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::config(format!("unknown preset {name:?} (paper_zrr | desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gcm.validate()?;
        self.liteisp.validate()?;
        self.backbone.ensure_available()?;
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("optimizer.lr must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer betas must lie in [0, 1)"));
        }
        if o.batch == 0 {
            return Err(Error::config("optimizer.batch must be >= 1"));
        }
        if self.align_strategy == AlignStrategy::WithGcm && !self.gcm.spn {
            return Err(Error::config("align_strategy with_gcm needs gcm.spn = true"));
        }
        if let Some(c) = self.data.crop {
            if c == 0 || c % 16 != 0 {
                return Err(Error::config("data.crop must be a positive multiple of 16"));
            }
        }
        let s = self.data.split;
        if s.iter().any(|v| !(0.0..=1.0).contains(v)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 || s[0] == 0.0 {
            return Err(Error::config(
                "data.split must be three fractions summing to 1 with a non-empty train part",
            ));
        }
        if self.flow.estimator == EstimatorKind::External && self.flow.weights_path.is_none() {
            return Err(Error::config("flow.estimator = external needs flow.weights_path"));
        }
        Ok(())
    }

    /// Parse a JSON config. An optional top-level `"preset"` names the base
    /// configuration the remaining keys override.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config JSON: {e}")))?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| Error::config("config must be a JSON object"))?;
        let base = match obj.remove("preset") {
            Some(Value::String(name)) => Self::preset(&name)?,
            Some(_) => return Err(Error::config("preset must be a string")),
            None => Self::default(),
        };
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, v);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
