//! Layered run configuration: built-in defaults, then a config file, then
//! dotted-key overrides. Unknown keys are rejected and every value is
//! validated before any command does work or touches the filesystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::curation::CurationParams;
use crate::diffusion::SamplerConfig;
use crate::error::{IdvidError, Result};
use crate::injection::InjectionPlan;
use crate::pretrain::PretrainConfig;
use crate::synthdata::DatasetConfig;
use crate::trainer::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out (reference, caption) pairs to score.
    pub n_pairs: usize,
    pub seed: u64,
    /// Identity index offset for held-out faces; keep it above the training
    /// roster so evaluation identities are never trained on.
    pub identity_offset: u32,
    /// Low/high band split radius; null means half the Nyquist radius.
    pub band_split: Option<f64>,
    /// Checkpoint to evaluate; defaults to train/final.ckpt under the out
    /// directory.
    pub checkpoint: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_pairs: 20,
            seed: 9001,
            identity_offset: 4096,
            band_split: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Injection plans to sweep, letters a through g.
    pub plans: String,
    /// Sampling step counts for the steps sweep.
    pub steps_ladder: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            plans: "abc".into(),
            steps_ladder: crate::analysis::DEFAULT_STEP_LADDER.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Checkpoint to sample from; defaults to train/final.ckpt under the
    /// out directory.
    pub checkpoint: Option<String>,
    /// Which evaluation pair supplies the reference face and the caption.
    pub pair_index: usize,
    /// Also write the frames as a portable pixmap sequence.
    pub write_ppm: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            checkpoint: None,
            pair_index: 0,
            write_ppm: true,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumInput {
    /// Packed video tensor file to analyze.
    pub video: Option<String>,
}

/// The full run document. Defaults are a coherent small setup; a config
/// file and `--set` overrides layer on top.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When set it overrides every module seed (with small
    /// offsets so modules stay on distinct streams).
    pub seed: Option<u64>,
    pub out_dir: String,
    /// Dataset file to read or write; defaults to dataset.bin under the
    /// out directory.
    pub dataset_file: Option<String>,
    /// Tower checkpoint to read or write; defaults to towers.ckpt under
    /// the out directory.
    pub towers_file: Option<String>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub sampler: SamplerConfig,
    pub curation: CurationParams,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub sample: SampleConfig,
    pub spectrum: SpectrumInput,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out_dir: "out".into(),
            dataset_file: None,
            towers_file: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            sampler: SamplerConfig::default(),
            curation: CurationParams::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            sample: SampleConfig::default(),
            spectrum: SpectrumInput::default(),
        }
    }
}

impl RunConfig {
    /// Apply the master seed to every module seed.
    pub fn resolve(mut self) -> Self {
        if let Some(s) = self.seed {
            self.dataset.seed = s;
            self.train.seed = s.wrapping_add(1);
            self.pretrain.seed = s.wrapping_add(2);
            self.eval.seed = s.wrapping_add(3);
            self.sampler.seed = s.wrapping_add(4);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.n_identities == 0 || d.videos_per_identity == 0 {
            return Err(IdvidError::Config(
                "dataset needs at least one identity and one video per identity".into(),
            ));
        }
        if d.frames_per_video == 0 || d.height < 8 || d.width < 8 {
            return Err(IdvidError::Config(format!(
                "dataset dims too small: t={} h={} w={}",
                d.frames_per_video, d.height, d.width
            )));
        }
        if d.height != d.width {
            return Err(IdvidError::Config(format!(
                "frames must be square for the semantic tower, got {}x{}",
                d.height, d.width
            )));
        }
        self.train.validate()?;
        self.model.validate(&self.train.components)?;
        self.pretrain.validate()?;
        self.curation.validate()?;
        if self.model.dit.height != d.height || self.model.dit.width != d.width {
            return Err(IdvidError::Config(format!(
                "model frame size {}x{} does not match dataset {}x{}",
                self.model.dit.height, self.model.dit.width, d.height, d.width
            )));
        }
        if self.model.dit.frames > d.frames_per_video {
            return Err(IdvidError::Config(format!(
                "model window of {} frames exceeds dataset clips of {}",
                self.model.dit.frames, d.frames_per_video
            )));
        }
        if self.sampler.steps == 0 {
            return Err(IdvidError::Config("sampler.steps must be >= 1".into()));
        }
        if !self.sampler.guidance_scale.is_finite() {
            return Err(IdvidError::Config("sampler.guidance_scale must be finite".into()));
        }
        if self.eval.n_pairs == 0 {
            return Err(IdvidError::Config("eval.n_pairs must be >= 1".into()));
        }
        if let Some(split) = self.eval.band_split {
            if !(split.is_finite() && split > 0.0) {
                return Err(IdvidError::Config(format!(
                    "eval.band_split must be positive, got {split}"
                )));
            }
        }
        if self.ablation.plans.is_empty() {
            return Err(IdvidError::Config("ablation.plans is empty".into()));
        }
        for letter in self.ablation.plans.chars() {
            InjectionPlan::named(letter)?;
        }
        if self.ablation.steps_ladder.is_empty() {
            return Err(IdvidError::Config("ablation.steps_ladder is empty".into()));
        }
        if self.ablation.steps_ladder.iter().any(|&s| s == 0) {
            return Err(IdvidError::Config("ablation.steps_ladder entries must be >= 1".into()));
        }
        if self.sample.pair_index >= self.eval.n_pairs {
            return Err(IdvidError::Config(format!(
                "sample.pair_index {} outside eval.n_pairs {}",
                self.sample.pair_index, self.eval.n_pairs
            )));
        }
        Ok(())
    }

    pub fn out_root(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn dataset_path(&self) -> PathBuf {
        match &self.dataset_file {
            Some(p) => PathBuf::from(p),
            None => self.out_root().join("dataset.bin"),
        }
    }

    pub fn towers_path(&self) -> PathBuf {
        match &self.towers_file {
            Some(p) => PathBuf::from(p),
            None => self.out_root().join("towers.ckpt"),
        }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out_root().join("train")
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        self.train_dir().join("final.ckpt")
    }
}

fn deep_merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    // unknown key: carried through so deserialization
                    // rejects it with a precise message
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply one `--set key=value` override. The key is a dotted path into the
/// document; the value is parsed as JSON when possible, as a string
/// otherwise.
pub fn set_dotted(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(IdvidError::Config(format!("malformed config key '{key}'")));
    }
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            IdvidError::Config(format!(
                "config key '{}' is a value, not a section",
                parts[..i].join(".")
            ))
        })?;
        let slot = obj.get_mut(*part).ok_or_else(|| {
            IdvidError::Config(format!("unknown config key '{}'", parts[..=i].join(".")))
        })?;
        if i == parts.len() - 1 {
            *slot = serde_json::from_str::<Value>(raw)
                .unwrap_or_else(|_| Value::String(raw.to_string()));
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("loop returns on the last segment")
}

/// Build the run document: defaults, then the config file, then the
/// overrides, then a strict decode. No validation side effects.
pub fn load_config(file: Option<&Path>, sets: &[(String, String)]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| IdvidError::io(path, e))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| IdvidError::Config(format!("config file {}: {e}", path.display())))?;
        if !overlay.is_object() {
            return Err(IdvidError::Config(format!(
                "config file {} must hold a JSON object",
                path.display()
            )));
        }
        deep_merge(&mut doc, overlay);
    }
    for (k, v) in sets {
        set_dotted(&mut doc, k, v)?;
    }
    serde_json::from_value(doc).map_err(|e| IdvidError::Config(format!("invalid config: {e}")))
}
