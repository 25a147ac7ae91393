//! Run configuration: a flat `section.key = value` plain-text format with
//! fail-fast unknown-key handling, plus `key=value` command-line overrides.

use std::path::{Path, PathBuf};

use crate::data::{AugmentConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::TripletMode;
use crate::model::{CouplingMode, GitConfig, StageConfig};

/// SGD + schedule settings. Defaults mirror the training recipe where it
/// applies at desk scale (momentum 0.9, weight decay 1e-4); see
/// [`full_scale_schedule`] for the full-scale schedule stored as a preset.
#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub momentum: f32,
    pub weight_decay: f32,
    pub init_lr: f32,
    pub peak_lr: f32,
    pub warmup_steps: usize,
    /// (step, factor) multiplicative drops applied from that step on.
    pub milestones: Vec<(usize, f32)>,
    pub steps: usize,
}

/// Learning rate at a step: linear warmup from `init_lr` to `peak_lr`,
/// then piecewise-constant decay at the milestones.
pub fn lr_at(optim: &OptimConfig, step: usize) -> f32 {
    if step < optim.warmup_steps {
        let t = (step + 1) as f32 / optim.warmup_steps as f32;
        optim.init_lr + (optim.peak_lr - optim.init_lr) * t
    } else {
        let mut lr = optim.peak_lr;
        for &(at, factor) in &optim.milestones {
            if step >= at {
                lr *= factor;
            }
        }
        lr
    }
}

/// The full-scale recipe expressed in steps: warm up over 5 epochs from
/// 1e-4 to 1e-2, then ×0.1 drops at epochs 51, 86 and 120 of 150.
pub fn full_scale_schedule(steps_per_epoch: usize) -> OptimConfig {
    OptimConfig {
        momentum: 0.9,
        weight_decay: 1e-4,
        init_lr: 1e-4,
        peak_lr: 1e-2,
        warmup_steps: 5 * steps_per_epoch,
        milestones: vec![
            (51 * steps_per_epoch, 0.1),
            (86 * steps_per_epoch, 0.1),
            (120 * steps_per_epoch, 0.1),
        ],
        steps: 150 * steps_per_epoch,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchConfig {
    pub p_ids: usize,
    pub k_imgs: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub alpha: f32,
    pub beta: f32,
    pub triplet_mode: TripletMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Synthetic,
    Folder,
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub source: SourceKind,
    pub folder: PathBuf,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalProtocol {
    /// Every image queries all others of the same set.
    LeaveOneOut,
    /// Separate probe/gallery sets with the cross-camera exclusion rule.
    CrossCamera,
    /// Repeated one-image-per-id draws, averaged.
    RepeatedDraw,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    /// Steps between train-set evaluations during training.
    pub every: usize,
    pub protocol: EvalProtocol,
    pub draws: usize,
    /// Literal split: the drawn image per id forms the probe set. `false`
    /// uses the conventional split (drawn image → gallery).
    pub probe_per_id: bool,
}

/// Everything a command needs, read from one config file plus overrides.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: GitConfig,
    pub optim: OptimConfig,
    pub batch: BatchConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Desk defaults: the tiny model, synthetic data, 200 training steps.
    /// `model.classes = 0` means "derive from the dataset".
    pub fn desk() -> Self {
        let mut model = GitConfig::desk(1);
        model.classes = 0;
        RunConfig {
            model,
            optim: OptimConfig {
                momentum: 0.9,
                weight_decay: 1e-4,
                init_lr: 1e-4,
                peak_lr: 5e-3,
                warmup_steps: 20,
                milestones: Vec::new(),
                steps: 200,
            },
            batch: BatchConfig { p_ids: 8, k_imgs: 6 },
            loss: LossConfig {
                alpha: 1.0,
                beta: 1.0,
                triplet_mode: TripletMode::Soft,
            },
            augment: AugmentConfig {
                flip_p: 0.5,
                erase_p: 0.5,
            },
            data: DataConfig {
                source: SourceKind::Synthetic,
                folder: PathBuf::new(),
                synthetic: SyntheticSpec::desk(0),
            },
            eval: EvalConfig {
                every: 50,
                protocol: EvalProtocol::LeaveOneOut,
                draws: 10,
                probe_per_id: true,
            },
            seed: 42,
            out_dir: PathBuf::from("runs/desk"),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Parses `key = value` lines over the desk defaults. `#` starts a
    /// comment; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::desk();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` override strings on top of the current config.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", o)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one dotted key. Unknown keys fail fast.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{}' for {}", value, key)))
        }
        fn list(key: &str, value: &str) -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|v| num::<usize>(key, v.trim()))
                .collect()
        }
        match key {
            "model.channels" => self.model.channels = num(key, value)?,
            "model.height" => self.model.height = num(key, value)?,
            "model.width" => self.model.width = num(key, value)?,
            "model.patch" => self.model.patch = num(key, value)?,
            "model.dim" => self.model.dim = num(key, value)?,
            "model.heads" => self.model.heads = num(key, value)?,
            "model.classes" => self.model.classes = num(key, value)?,
            "model.coupling" => self.model.coupling = value.parse()?,
            "model.stage_sampling" => {
                let sampling = list(key, value)?;
                resize_stages(&mut self.model.stages, sampling.len());
                for (s, v) in self.model.stages.iter_mut().zip(sampling) {
                    s.sampling = v;
                }
            }
            "model.stage_blocks" => {
                let blocks = list(key, value)?;
                resize_stages(&mut self.model.stages, blocks.len());
                for (s, v) in self.model.stages.iter_mut().zip(blocks) {
                    s.blocks = v;
                }
            }
            "optim.momentum" => self.optim.momentum = num(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, value)?,
            "optim.init_lr" => self.optim.init_lr = num(key, value)?,
            "optim.peak_lr" => self.optim.peak_lr = num(key, value)?,
            "optim.warmup_steps" => self.optim.warmup_steps = num(key, value)?,
            "optim.steps" => self.optim.steps = num(key, value)?,
            "optim.milestones" => {
                self.optim.milestones = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|m| -> Result<(usize, f32)> {
                            let (s, f) = m.trim().split_once(':').ok_or_else(|| {
                                Error::Config(format!("milestone '{}' is not step:factor", m))
                            })?;
                            Ok((num::<usize>(key, s)?, num::<f32>(key, f)?))
                        })
                        .collect::<Result<_>>()?
                };
            }
            "batch.p_ids" => self.batch.p_ids = num(key, value)?,
            "batch.k_imgs" => self.batch.k_imgs = num(key, value)?,
            "loss.alpha" => self.loss.alpha = num(key, value)?,
            "loss.beta" => self.loss.beta = num(key, value)?,
            "loss.triplet_mode" => self.loss.triplet_mode = value.parse()?,
            "augment.flip_p" => self.augment.flip_p = num(key, value)?,
            "augment.erase_p" => self.augment.erase_p = num(key, value)?,
            "data.source" => {
                self.data.source = match value {
                    "synthetic" => SourceKind::Synthetic,
                    "folder" => SourceKind::Folder,
                    _ => {
                        return Err(Error::Config(format!(
                            "data.source must be synthetic or folder, got '{}'",
                            value
                        )))
                    }
                }
            }
            "data.folder" => self.data.folder = PathBuf::from(value),
            "data.synthetic.ids" => self.data.synthetic.id_count = num(key, value)?,
            "data.synthetic.images_per_id" => {
                self.data.synthetic.images_per_id = num(key, value)?
            }
            "data.synthetic.height" => self.data.synthetic.height = num(key, value)?,
            "data.synthetic.width" => self.data.synthetic.width = num(key, value)?,
            "data.synthetic.jitter" => self.data.synthetic.jitter = num(key, value)?,
            "data.synthetic.cameras" => self.data.synthetic.cameras = num(key, value)?,
            "eval.every" => self.eval.every = num(key, value)?,
            "eval.draws" => self.eval.draws = num(key, value)?,
            "eval.probe_per_id" => {
                self.eval.probe_per_id = num::<bool>(key, value)?;
            }
            "eval.protocol" => {
                self.eval.protocol = match value {
                    "leave_one_out" => EvalProtocol::LeaveOneOut,
                    "cross_camera" => EvalProtocol::CrossCamera,
                    "repeated_draw" => EvalProtocol::RepeatedDraw,
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown eval.protocol '{}'",
                            value
                        )))
                    }
                }
            }
            "seed" => self.seed = num(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key '{}'", key))),
        }
        Ok(())
    }
}

fn resize_stages(stages: &mut Vec<StageConfig>, len: usize) {
    let last = stages.last().copied().unwrap_or(StageConfig {
        sampling: 2,
        blocks: 2,
    });
    stages.resize(len, last);
}

/// Named model presets for the parameter tables.
pub fn model_preset(name: &str) -> Result<GitConfig> {
    match name {
        "desk" => Ok(GitConfig::desk(1)),
        "vit_tiny" => Ok(GitConfig::vit_tiny()),
        "vit_small" => Ok(GitConfig::vit_small()),
        "vit_base" => Ok(GitConfig::vit_base()),
        "git_tiny" => Ok(GitConfig::full_scale(192, 3, 12, CouplingMode::Interactive)),
        "git_small" => Ok(GitConfig::full_scale(384, 6, 12, CouplingMode::Interactive)),
        "git_base" => Ok(GitConfig::full_scale(768, 12, 12, CouplingMode::Interactive)),
        _ => Err(Error::Config(format!("unknown model preset '{}'", name))),
    }
}
