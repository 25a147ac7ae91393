//! Assembles embedding, graph modules and transformer layers into a stack
//! of coupled blocks across three stages, with selectable coupling
//! topology, parameter accounting, and the BNNeck head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{embed, patchify, EmbeddingParams};
use crate::error::{Error, Result};
use crate::lcg::{lcg_entry_forward, lcg_forward, LcgEntry, LcgParams, NodeSampler};
use crate::numerics::ops::concat;
use crate::numerics::ops::BatchStats;
use crate::numerics::Tensor;
use crate::transformer::{layer_forward, TransformerParams, MLP_RATIO};

/// Batch-norm epsilon for the BNNeck head.
pub const BN_EPS: f32 = 1e-5;
/// Momentum for running-statistic updates.
pub const BN_MOMENTUM: f32 = 0.1;

/// Which cross-stream additions are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingMode {
    /// Both directions: each block's graph consumes the previous tokens,
    /// and its transformer consumes the block's fresh graph output.
    Interactive,
    /// Only tokens → graph.
    GlobalToLocal,
    /// Only graph → tokens.
    LocalToGlobal,
    /// Both streams run, no cross additions; each stream gets its own head.
    NoInteractive,
    /// Transformer only; no graph stream at all.
    BaselineGlobal,
}

impl CouplingMode {
    pub const ALL: [CouplingMode; 5] = [
        CouplingMode::BaselineGlobal,
        CouplingMode::NoInteractive,
        CouplingMode::GlobalToLocal,
        CouplingMode::LocalToGlobal,
        CouplingMode::Interactive,
    ];

    fn feeds_global_into_local(self) -> bool {
        matches!(self, CouplingMode::Interactive | CouplingMode::GlobalToLocal)
    }

    fn feeds_local_into_global(self) -> bool {
        matches!(self, CouplingMode::Interactive | CouplingMode::LocalToGlobal)
    }

    pub fn has_graph_stream(self) -> bool {
        !matches!(self, CouplingMode::BaselineGlobal)
    }
}

impl fmt::Display for CouplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CouplingMode::Interactive => "interactive",
            CouplingMode::GlobalToLocal => "global_to_local",
            CouplingMode::LocalToGlobal => "local_to_global",
            CouplingMode::NoInteractive => "none",
            CouplingMode::BaselineGlobal => "baseline_global",
        };
        f.write_str(s)
    }
}

impl FromStr for CouplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interactive" => Ok(CouplingMode::Interactive),
            "global_to_local" => Ok(CouplingMode::GlobalToLocal),
            "local_to_global" => Ok(CouplingMode::LocalToGlobal),
            "none" => Ok(CouplingMode::NoInteractive),
            "baseline_global" => Ok(CouplingMode::BaselineGlobal),
            _ => Err(Error::Config(format!("unknown coupling mode '{}'", s))),
        }
    }
}

/// One stage: a sampling size and how many blocks run at it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub sampling: usize,
    pub blocks: usize,
}

/// Full architecture description. Everything about a model is a pure
/// function of this struct plus the init seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GitConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub stages: Vec<StageConfig>,
    pub coupling: CouplingMode,
    pub classes: usize,
}

impl GitConfig {
    /// Desk-scale default: 32×32×3 input, P=8 (16 patches), width 64,
    /// 4 heads, 6 blocks over stages sampling 2/2/4.
    pub fn desk(classes: usize) -> Self {
        GitConfig {
            channels: 3,
            height: 32,
            width: 32,
            patch: 8,
            dim: 64,
            heads: 4,
            stages: vec![
                StageConfig { sampling: 2, blocks: 2 },
                StageConfig { sampling: 2, blocks: 2 },
                StageConfig { sampling: 4, blocks: 2 },
            ],
            coupling: CouplingMode::Interactive,
            classes,
        }
    }

    /// Full-scale preset with the progressive 2→4→8 sampling schedule,
    /// 256×256×3 input, P=16, 12 blocks. Used for parameter accounting.
    pub fn full_scale(dim: usize, heads: usize, depth: usize, coupling: CouplingMode) -> Self {
        assert!(depth % 3 == 0, "full-scale preset splits depth over 3 stages");
        let per = depth / 3;
        GitConfig {
            channels: 3,
            height: 256,
            width: 256,
            patch: 16,
            dim,
            heads,
            stages: vec![
                StageConfig { sampling: 2, blocks: per },
                StageConfig { sampling: 4, blocks: per },
                StageConfig { sampling: 8, blocks: per },
            ],
            coupling,
            classes: 1,
        }
    }

    pub fn vit_tiny() -> Self {
        Self::full_scale(192, 3, 12, CouplingMode::BaselineGlobal)
    }

    pub fn vit_small() -> Self {
        Self::full_scale(384, 6, 12, CouplingMode::BaselineGlobal)
    }

    pub fn vit_base() -> Self {
        Self::full_scale(768, 12, 12, CouplingMode::BaselineGlobal)
    }

    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Number of patch tokens N.
    pub fn patch_count(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Channels per cell when the D-wide patch view is read as a P×P grid.
    pub fn feature_channels(&self) -> usize {
        self.dim / (self.patch * self.patch)
    }

    pub fn stage_of_block(&self, block: usize) -> usize {
        let mut b = block;
        for (i, s) in self.stages.iter().enumerate() {
            if b < s.blocks {
                return i;
            }
            b -= s.blocks;
        }
        panic!("block {} out of range for depth {}", block, self.depth());
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "image {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!(
                "width {} not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.dim % (self.patch * self.patch) != 0 {
            return fail(format!(
                "width {} not divisible by patch area {} (needed for node sampling)",
                self.dim,
                self.patch * self.patch
            ));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.blocks == 0) {
            return fail("every stage needs at least one block".into());
        }
        for s in &self.stages {
            if s.sampling == 0 || self.patch % s.sampling != 0 {
                return fail(format!(
                    "sampling size {} does not tile patch size {}",
                    s.sampling, self.patch
                ));
            }
        }
        if self.classes == 0 {
            return fail("class count must be at least 1".into());
        }
        Ok(())
    }

    /// Flat key=value form, embedded in checkpoints.
    pub fn to_kv(&self) -> String {
        let sampling: Vec<String> = self.stages.iter().map(|s| s.sampling.to_string()).collect();
        let blocks: Vec<String> = self.stages.iter().map(|s| s.blocks.to_string()).collect();
        format!(
            "channels={}\nheight={}\nwidth={}\npatch={}\ndim={}\nheads={}\nstage_sampling={}\nstage_blocks={}\ncoupling={}\nclasses={}\n",
            self.channels,
            self.height,
            self.width,
            self.patch,
            self.dim,
            self.heads,
            sampling.join(","),
            blocks.join(","),
            self.coupling,
            self.classes
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line '{}'", line)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing config key '{}'", k)))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for '{}'", k)))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad value for '{}'", k)))
                })
                .collect()
        };
        let sampling = list("stage_sampling")?;
        let blocks = list("stage_blocks")?;
        if sampling.len() != blocks.len() {
            return Err(Error::Config(
                "stage_sampling and stage_blocks disagree on stage count".into(),
            ));
        }
        let cfg = GitConfig {
            channels: num("channels")?,
            height: num("height")?,
            width: num("width")?,
            patch: num("patch")?,
            dim: num("dim")?,
            heads: num("heads")?,
            stages: sampling
                .into_iter()
                .zip(blocks)
                .map(|(sampling, blocks)| StageConfig { sampling, blocks })
                .collect(),
            coupling: get("coupling")?.parse()?,
            classes: num("classes")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// BNNeck head: BN over the feature plus a bias-free classifier.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub bn_gain: Tensor,
    pub bn_bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// [D, K]
    pub classifier: Tensor,
}

impl HeadParams {
    fn init(dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        HeadParams {
            bn_gain: Tensor::ones(&[dim]).requiring_grad(),
            bn_bias: Tensor::zeros(&[dim]).requiring_grad(),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::ones(&[dim]),
            classifier: Tensor::trunc_normal(&[dim, classes], 0.02, rng).requiring_grad(),
        }
    }

    /// Blends batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let blend = |running: &Tensor, batch: &[f32]| {
            let data: Vec<f32> = running
                .data()
                .iter()
                .zip(batch)
                .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                .collect();
            Tensor::from_op(running.shape().to_vec(), data, false)
        };
        self.running_mean = blend(&self.running_mean, &stats.mean);
        self.running_var = blend(&self.running_var, &stats.var);
    }
}

/// One block: an optional graph module plus a transformer layer.
#[derive(Debug, Clone)]
pub struct GitBlock {
    pub lcg: Option<LcgParams>,
    pub attn: TransformerParams,
}

/// The assembled model.
#[derive(Debug, Clone)]
pub struct GitModel {
    pub config: GitConfig,
    pub embedding: EmbeddingParams,
    pub blocks: Vec<GitBlock>,
    pub head: HeadParams,
    /// Second head for the un-coupled topology, where the graph stream is
    /// supervised separately.
    pub local_head: Option<HeadParams>,
    /// Per-stage node samplers over the D-wide feature view.
    samplers: Vec<NodeSampler>,
    /// Stage-1 sampler over raw pixel patches.
    raw_sampler: NodeSampler,
}

fn init_transformer(dim: usize, rng: &mut ChaCha8Rng) -> TransformerParams {
    let mut t = |shape: &[usize]| Tensor::trunc_normal(shape, 0.02, rng).requiring_grad();
    TransformerParams {
        wq: t(&[dim, dim]),
        wk: t(&[dim, dim]),
        wv: t(&[dim, dim]),
        wo: t(&[dim, dim]),
        ln1_gain: Tensor::ones(&[dim]).requiring_grad(),
        ln1_bias: Tensor::zeros(&[dim]).requiring_grad(),
        ln2_gain: Tensor::ones(&[dim]).requiring_grad(),
        ln2_bias: Tensor::zeros(&[dim]).requiring_grad(),
        mlp_w1: t(&[dim, MLP_RATIO * dim]),
        mlp_w2: t(&[MLP_RATIO * dim, dim]),
    }
}

impl GitModel {
    /// Deterministic initialization: identical seed and config give a
    /// bit-identical model.
    pub fn init(config: GitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.patch_count();
        let ppc = config.patch * config.patch * config.channels;

        let embedding = EmbeddingParams {
            proj: Tensor::trunc_normal(&[ppc, config.dim], 0.02, &mut rng).requiring_grad(),
            class_token: Tensor::trunc_normal(&[1, config.dim], 0.02, &mut rng).requiring_grad(),
            pos: Tensor::trunc_normal(&[n + 1, config.dim], 0.02, &mut rng).requiring_grad(),
        };

        let samplers: Vec<NodeSampler> = config
            .stages
            .iter()
            .map(|s| NodeSampler::new(config.patch, s.sampling, config.feature_channels()))
            .collect::<Result<_>>()?;
        let raw_sampler =
            NodeSampler::new(config.patch, config.stages[0].sampling, config.channels)?;

        let mut blocks = Vec::with_capacity(config.depth());
        for li in 0..config.depth() {
            let stage = config.stage_of_block(li);
            let lcg = if config.coupling.has_graph_stream() {
                let node_count = samplers[stage].node_count();
                let node_dim = samplers[stage].node_dim();
                let entry = if li == 0 {
                    Some(LcgEntry {
                        proj: Tensor::trunc_normal(
                            &[raw_sampler.node_dim(), node_dim],
                            0.02,
                            &mut rng,
                        )
                        .requiring_grad(),
                        pos: Tensor::trunc_normal(&[node_count, node_dim], 0.02, &mut rng)
                            .requiring_grad(),
                    })
                } else {
                    None
                };
                Some(LcgParams {
                    entry,
                    weight: Tensor::trunc_normal(&[node_count, node_dim], 0.02, &mut rng)
                        .requiring_grad(),
                    ln_gain: Tensor::ones(&[node_dim]).requiring_grad(),
                    ln_bias: Tensor::zeros(&[node_dim]).requiring_grad(),
                })
            } else {
                None
            };
            blocks.push(GitBlock {
                lcg,
                attn: init_transformer(config.dim, &mut rng),
            });
        }

        let head = HeadParams::init(config.dim, config.classes, &mut rng);
        let local_head = if config.coupling == CouplingMode::NoInteractive {
            Some(HeadParams::init(config.dim, config.classes, &mut rng))
        } else {
            None
        };

        Ok(GitModel {
            config,
            embedding,
            blocks,
            head,
            local_head,
            samplers,
            raw_sampler,
        })
    }

    pub fn sampler_for_stage(&self, stage: usize) -> &NodeSampler {
        &self.samplers[stage]
    }

    /// Single-image forward: returns the final token sequence and, when a
    /// graph stream exists, its final patch view `[N, D]`.
    pub fn forward_image(&self, img: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        self.run_blocks(img, None)
    }

    /// Forward with per-block outputs exposed, for topology diagnostics.
    pub fn forward_image_traced(&self, img: &Tensor) -> Result<Vec<BlockTrace>> {
        let mut traces = Vec::with_capacity(self.config.depth());
        self.run_blocks(img, Some(&mut traces))?;
        Ok(traces)
    }

    fn run_blocks(
        &self,
        img: &Tensor,
        mut trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let cfg = &self.config;
        if img.shape() != [cfg.channels, cfg.height, cfg.width] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match config [{}x{}x{}]",
                img.shape(),
                cfg.channels,
                cfg.height,
                cfg.width
            )));
        }
        let n = cfg.patch_count();
        let raw_rows = patchify(img, cfg.patch)?;
        let mut tokens = embed(&raw_rows, &self.embedding)?;
        let mut nodes: Option<Tensor> = None;
        let mut prev_stage = 0usize;
        let mut final_stage = 0usize;

        for (li, block) in self.blocks.iter().enumerate() {
            let stage = cfg.stage_of_block(li);
            let sampler = &self.samplers[stage];
            final_stage = stage;

            if let Some(lcg) = &block.lcg {
                let new_nodes = if li == 0 {
                    lcg_entry_forward(&raw_rows, &self.raw_sampler, lcg)?
                } else {
                    let mut local = nodes.take().expect("graph stream state");
                    if stage != prev_stage {
                        // stage transition: re-slice the node view through
                        // the (unchanged) patch view
                        local = sampler.sample(&self.samplers[prev_stage].desample(&local)?)?;
                    }
                    let global_rows = if cfg.coupling.feeds_global_into_local() {
                        Some(tokens.slice_axis(0, 1, n)?)
                    } else {
                        None
                    };
                    lcg_forward(&local, global_rows.as_ref(), sampler, lcg)?
                };
                let local_view = if cfg.coupling.feeds_local_into_global() {
                    Some(sampler.desample(&new_nodes)?)
                } else {
                    None
                };
                tokens = layer_forward(&tokens, local_view.as_ref(), &block.attn, cfg.heads)?;
                if let Some(sink) = trace.as_deref_mut() {
                    sink.push(BlockTrace {
                        tokens: tokens.clone(),
                        local_patch_view: Some(sampler.desample(&new_nodes)?),
                    });
                }
                nodes = Some(new_nodes);
            } else {
                tokens = layer_forward(&tokens, None, &block.attn, cfg.heads)?;
                if let Some(sink) = trace.as_deref_mut() {
                    sink.push(BlockTrace {
                        tokens: tokens.clone(),
                        local_patch_view: None,
                    });
                }
            }
            prev_stage = stage;
        }
        let final_local = match nodes {
            Some(nn) => Some(self.samplers[final_stage].desample(&nn)?),
            None => None,
        };
        Ok((tokens, final_local))
    }

    /// Straight-line ViT forward (embedding + plain encoder layers), used
    /// as the independent route for checking the baseline topology.
    pub fn plain_vit_forward(&self, img: &Tensor) -> Result<Tensor> {
        let raw_rows = patchify(img, self.config.patch)?;
        let mut tokens = embed(&raw_rows, &self.embedding)?;
        for block in &self.blocks {
            tokens = layer_forward(&tokens, None, &block.attn, self.config.heads)?;
        }
        Ok(tokens)
    }

    /// Batched forward through the backbone and head(s).
    pub fn forward(&self, images: &[Tensor], train: bool) -> Result<ForwardOutput> {
        if images.is_empty() {
            return Err(Error::Contract("forward on an empty batch".into()));
        }
        let mut class_rows = Vec::with_capacity(images.len());
        let mut local_rows = Vec::with_capacity(images.len());
        for img in images {
            let (tokens, local_view) = self.forward_image(img)?;
            class_rows.push(tokens.slice_axis(0, 0, 1)?);
            if let Some(view) = local_view {
                // [N, D] → [1, D] mean over patches
                local_rows.push(view.mean_axis(0)?.reshape(&[1, self.config.dim])?);
            }
        }
        let refs: Vec<&Tensor> = class_rows.iter().collect();
        let class_feature = concat(&refs, 0)?;
        let (bn_feature, logits, bn_stats) = apply_head(&class_feature, &self.head, train)?;

        let local_pooled = if local_rows.is_empty() {
            None
        } else {
            let refs: Vec<&Tensor> = local_rows.iter().collect();
            Some(concat(&refs, 0)?)
        };
        let (local_bn_feature, local_logits, local_bn_stats) =
            match (&self.local_head, &local_pooled) {
                (Some(head), Some(pooled)) => {
                    let (f, l, s) = apply_head(pooled, head, train)?;
                    (Some(f), Some(l), s)
                }
                _ => (None, None, None),
            };

        Ok(ForwardOutput {
            class_feature,
            bn_feature,
            logits,
            local_pooled,
            local_bn_feature,
            local_logits,
            bn_stats,
            local_bn_stats,
        })
    }

    /// Learnable parameters in a fixed, checkpoint-stable order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embedding.proj".into(), &self.embedding.proj));
        out.push(("embedding.class_token".into(), &self.embedding.class_token));
        out.push(("embedding.pos".into(), &self.embedding.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(lcg) = &b.lcg {
                if let Some(e) = &lcg.entry {
                    out.push((format!("blocks.{}.lcg.entry.proj", i), &e.proj));
                    out.push((format!("blocks.{}.lcg.entry.pos", i), &e.pos));
                }
                out.push((format!("blocks.{}.lcg.weight", i), &lcg.weight));
                out.push((format!("blocks.{}.lcg.ln_gain", i), &lcg.ln_gain));
                out.push((format!("blocks.{}.lcg.ln_bias", i), &lcg.ln_bias));
            }
            let a = &b.attn;
            out.push((format!("blocks.{}.attn.wq", i), &a.wq));
            out.push((format!("blocks.{}.attn.wk", i), &a.wk));
            out.push((format!("blocks.{}.attn.wv", i), &a.wv));
            out.push((format!("blocks.{}.attn.wo", i), &a.wo));
            out.push((format!("blocks.{}.attn.ln1_gain", i), &a.ln1_gain));
            out.push((format!("blocks.{}.attn.ln1_bias", i), &a.ln1_bias));
            out.push((format!("blocks.{}.attn.ln2_gain", i), &a.ln2_gain));
            out.push((format!("blocks.{}.attn.ln2_bias", i), &a.ln2_bias));
            out.push((format!("blocks.{}.attn.mlp_w1", i), &a.mlp_w1));
            out.push((format!("blocks.{}.attn.mlp_w2", i), &a.mlp_w2));
        }
        push_head(&mut out, "head", &self.head);
        if let Some(h) = &self.local_head {
            push_head(&mut out, "local_head", h);
        }
        out
    }

    /// Mutable view of the learnable parameters, same order as
    /// [`named_params`](Self::named_params).
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embedding.proj".into(), &mut self.embedding.proj));
        out.push((
            "embedding.class_token".into(),
            &mut self.embedding.class_token,
        ));
        out.push(("embedding.pos".into(), &mut self.embedding.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(lcg) = &mut b.lcg {
                if let Some(e) = &mut lcg.entry {
                    out.push((format!("blocks.{}.lcg.entry.proj", i), &mut e.proj));
                    out.push((format!("blocks.{}.lcg.entry.pos", i), &mut e.pos));
                }
                out.push((format!("blocks.{}.lcg.weight", i), &mut lcg.weight));
                out.push((format!("blocks.{}.lcg.ln_gain", i), &mut lcg.ln_gain));
                out.push((format!("blocks.{}.lcg.ln_bias", i), &mut lcg.ln_bias));
            }
            let a = &mut b.attn;
            out.push((format!("blocks.{}.attn.wq", i), &mut a.wq));
            out.push((format!("blocks.{}.attn.wk", i), &mut a.wk));
            out.push((format!("blocks.{}.attn.wv", i), &mut a.wv));
            out.push((format!("blocks.{}.attn.wo", i), &mut a.wo));
            out.push((format!("blocks.{}.attn.ln1_gain", i), &mut a.ln1_gain));
            out.push((format!("blocks.{}.attn.ln1_bias", i), &mut a.ln1_bias));
            out.push((format!("blocks.{}.attn.ln2_gain", i), &mut a.ln2_gain));
            out.push((format!("blocks.{}.attn.ln2_bias", i), &mut a.ln2_bias));
            out.push((format!("blocks.{}.attn.mlp_w1", i), &mut a.mlp_w1));
            out.push((format!("blocks.{}.attn.mlp_w2", i), &mut a.mlp_w2));
        }
        push_head_mut(&mut out, "head", &mut self.head);
        if let Some(h) = &mut self.local_head {
            push_head_mut(&mut out, "local_head", h);
        }
        out
    }

    /// Learnable parameters plus BN running statistics: everything a
    /// checkpoint persists. Order matches `named_state_mut`.
    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        let locals = self.local_head.is_some() as usize;
        let mut out = self.named_params();
        out.truncate(out.len() - 3 * locals);
        out.push(("head.bn_running_mean".into(), &self.head.running_mean));
        out.push(("head.bn_running_var".into(), &self.head.running_var));
        if let Some(h) = &self.local_head {
            push_head(&mut out, "local_head", h);
            out.push(("local_head.bn_running_mean".into(), &h.running_mean));
            out.push(("local_head.bn_running_var".into(), &h.running_var));
        }
        out
    }

    pub(crate) fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embedding.proj".into(), &mut self.embedding.proj));
        out.push((
            "embedding.class_token".into(),
            &mut self.embedding.class_token,
        ));
        out.push(("embedding.pos".into(), &mut self.embedding.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(lcg) = &mut b.lcg {
                if let Some(e) = &mut lcg.entry {
                    out.push((format!("blocks.{}.lcg.entry.proj", i), &mut e.proj));
                    out.push((format!("blocks.{}.lcg.entry.pos", i), &mut e.pos));
                }
                out.push((format!("blocks.{}.lcg.weight", i), &mut lcg.weight));
                out.push((format!("blocks.{}.lcg.ln_gain", i), &mut lcg.ln_gain));
                out.push((format!("blocks.{}.lcg.ln_bias", i), &mut lcg.ln_bias));
            }
            let a = &mut b.attn;
            out.push((format!("blocks.{}.attn.wq", i), &mut a.wq));
            out.push((format!("blocks.{}.attn.wk", i), &mut a.wk));
            out.push((format!("blocks.{}.attn.wv", i), &mut a.wv));
            out.push((format!("blocks.{}.attn.wo", i), &mut a.wo));
            out.push((format!("blocks.{}.attn.ln1_gain", i), &mut a.ln1_gain));
            out.push((format!("blocks.{}.attn.ln1_bias", i), &mut a.ln1_bias));
            out.push((format!("blocks.{}.attn.ln2_gain", i), &mut a.ln2_gain));
            out.push((format!("blocks.{}.attn.ln2_bias", i), &mut a.ln2_bias));
            out.push((format!("blocks.{}.attn.mlp_w1", i), &mut a.mlp_w1));
            out.push((format!("blocks.{}.attn.mlp_w2", i), &mut a.mlp_w2));
        }
        out.push(("head.bn_gain".into(), &mut self.head.bn_gain));
        out.push(("head.bn_bias".into(), &mut self.head.bn_bias));
        out.push(("head.classifier".into(), &mut self.head.classifier));
        out.push(("head.bn_running_mean".into(), &mut self.head.running_mean));
        out.push(("head.bn_running_var".into(), &mut self.head.running_var));
        if let Some(h) = &mut self.local_head {
            out.push(("local_head.bn_gain".into(), &mut h.bn_gain));
            out.push(("local_head.bn_bias".into(), &mut h.bn_bias));
            out.push(("local_head.classifier".into(), &mut h.classifier));
            out.push(("local_head.bn_running_mean".into(), &mut h.running_mean));
            out.push(("local_head.bn_running_var".into(), &mut h.running_var));
        }
        out
    }
}

fn push_head<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, h: &'a HeadParams) {
    out.push((format!("{}.bn_gain", prefix), &h.bn_gain));
    out.push((format!("{}.bn_bias", prefix), &h.bn_bias));
    out.push((format!("{}.classifier", prefix), &h.classifier));
}

fn push_head_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, h: &'a mut HeadParams) {
    out.push((format!("{}.bn_gain", prefix), &mut h.bn_gain));
    out.push((format!("{}.bn_bias", prefix), &mut h.bn_bias));
    out.push((format!("{}.classifier", prefix), &mut h.classifier));
}

fn apply_head(
    features: &Tensor,
    head: &HeadParams,
    train: bool,
) -> Result<(Tensor, Tensor, Option<BatchStats>)> {
    let out = crate::losses::bnneck(features, head, train)?;
    Ok((out.ce_feature, out.logits, out.batch_stats))
}

/// Per-block forward snapshot.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub tokens: Tensor,
    pub local_patch_view: Option<Tensor>,
}

/// Batched forward output.
#[derive(Debug)]
pub struct ForwardOutput {
    /// [B, D] final class tokens, pre-BN (fed to the triplet loss).
    pub class_feature: Tensor,
    /// [B, D] post-BN features (fed to cross-entropy; also the eval features).
    pub bn_feature: Tensor,
    /// [B, K]
    pub logits: Tensor,
    /// [B, D] mean-pooled final graph patch view, when a graph stream runs.
    pub local_pooled: Option<Tensor>,
    /// Populated only for the un-coupled topology's second head.
    pub local_bn_feature: Option<Tensor>,
    pub local_logits: Option<Tensor>,
    pub bn_stats: Option<BatchStats>,
    pub local_bn_stats: Option<BatchStats>,
}

/// Learnable-scalar breakdown for a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub embedding: usize,
    pub transformer: usize,
    pub graph: usize,
    pub head: usize,
}

impl ParamCount {
    /// Everything except the head(s) — the number quoted for backbones.
    pub fn backbone(&self) -> usize {
        self.embedding + self.transformer + self.graph
    }

    pub fn total(&self) -> usize {
        self.backbone() + self.head
    }
}

/// Exact learnable scalar count as a pure function of the config.
pub fn count_params(config: &GitConfig) -> ParamCount {
    let d = config.dim;
    let n = config.patch_count();
    let ppc = config.patch * config.patch * config.channels;

    let embedding = ppc * d + d + (n + 1) * d;

    // per block: Wq/Wk/Wv/Wo + two LN pairs + MLP at ratio 4
    let per_block = 4 * d * d + 4 * d + 2 * d * MLP_RATIO * d;
    let transformer = per_block * config.depth();

    let graph = if config.coupling.has_graph_stream() {
        // d' = D / n keeps the count meaningful even for presets whose
        // width is not instantiable as a pixel grid (D < P²)
        let mut total = 0usize;
        for (si, s) in config.stages.iter().enumerate() {
            let node_count = (config.patch / s.sampling) * (config.patch / s.sampling);
            let node_dim = d / node_count;
            // W is [n, d'] = D scalars; LN gain+bias are 2·d'
            total += s.blocks * (node_count * node_dim + 2 * node_dim);
            if si == 0 {
                let raw_dim = s.sampling * s.sampling * config.channels;
                total += raw_dim * node_dim + node_count * node_dim;
            }
        }
        total
    } else {
        0
    };

    let head_one = 2 * d + d * config.classes;
    let head = if config.coupling == CouplingMode::NoInteractive {
        2 * head_one
    } else {
        head_one
    };

    ParamCount {
        embedding,
        transformer,
        graph,
        head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_model(coupling: CouplingMode) -> GitModel {
        let mut cfg = GitConfig::desk(8);
        cfg.coupling = coupling;
        GitModel::init(cfg, 42).unwrap()
    }

    fn desk_image(seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[3, 32, 32], data).unwrap()
    }

    #[test]
    fn desk_config_is_consistent() {
        let cfg = GitConfig::desk(8);
        cfg.validate().unwrap();
        assert_eq!(cfg.depth(), 6);
        assert_eq!(cfg.patch_count(), 16);
        assert_eq!(cfg.feature_channels(), 1);
        assert_eq!(cfg.stage_of_block(0), 0);
        assert_eq!(cfg.stage_of_block(3), 1);
        assert_eq!(cfg.stage_of_block(5), 2);
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = GitConfig::desk(11);
        let parsed = GitConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn forward_output_shapes() {
        let model = desk_model(CouplingMode::Interactive);
        let images = vec![desk_image(1), desk_image(2), desk_image(3)];
        let out = model.forward(&images, false).unwrap();
        assert_eq!(out.class_feature.shape(), [3, 64]);
        assert_eq!(out.bn_feature.shape(), [3, 64]);
        assert_eq!(out.logits.shape(), [3, 8]);
        assert!(out.local_pooled.is_some());
        assert!(out.local_logits.is_none());
    }

    #[test]
    fn none_mode_has_second_head() {
        let model = desk_model(CouplingMode::NoInteractive);
        let images = vec![desk_image(4), desk_image(5)];
        let out = model.forward(&images, false).unwrap();
        assert_eq!(out.local_logits.as_ref().unwrap().shape(), [2, 8]);
        assert_eq!(out.local_bn_feature.as_ref().unwrap().shape(), [2, 64]);
    }

    #[test]
    fn baseline_matches_plain_vit_bit_exactly() {
        let model = desk_model(CouplingMode::BaselineGlobal);
        let img = desk_image(6);
        let (tokens, local) = model.forward_image(&img).unwrap();
        assert!(local.is_none());
        let vit = model.plain_vit_forward(&img).unwrap();
        assert!(tokens.bit_eq(&vit));
    }

    #[test]
    fn init_is_deterministic() {
        let a = desk_model(CouplingMode::Interactive);
        let b = desk_model(CouplingMode::Interactive);
        for ((_, ta), (_, tb)) in a.named_state().iter().zip(b.named_state().iter()) {
            assert!(ta.bit_eq(tb));
        }
        let img = desk_image(7);
        let (ta, _) = a.forward_image(&img).unwrap();
        let (tb, _) = b.forward_image(&img).unwrap();
        assert!(ta.bit_eq(&tb));
    }

    #[test]
    fn stage_transition_preserves_patch_view() {
        // desample → sample at the next stage → desample recovers the view
        let model = desk_model(CouplingMode::Interactive);
        let s_old = model.sampler_for_stage(1);
        let s_new = model.sampler_for_stage(2);
        let nodes = {
            use rand::{Rng, SeedableRng};
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let data: Vec<f32> = (0..16 * 16 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(&[16, 16, 4], data).unwrap()
        };
        let view_before = s_old.desample(&nodes).unwrap();
        let resliced = s_new.sample(&view_before).unwrap();
        let view_after = s_new.desample(&resliced).unwrap();
        assert!(view_before.bit_eq(&view_after));
    }

    #[test]
    fn vit_base_count_near_reference() {
        let count = count_params(&GitConfig::vit_base());
        let backbone = count.backbone() as f64;
        let reference = 86.7e6;
        assert!((backbone - reference).abs() / reference < 0.03,
            "ViT-Base backbone {} outside ±3% of 86.7M", backbone);
        assert_eq!(count.graph, 0);
    }

    #[test]
    fn git_exceeds_vit_at_equal_scale() {
        for (dim, heads) in [(192, 3), (384, 6), (768, 12)] {
            let vit = count_params(&GitConfig::full_scale(
                dim,
                heads,
                12,
                CouplingMode::BaselineGlobal,
            ));
            let git = count_params(&GitConfig::full_scale(
                dim,
                heads,
                12,
                CouplingMode::Interactive,
            ));
            assert!(git.backbone() > vit.backbone());
            assert_eq!(git.transformer, vit.transformer);
        }
    }

    #[test]
    fn depth_increase_strictly_increases_count() {
        let c12 = count_params(&GitConfig::full_scale(192, 3, 12, CouplingMode::Interactive));
        let c24 = count_params(&GitConfig::full_scale(192, 3, 24, CouplingMode::Interactive));
        assert!(c24.backbone() > c12.backbone());
    }

    #[test]
    fn desk_count_matches_by_hand_summation() {
        let count = count_params(&GitConfig::desk(8));
        // embedding: 192·64 + 64 + 17·64
        assert_eq!(count.embedding, 12_288 + 64 + 1_088);
        // per block: 4·64² + 4·64 + 2·64·256 = 49 408, six blocks
        assert_eq!(count.transformer, 6 * 49_408);
        // graph: 6 W of 64 + LN (8,8,8,8,32,32) + entry (12·4 + 16·4)
        assert_eq!(count.graph, 6 * 64 + (8 + 8 + 8 + 8 + 32 + 32) + 48 + 64);
        // head: BN affine 128 + classifier 64·8
        assert_eq!(count.head, 128 + 512);
        assert_eq!(count.backbone(), 310_480);
    }

    #[test]
    fn fixed_sampling_variants_are_constructible_via_config() {
        // progressive default plus the fixed-size variants, desk and full scale
        for sampling in [[2, 4, 8], [2, 2, 2], [4, 4, 4], [8, 8, 8]] {
            let mut cfg = GitConfig::full_scale(768, 12, 12, CouplingMode::Interactive);
            for (s, v) in cfg.stages.iter_mut().zip(sampling) {
                s.sampling = v;
            }
            cfg.validate().unwrap();
        }
        for sampling in [[2, 2, 4], [2, 2, 2], [4, 4, 4]] {
            let mut cfg = GitConfig::desk(4);
            for (s, v) in cfg.stages.iter_mut().zip(sampling) {
                s.sampling = v;
            }
            cfg.validate().unwrap();
            GitModel::init(cfg, 1).unwrap();
        }
    }

    #[test]
    fn built_model_supports_concurrent_inference() {
        let model = desk_model(CouplingMode::Interactive);
        let img = desk_image(21);
        let (expect, _) = model.forward_image(&img).unwrap();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..4)
                .map(|_| {
                    s.spawn(|| {
                        let (tokens, _) = model.forward_image(&img).unwrap();
                        assert!(tokens.bit_eq(&expect));
                    })
                })
                .collect();
            for h in handles {
                h.join().unwrap();
            }
        });
    }

    #[test]
    fn model_param_count_matches_formula() {
        for coupling in CouplingMode::ALL {
            let model = desk_model(coupling);
            let actual: usize = model.named_params().iter().map(|(_, t)| t.numel()).sum();
            let expected = count_params(&model.config).total();
            assert_eq!(actual, expected, "count mismatch for {}", coupling);
        }
    }
}
