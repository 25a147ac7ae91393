//! f64 re-implementation of the full forward pass and training loss,
//! driven by parameters copied out of a core model.

use std::collections::BTreeMap;

use gitreid_core::lcg::{COSINE_EPS, LN_EPS};
use gitreid_core::losses::DIST_EPS;
use gitreid_core::model::{CouplingMode, GitConfig, GitModel, BN_EPS};
use gitreid_core::transformer::MLP_RATIO;

use crate::ops;

#[derive(Debug, Clone)]
pub struct RefTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A fixed batch the loss is evaluated on.
#[derive(Debug, Clone)]
pub struct RefBatch {
    /// Per image, `[C·H·W]` channel-major pixels (already normalized).
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub ids: Vec<u32>,
    pub alpha: f64,
    pub beta: f64,
    pub soft_triplet: bool,
}

/// Double-precision copy of a model's learnable state.
#[derive(Debug, Clone)]
pub struct ReferenceModel {
    config: GitConfig,
    params: BTreeMap<String, RefTensor>,
}

impl ReferenceModel {
    pub fn from_model(model: &GitModel) -> Self {
        let mut params = BTreeMap::new();
        for (name, t) in model.named_params() {
            params.insert(
                name,
                RefTensor {
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|&v| v as f64).collect(),
                },
            );
        }
        ReferenceModel {
            config: model.config.clone(),
            params,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_len(&self, name: &str) -> usize {
        self.params[name].data.len()
    }

    /// Copy with one parameter coordinate shifted by `delta`.
    pub fn perturbed(&self, name: &str, index: usize, delta: f64) -> Self {
        let mut out = self.clone();
        let t = out
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {}", name));
        t.data[index] += delta;
        out
    }

    fn p(&self, name: &str) -> &RefTensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {}", name))
    }

    /// Full training loss of the batch (train-mode BN, batch-hard triplet).
    pub fn loss(&self, batch: &RefBatch) -> f64 {
        let cfg = &self.config;
        let b = batch.images.len();
        let d = cfg.dim;

        let mut class_features = vec![0.0f64; b * d];
        let mut local_features = vec![0.0f64; b * d];
        let has_graph = cfg.coupling.has_graph_stream();

        for (bi, img) in batch.images.iter().enumerate() {
            let (tokens, local_view) = self.forward_image(img);
            class_features[bi * d..(bi + 1) * d].copy_from_slice(&tokens[..d]);
            if let Some(view) = local_view {
                let n = cfg.patch_count();
                for j in 0..d {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += view[i * d + j];
                    }
                    local_features[bi * d + j] = s / n as f64;
                }
            }
        }

        let head_loss = |features: &[f64], prefix: &str| -> f64 {
            let gain = &self.p(&format!("{}.bn_gain", prefix)).data;
            let bias = &self.p(&format!("{}.bn_bias", prefix)).data;
            let cls = &self.p(&format!("{}.classifier", prefix)).data;
            let bn = ops::batch_norm_train(features, gain, bias, b, d, BN_EPS as f64);
            let logits = ops::matmul(&bn, cls, b, d, cfg.classes);
            let ce = ops::cross_entropy(&logits, b, cfg.classes, &batch.labels);
            let tri = triplet_hard(features, b, d, &batch.ids, batch.soft_triplet);
            batch.alpha * ce + batch.beta * tri
        };

        let mut total = head_loss(&class_features, "head");
        if has_graph && cfg.coupling == CouplingMode::NoInteractive {
            total += head_loss(&local_features, "local_head");
        }
        total
    }

    /// Tokens after the final block (flattened [T, D], class row first) and
    /// the final graph patch view when one exists.
    fn forward_image(&self, img: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
        let cfg = &self.config;
        let d = cfg.dim;
        let n = cfg.patch_count();
        let t = n + 1;

        let raw_rows = patchify(img, cfg.channels, cfg.height, cfg.width, cfg.patch);
        let ppc = cfg.patch * cfg.patch * cfg.channels;

        // token embedding
        let proj = &self.p("embedding.proj").data;
        let class_token = &self.p("embedding.class_token").data;
        let pos = &self.p("embedding.pos").data;
        let projected = ops::matmul(&raw_rows, proj, n, ppc, d);
        let mut tokens = vec![0.0f64; t * d];
        tokens[..d].copy_from_slice(class_token);
        tokens[d..].copy_from_slice(&projected);
        for (tok, p) in tokens.iter_mut().zip(pos.iter()) {
            *tok += p;
        }

        let raw_perm = sampler_perm(cfg.patch, cfg.stages[0].sampling, cfg.channels);
        let stage_perms: Vec<Vec<usize>> = cfg
            .stages
            .iter()
            .map(|s| sampler_perm(cfg.patch, s.sampling, cfg.feature_channels()))
            .collect();

        let mut nodes: Option<Vec<f64>> = None;
        let mut prev_stage = 0usize;
        let depth = cfg.depth();
        let mut final_stage = 0usize;

        for li in 0..depth {
            let stage = cfg.stage_of_block(li);
            final_stage = stage;
            let s_cfg = cfg.stages[stage];
            let node_count = (cfg.patch / s_cfg.sampling) * (cfg.patch / s_cfg.sampling);
            let node_dim = d / node_count;

            if cfg.coupling.has_graph_stream() {
                let fused: Vec<f64> = if li == 0 {
                    let raw_dim = s_cfg.sampling * s_cfg.sampling * cfg.channels;
                    let raw_nodes = apply_perm(&raw_rows, &raw_perm, n);
                    let e = &self.p("blocks.0.lcg.entry.proj").data;
                    let e_pos = &self.p("blocks.0.lcg.entry.pos").data;
                    // [N·n, raw_dim] × [raw_dim, node_dim]
                    let mut projected =
                        ops::matmul(&raw_nodes, e, n * node_count, raw_dim, node_dim);
                    for patch in 0..n {
                        for m in 0..node_count {
                            for j in 0..node_dim {
                                projected[(patch * node_count + m) * node_dim + j] +=
                                    e_pos[m * node_dim + j];
                            }
                        }
                    }
                    projected
                } else {
                    let mut local = nodes.take().expect("graph state");
                    if stage != prev_stage {
                        let view = invert_perm_apply(&local, &stage_perms[prev_stage], n);
                        local = apply_perm(&view, &stage_perms[stage], n);
                    }
                    if cfg.coupling == CouplingMode::Interactive
                        || cfg.coupling == CouplingMode::GlobalToLocal
                    {
                        let sampled = apply_perm(&tokens[d..], &stage_perms[stage], n);
                        for (l, s) in local.iter_mut().zip(sampled.iter()) {
                            *l += s;
                        }
                    }
                    local
                };

                let new_nodes =
                    self.lcg_apply(&fused, li, n, node_count, node_dim);

                if cfg.coupling == CouplingMode::Interactive
                    || cfg.coupling == CouplingMode::LocalToGlobal
                {
                    let view = invert_perm_apply(&new_nodes, &stage_perms[stage], n);
                    for (tok, v) in tokens[d..].iter_mut().zip(view.iter()) {
                        *tok += v;
                    }
                }
                nodes = Some(new_nodes);
            }

            tokens = self.transformer_layer(&tokens, li, t);
            prev_stage = stage;
        }

        let local_view =
            nodes.map(|nn| invert_perm_apply(&nn, &stage_perms[final_stage], n));
        (tokens, local_view)
    }

    /// Cosine adjacency, symmetric-normalized propagation, shared weight,
    /// LN + GELU — per patch.
    fn lcg_apply(
        &self,
        fused: &[f64],
        block: usize,
        n_patches: usize,
        node_count: usize,
        node_dim: usize,
    ) -> Vec<f64> {
        let w = &self.p(&format!("blocks.{}.lcg.weight", block)).data;
        let ln_gain = &self.p(&format!("blocks.{}.lcg.ln_gain", block)).data;
        let ln_bias = &self.p(&format!("blocks.{}.lcg.ln_bias", block)).data;

        let mut out = vec![0.0f64; fused.len()];
        for p in 0..n_patches {
            let x = &fused[p * node_count * node_dim..(p + 1) * node_count * node_dim];
            let mut adj = ops::cosine_matrix(x, node_count, node_dim, COSINE_EPS as f64);
            ops::softmax_rows(&mut adj, node_count, node_count);

            let mut deg = vec![0.0f64; node_count];
            for i in 0..node_count {
                for j in 0..node_count {
                    deg[i] += adj[i * node_count + j];
                }
            }
            let mut ahat = vec![0.0f64; node_count * node_count];
            for i in 0..node_count {
                for j in 0..node_count {
                    ahat[i * node_count + j] =
                        adj[i * node_count + j] / (deg[i].sqrt() * deg[j].sqrt());
                }
            }
            let aggregated = ops::matmul(&ahat, x, node_count, node_count, node_dim);
            for m in 0..node_count {
                let row: Vec<f64> = (0..node_dim)
                    .map(|j| aggregated[m * node_dim + j] * w[m * node_dim + j])
                    .collect();
                let normed = ops::layer_norm_row(&row, ln_gain, ln_bias, LN_EPS as f64);
                for j in 0..node_dim {
                    out[(p * node_count + m) * node_dim + j] = ops::gelu(normed[j]);
                }
            }
        }
        out
    }

    fn transformer_layer(&self, tokens: &[f64], block: usize, t: usize) -> Vec<f64> {
        let cfg = &self.config;
        let d = cfg.dim;
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = |suffix: &str| -> &Vec<f64> {
            &self.p(&format!("blocks.{}.attn.{}", block, suffix)).data
        };

        let mut x1 = vec![0.0f64; t * d];
        for r in 0..t {
            let row = ops::layer_norm_row(
                &tokens[r * d..(r + 1) * d],
                p("ln1_gain"),
                p("ln1_bias"),
                LN_EPS as f64,
            );
            x1[r * d..(r + 1) * d].copy_from_slice(&row);
        }
        let q = ops::matmul(&x1, p("wq"), t, d, d);
        let k = ops::matmul(&x1, p("wk"), t, d, d);
        let v = ops::matmul(&x1, p("wv"), t, d, d);

        let mut merged = vec![0.0f64; t * d];
        for h in 0..heads {
            for i in 0..t {
                let mut scores = vec![0.0f64; t];
                for j in 0..t {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                    }
                    scores[j] = s * scale;
                }
                let attn = ops::softmax_row(&scores);
                for c in 0..dh {
                    let mut s = 0.0;
                    for j in 0..t {
                        s += attn[j] * v[j * d + h * dh + c];
                    }
                    merged[i * d + h * dh + c] = s;
                }
            }
        }
        let attended = ops::matmul(&merged, p("wo"), t, d, d);
        let x_prime: Vec<f64> = attended
            .iter()
            .zip(tokens.iter())
            .map(|(a, t)| a + t)
            .collect();

        let mut x2 = vec![0.0f64; t * d];
        for r in 0..t {
            let row = ops::layer_norm_row(
                &x_prime[r * d..(r + 1) * d],
                p("ln2_gain"),
                p("ln2_bias"),
                LN_EPS as f64,
            );
            x2[r * d..(r + 1) * d].copy_from_slice(&row);
        }
        let hidden = ops::matmul(&x2, p("mlp_w1"), t, d, MLP_RATIO * d);
        let hidden: Vec<f64> = hidden.into_iter().map(ops::gelu).collect();
        let fed = ops::matmul(&hidden, p("mlp_w2"), t, MLP_RATIO * d, d);
        fed.iter().zip(x_prime.iter()).map(|(f, x)| f + x).collect()
    }
}

/// Batch-hard triplet in f64, mirroring the selection scan exactly:
/// positives include the anchor, first-seen extrema win ties.
fn triplet_hard(features: &[f64], b: usize, d: usize, ids: &[u32], soft: bool) -> f64 {
    let dist = ops::pairwise_distances(features, b, d, DIST_EPS as f64);
    let mut total = 0.0;
    for i in 0..b {
        let mut ap = f64::MIN;
        let mut an = f64::MAX;
        for j in 0..b {
            let v = dist[i * b + j];
            if ids[j] == ids[i] {
                if v > ap {
                    ap = v;
                }
            } else if v < an {
                an = v;
            }
        }
        total += if soft {
            ops::softplus(ap - an)
        } else {
            (an - ap).max(0.0)
        };
    }
    total / b as f64
}

/// Same patch layout as the core: raster patches, pixel-major rows with
/// channels adjacent.
fn patchify(img: &[f64], c: usize, h: usize, w: usize, patch: usize) -> Vec<f64> {
    let (gh, gw) = (h / patch, w / patch);
    let row_w = patch * patch * c;
    let mut out = vec![0.0f64; gh * gw * row_w];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        out[row * row_w + (py * patch + px) * c + ch] =
                            img[ch * h * w + y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Node-sampling permutation: same definition as the core sampler.
fn sampler_perm(side: usize, sampling: usize, channels: usize) -> Vec<usize> {
    let blocks = side / sampling;
    let mut perm = Vec::with_capacity(side * side * channels);
    for by in 0..blocks {
        for bx in 0..blocks {
            for jy in 0..sampling {
                for jx in 0..sampling {
                    for ch in 0..channels {
                        let y = by * sampling + jy;
                        let x = bx * sampling + jx;
                        perm.push((y * side + x) * channels + ch);
                    }
                }
            }
        }
    }
    perm
}

/// out[row, k] = x[row, perm[k]] over `rows` rows of width `perm.len()`.
fn apply_perm(x: &[f64], perm: &[usize], rows: usize) -> Vec<f64> {
    let w = perm.len();
    let mut out = vec![0.0f64; rows * w];
    for r in 0..rows {
        for (k, &p) in perm.iter().enumerate() {
            out[r * w + k] = x[r * w + p];
        }
    }
    out
}

/// out[row, perm[k]] = x[row, k]: the inverse direction.
fn invert_perm_apply(x: &[f64], perm: &[usize], rows: usize) -> Vec<f64> {
    let w = perm.len();
    let mut out = vec![0.0f64; rows * w];
    for r in 0..rows {
        for (k, &p) in perm.iter().enumerate() {
            out[r * w + p] = x[r * w + k];
        }
    }
    out
}
