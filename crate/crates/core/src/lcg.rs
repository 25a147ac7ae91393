//! Local correlation graph: every patch is sampled into n spatial nodes,
//! a cosine-similarity adjacency with row softmax is built over them, one
//! symmetric-normalized propagation step with a shared elementwise weight
//! aggregates them, and the result passes through LN + GELU.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f32 = 1e-6;
/// Guard for zero-norm node vectors in cosine similarities.
pub const COSINE_EPS: f32 = 1e-8;

/// Maps between the flat patch view `[N, width]` and the node view
/// `[N, n, d]` of a stage.
///
/// The patch vector is read as a (side × side) spatial grid carrying
/// `channels` values per cell; a node is one (sampling × sampling) block of
/// that grid, flattened in raster order with channels kept adjacent. Nodes
/// are numbered in raster order over the block grid. Both directions are
/// pure index permutations, so `desample(sample(x))` is bit-exact.
#[derive(Debug, Clone)]
pub struct NodeSampler {
    side: usize,
    sampling: usize,
    channels: usize,
    /// perm[m·d + j] = flat index into the patch vector for node m, value j.
    perm: Vec<usize>,
}

impl NodeSampler {
    pub fn new(side: usize, sampling: usize, channels: usize) -> Result<Self> {
        if sampling == 0 || side % sampling != 0 {
            return Err(Error::Config(format!(
                "sampling size {} does not tile patch side {}",
                sampling, side
            )));
        }
        let blocks = side / sampling;
        let node_dim = sampling * sampling * channels;
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
        debug_assert_eq!(perm.len(), blocks * blocks * node_dim);
        Ok(Self {
            side,
            sampling,
            channels,
            perm,
        })
    }

    /// Node count n = side² / sampling².
    pub fn node_count(&self) -> usize {
        (self.side / self.sampling) * (self.side / self.sampling)
    }

    /// Per-node width d = sampling² · channels.
    pub fn node_dim(&self) -> usize {
        self.sampling * self.sampling * self.channels
    }

    /// Patch-vector width n·d.
    pub fn width(&self) -> usize {
        self.perm.len()
    }

    /// `[N, width]` → `[N, n, d]`.
    pub fn sample(&self, patch_rows: &Tensor) -> Result<Tensor> {
        let n_patches = patch_rows.shape()[0];
        if patch_rows.ndim() != 2 || patch_rows.shape()[1] != self.width() {
            return Err(Error::Config(format!(
                "sample expects [N, {}], got {:?}",
                self.width(),
                patch_rows.shape()
            )));
        }
        patch_rows
            .permute_last(&self.perm)?
            .reshape(&[n_patches, self.node_count(), self.node_dim()])
    }

    /// `[N, n, d]` → `[N, width]`; exact inverse of [`sample`](Self::sample).
    pub fn desample(&self, nodes: &Tensor) -> Result<Tensor> {
        let n_patches = nodes.shape()[0];
        if nodes.ndim() != 3
            || nodes.shape()[1] != self.node_count()
            || nodes.shape()[2] != self.node_dim()
        {
            return Err(Error::Config(format!(
                "desample expects [N, {}, {}], got {:?}",
                self.node_count(),
                self.node_dim(),
                nodes.shape()
            )));
        }
        let mut inv = vec![0usize; self.perm.len()];
        for (k, &p) in self.perm.iter().enumerate() {
            inv[p] = k;
        }
        nodes
            .reshape(&[n_patches, self.width()])?
            .permute_last(&inv)
    }
}

/// Raw-pixel entry parameters: the linear projection of sampled pixel
/// blocks plus the per-node position embedding. Present only in the first
/// block; later blocks resample the patch view directly.
#[derive(Debug, Clone)]
pub struct LcgEntry {
    /// [d_raw, d'] projection of flattened pixel blocks.
    pub proj: Tensor,
    /// [n, d'] learnable node position embedding, broadcast over patches.
    pub pos: Tensor,
}

/// Per-block graph parameters.
#[derive(Debug, Clone)]
pub struct LcgParams {
    pub entry: Option<LcgEntry>,
    /// [n, d'] aggregation weight, shared across the N graphs of an image.
    pub weight: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

/// Projects raw sampled nodes `[N, n, d_raw]` to `[N, n, d']` and adds the
/// node position embedding.
pub fn embed_nodes(raw: &Tensor, entry: &LcgEntry) -> Result<Tensor> {
    raw.matmul(&entry.proj)?.add_bcast(&entry.pos)
}

/// Row-softmax over cosine similarities: `A[i, j] = exp(cos(vᵢ, vⱼ)) /
/// Σₖ exp(cos(vᵢ, vₖ))` per patch. Rows sum to 1 and the diagonal is each
/// row's maximum since cos(v, v) = 1 is maximal.
pub fn build_adjacency(nodes: &Tensor) -> Result<Tensor> {
    nodes.cosine_matrix(COSINE_EPS)?.softmax_last()
}

/// One propagation step: `U = (D^{-1/2} A D^{-1/2} X) ⊙ W` with D the
/// diagonal row-degree matrix of A and W broadcast over patches. Softmax
/// rows make A row-stochastic, so D = I up to rounding, but the general
/// path is what runs.
pub fn aggregate(nodes: &Tensor, adjacency: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let degree = adjacency.sum_axis(2)?;
    let dinv = degree.rsqrt()?;
    let normalized = adjacency.scale_rows(&dinv)?.scale_cols(&dinv)?;
    normalized.matmul(nodes)?.hadamard_bcast(weight)
}

/// LN over the node feature axis, then GELU.
pub fn activate(aggregated: &Tensor, ln_gain: &Tensor, ln_bias: &Tensor) -> Result<Tensor> {
    aggregated.layer_norm(ln_gain, ln_bias, LN_EPS)?.gelu()
}

impl LcgParams {
    /// Adjacency → aggregation → activation on an already-fused node state.
    pub fn apply(&self, fused: &Tensor) -> Result<Tensor> {
        let adjacency = build_adjacency(fused)?;
        let aggregated = aggregate(fused, &adjacency, &self.weight)?;
        activate(&aggregated, &self.ln_gain, &self.ln_bias)
    }
}

/// Standard block input: the previous local state, plus the previous
/// transformer patch rows sampled into the node view when the topology
/// feeds global features into the graph. Fusion is elementwise addition.
pub fn lcg_forward(
    local_in: &Tensor,
    global_patch_rows: Option<&Tensor>,
    sampler: &NodeSampler,
    params: &LcgParams,
) -> Result<Tensor> {
    let fused = match global_patch_rows {
        Some(rows) => local_in.add(&sampler.sample(rows)?)?,
        None => local_in.clone(),
    };
    params.apply(&fused)
}

/// First-block input: raw patch pixels sampled into blocks, projected and
/// position-embedded. No global fusion happens here.
pub fn lcg_entry_forward(
    raw_patch_rows: &Tensor,
    raw_sampler: &NodeSampler,
    params: &LcgParams,
) -> Result<Tensor> {
    let entry = params.entry.as_ref().ok_or_else(|| {
        Error::Contract("entry forward called on a block without entry params".into())
    })?;
    let raw_nodes = raw_sampler.sample(raw_patch_rows)?;
    let embedded = embed_nodes(&raw_nodes, entry)?;
    params.apply(&embedded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sampler_table_shapes() {
        // 16×16 patches at width 768: channels = 768/256 = 3.
        let s2 = NodeSampler::new(16, 2, 3).unwrap();
        assert_eq!((s2.node_count(), s2.node_dim()), (64, 12));
        let s4 = NodeSampler::new(16, 4, 3).unwrap();
        assert_eq!((s4.node_count(), s4.node_dim()), (16, 48));
        let s8 = NodeSampler::new(16, 8, 3).unwrap();
        assert_eq!((s8.node_count(), s8.node_dim()), (4, 192));
    }

    #[test]
    fn sampler_degenerate_whole_patch() {
        let s = NodeSampler::new(4, 4, 2).unwrap();
        assert_eq!(s.node_count(), 1);
        let rows = rand_tensor(&[3, 32], 1);
        let nodes = s.sample(&rows).unwrap();
        assert_eq!(nodes.shape(), [3, 1, 32]);
        // single node equals the whole patch vector
        assert_eq!(nodes.data(), rows.data());
    }

    #[test]
    fn sampler_rejects_bad_tiling() {
        assert!(NodeSampler::new(8, 3, 1).is_err());
    }

    #[test]
    fn sample_desample_round_trip_bit_exact() {
        for (side, sampling, channels) in [(8, 2, 1), (8, 4, 1), (16, 2, 3), (4, 2, 5)] {
            let s = NodeSampler::new(side, sampling, channels).unwrap();
            let rows = rand_tensor(&[5, s.width()], side as u64 * 31 + sampling as u64);
            let back = s.desample(&s.sample(&rows).unwrap()).unwrap();
            assert!(back.bit_eq(&rows));
        }
    }

    #[test]
    fn sample_extracts_spatial_blocks() {
        // 4×4 grid, 1 channel, 2×2 blocks: node 0 must hold cells
        // (0,0) (0,1) (1,0) (1,1) of the grid.
        let s = NodeSampler::new(4, 2, 1).unwrap();
        let rows = Tensor::from_vec(&[1, 16], (0..16).map(|v| v as f32).collect()).unwrap();
        let nodes = s.sample(&rows).unwrap();
        assert_eq!(&nodes.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&nodes.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn embed_nodes_zero_and_identity_cases() {
        let entry = LcgEntry {
            proj: Tensor::zeros(&[6, 4]),
            pos: Tensor::zeros(&[3, 4]),
        };
        let raw = Tensor::zeros(&[2, 3, 6]);
        let out = embed_nodes(&raw, &entry).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        // identity projection (d == d'), zero position embedding
        let eye = {
            let mut d = vec![0.0f32; 16];
            for i in 0..4 {
                d[i * 4 + i] = 1.0;
            }
            Tensor::from_vec(&[4, 4], d).unwrap()
        };
        let entry = LcgEntry {
            proj: eye,
            pos: Tensor::zeros(&[3, 4]),
        };
        let raw = rand_tensor(&[2, 3, 4], 9);
        let out = embed_nodes(&raw, &entry).unwrap();
        assert!(out.max_abs_diff(&raw).unwrap() < 1e-6);
    }

    #[test]
    fn embed_nodes_stage1_shape() {
        // n=4 nodes of width 12 mapping to 12: [2, 4, 12] -> [2, 4, 12]
        let entry = LcgEntry {
            proj: rand_tensor(&[12, 12], 2),
            pos: rand_tensor(&[4, 12], 3),
        };
        let raw = rand_tensor(&[2, 4, 12], 4);
        assert_eq!(embed_nodes(&raw, &entry).unwrap().shape(), [2, 4, 12]);
    }

    #[test]
    fn adjacency_identical_nodes_is_uniform() {
        let one = rand_tensor(&[1, 1, 5], 7);
        let mut d = Vec::new();
        for _ in 0..4 {
            d.extend_from_slice(one.data());
        }
        let nodes = Tensor::from_vec(&[1, 4, 5], d).unwrap();
        let adj = build_adjacency(&nodes).unwrap();
        for &v in adj.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn adjacency_orthogonal_pair_matches_softmax() {
        let nodes = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let adj = build_adjacency(&nodes).unwrap();
        // rows are softmax([1, 0]) in f64
        let e = 1f64.exp();
        let hi = (e / (e + 1.0)) as f32;
        let lo = (1.0 / (e + 1.0)) as f32;
        assert!((adj.data()[0] - hi).abs() < 1e-6);
        assert!((adj.data()[1] - lo).abs() < 1e-6);
        assert!((adj.data()[2] - lo).abs() < 1e-6);
        assert!((adj.data()[3] - hi).abs() < 1e-6);
    }

    #[test]
    fn adjacency_rows_sum_one_diag_max() {
        for seed in 0..20 {
            let nodes = rand_tensor(&[3, 6, 4], 100 + seed);
            let adj = build_adjacency(&nodes).unwrap();
            for b in 0..3 {
                for i in 0..6 {
                    let row = &adj.data()[(b * 6 + i) * 6..(b * 6 + i + 1) * 6];
                    let sum: f32 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|&v| v > 0.0));
                    let max = row.iter().copied().fold(f32::MIN, f32::max);
                    assert_eq!(row[i], max);
                }
            }
        }
    }

    #[test]
    fn adjacency_zero_norm_node_is_guarded() {
        let mut data = rand_tensor(&[1, 3, 4], 55).data().to_vec();
        for v in &mut data[4..8] {
            *v = 0.0;
        }
        let nodes = Tensor::from_vec(&[1, 3, 4], data).unwrap();
        let adj = build_adjacency(&nodes).unwrap();
        assert!(adj.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn adjacency_invariant_to_per_node_scaling() {
        let nodes = rand_tensor(&[2, 4, 5], 77);
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let mut scaled = nodes.data().to_vec();
        for b in 0..2 {
            for m in 0..4 {
                let c: f32 = rng.gen_range(0.1..5.0);
                for v in &mut scaled[(b * 4 + m) * 5..(b * 4 + m + 1) * 5] {
                    *v *= c;
                }
            }
        }
        let scaled = Tensor::from_vec(&[2, 4, 5], scaled).unwrap();
        let a1 = build_adjacency(&nodes).unwrap();
        let a2 = build_adjacency(&scaled).unwrap();
        assert!(a1.max_abs_diff(&a2).unwrap() < 1e-5);
    }

    #[test]
    fn aggregate_reduces_to_row_stochastic_shortcut() {
        let nodes = rand_tensor(&[2, 4, 3], 21);
        let adj = build_adjacency(&nodes).unwrap();
        let weight = rand_tensor(&[4, 3], 22);
        let general = aggregate(&nodes, &adj, &weight).unwrap();
        // shortcut: degrees of a row-stochastic A are 1, so U = (A X) ⊙ W
        let shortcut = adj.matmul(&nodes).unwrap().hadamard_bcast(&weight).unwrap();
        assert!(general.max_abs_diff(&shortcut).unwrap() < 1e-6);
    }

    #[test]
    fn aggregate_identity_fixed_point() {
        // identical nodes + uniform adjacency + all-ones weight keeps X
        let one = rand_tensor(&[1, 1, 3], 33);
        let mut d = Vec::new();
        for _ in 0..4 {
            d.extend_from_slice(one.data());
        }
        let nodes = Tensor::from_vec(&[1, 4, 3], d).unwrap();
        let adj = Tensor::full(&[1, 4, 4], 0.25).unwrap();
        let weight = Tensor::ones(&[4, 3]);
        let out = aggregate(&nodes, &adj, &weight).unwrap();
        assert!(out.max_abs_diff(&nodes).unwrap() < 1e-6);
    }

    #[test]
    fn aggregate_matches_explicit_loop_oracle() {
        let nodes = rand_tensor(&[1, 3, 4], 41);
        let adj = build_adjacency(&nodes).unwrap();
        let weight = rand_tensor(&[3, 4], 42);
        let out = aggregate(&nodes, &adj, &weight).unwrap();

        // explicit loops in f64: D, D^{-1/2} A D^{-1/2}, matmul, Hadamard
        let (n, d) = (3usize, 4usize);
        let a = adj.data();
        let x = nodes.data();
        let w = weight.data();
        let mut deg = vec![0.0f64; n];
        for i in 0..n {
            for j in 0..n {
                deg[i] += a[i * n + j] as f64;
            }
        }
        let mut ahat = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                ahat[i * n + j] = a[i * n + j] as f64 / (deg[i].sqrt() * deg[j].sqrt());
            }
        }
        for i in 0..n {
            for k in 0..d {
                let mut s = 0.0f64;
                for j in 0..n {
                    s += ahat[i * n + j] * x[j * d + k] as f64;
                }
                let expect = s * w[i * d + k] as f64;
                assert!((out.data()[i * d + k] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn activate_constant_input_yields_gelu_bias() {
        let u = Tensor::full(&[2, 3, 4], 1.7).unwrap();
        let gain = rand_tensor(&[4], 51);
        let bias = rand_tensor(&[4], 52);
        let out = activate(&u, &gain, &bias).unwrap();
        assert_eq!(out.shape(), u.shape());
        // constant vectors normalize to zero, so the output is GELU(bias)
        let expect = bias.gelu().unwrap();
        for i in 0..(2 * 3) {
            for j in 0..4 {
                assert!((out.data()[i * 4 + j] - expect.data()[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lcg_forward_zero_global_equals_absent() {
        let s = NodeSampler::new(4, 2, 1).unwrap();
        let params = LcgParams {
            entry: None,
            weight: rand_tensor(&[4, 4], 61),
            ln_gain: Tensor::ones(&[4]),
            ln_bias: Tensor::zeros(&[4]),
        };
        let local = rand_tensor(&[3, 4, 4], 62);
        let absent = lcg_forward(&local, None, &s, &params).unwrap();
        let zeros = Tensor::zeros(&[3, 16]);
        let with_zero = lcg_forward(&local, Some(&zeros), &s, &params).unwrap();
        assert!(with_zero.bit_eq(&absent));
    }

    #[test]
    fn lcg_forward_fusion_is_additive() {
        let s = NodeSampler::new(4, 2, 1).unwrap();
        let params = LcgParams {
            entry: None,
            weight: rand_tensor(&[4, 4], 71),
            ln_gain: Tensor::ones(&[4]),
            ln_bias: Tensor::zeros(&[4]),
        };
        let local = rand_tensor(&[2, 4, 4], 72);
        let g1 = rand_tensor(&[2, 16], 73);
        let g2 = rand_tensor(&[2, 16], 74);
        let summed = g1.add(&g2).unwrap();
        let out = lcg_forward(&local, Some(&summed), &s, &params).unwrap();
        // recompute from the fused input directly
        let fused = local
            .add(&s.sample(&g1).unwrap())
            .unwrap()
            .add(&s.sample(&g2).unwrap())
            .unwrap();
        let direct = params.apply(&fused).unwrap();
        assert!(out.max_abs_diff(&direct).unwrap() < 1e-6);
    }

    #[test]
    fn node_permutation_equivariance() {
        // permuting nodes together with rows of pos and weight permutes
        // the output nodes identically
        let n = 4;
        let d = 3;
        let entry = LcgEntry {
            proj: rand_tensor(&[5, d], 81),
            pos: rand_tensor(&[n, d], 82),
        };
        let params = LcgParams {
            entry: Some(entry),
            weight: rand_tensor(&[n, d], 83),
            ln_gain: rand_tensor(&[d], 84),
            ln_bias: rand_tensor(&[d], 85),
        };
        let raw = rand_tensor(&[2, n, 5], 86);

        let fwd = |raw: &Tensor, p: &LcgParams| -> Tensor {
            let embedded = embed_nodes(raw, p.entry.as_ref().unwrap()).unwrap();
            p.apply(&embedded).unwrap()
        };
        let base = fwd(&raw, &params);

        let perm: Vec<usize> = vec![2, 0, 3, 1];
        let permute_rows = |t: &Tensor, rows: usize, w: usize, batch: usize| -> Tensor {
            let mut out = vec![0.0f32; t.numel()];
            for b in 0..batch {
                for (i, &s) in perm.iter().enumerate() {
                    out[(b * rows + i) * w..(b * rows + i + 1) * w]
                        .copy_from_slice(&t.data()[(b * rows + s) * w..(b * rows + s + 1) * w]);
                }
            }
            Tensor::from_vec(t.shape(), out).unwrap()
        };
        let raw_p = permute_rows(&raw, n, 5, 2);
        let params_p = LcgParams {
            entry: Some(LcgEntry {
                proj: params.entry.as_ref().unwrap().proj.clone(),
                pos: permute_rows(&params.entry.as_ref().unwrap().pos, n, d, 1),
            }),
            weight: permute_rows(&params.weight, n, d, 1),
            ln_gain: params.ln_gain.clone(),
            ln_bias: params.ln_bias.clone(),
        };
        let permuted = fwd(&raw_p, &params_p);
        let expected = permute_rows(&base, n, d, 2);
        assert!(permuted.max_abs_diff(&expected).unwrap() < 1e-5);
    }
}
