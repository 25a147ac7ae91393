//! Pre-LN transformer encoder layer: multi-head scaled dot-product
//! self-attention and a GELU MLP, each behind a residual, plus the hook
//! that adds the graph stream's patch view into the token sequence.

use crate::error::{Error, Result};
use crate::lcg::LN_EPS;
use crate::numerics::ops::concat;
use crate::numerics::Tensor;

/// Per-layer learnable parameters. Projections carry no bias; the two
/// layer norms have gain and bias.
#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// [D, r·D] and [r·D, D]; the expansion ratio r is fixed at 4.
    pub mlp_w1: Tensor,
    pub mlp_w2: Tensor,
}

/// MLP expansion ratio.
pub const MLP_RATIO: usize = 4;

/// Multi-head self-attention with output projection, also returning the
/// per-head attention matrices (used by tests and diagnostics).
pub fn mhsa_with_attn(
    tokens: &Tensor,
    params: &TransformerParams,
    heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (t, d) = (tokens.shape()[0], tokens.shape()[1]);
    if d % heads != 0 {
        return Err(Error::Config(format!(
            "width {} not divisible by {} heads",
            d, heads
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();

    let q = tokens.matmul(&params.wq)?;
    let k = tokens.matmul(&params.wk)?;
    let v = tokens.matmul(&params.wv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    let mut attentions = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_axis(1, h * dh, dh)?;
        let kh = k.slice_axis(1, h * dh, dh)?;
        let vh = v.slice_axis(1, h * dh, dh)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
        let attn = scores.softmax_last()?;
        head_outputs.push(attn.matmul(&vh)?);
        attentions.push(attn);
    }
    let refs: Vec<&Tensor> = head_outputs.iter().collect();
    let merged = concat(&refs, 1)?;
    debug_assert_eq!(merged.shape(), [t, d]);
    Ok((merged.matmul(&params.wo)?, attentions))
}

/// Multi-head self-attention: per head `softmax(QKᵀ/√(D/h))·V`, heads
/// concatenated, then output-projected.
pub fn mhsa(tokens: &Tensor, params: &TransformerParams, heads: usize) -> Result<Tensor> {
    Ok(mhsa_with_attn(tokens, params, heads)?.0)
}

fn mlp(x: &Tensor, params: &TransformerParams) -> Result<Tensor> {
    x.matmul(&params.mlp_w1)?.gelu()?.matmul(&params.mlp_w2)
}

/// One encoder layer over `[N+1, D]` tokens.
///
/// When `local_patch_view` is present (shape `[N, D]`), it is added to the
/// patch rows first — the class row is untouched. Then
/// `X' = MSA(LN(X)) + X` and `Y = MLP(LN(X')) + X'`.
pub fn layer_forward(
    tokens: &Tensor,
    local_patch_view: Option<&Tensor>,
    params: &TransformerParams,
    heads: usize,
) -> Result<Tensor> {
    let t = tokens.shape()[0];
    let x = match local_patch_view {
        Some(local) => {
            if local.shape() != [t - 1, tokens.shape()[1]] {
                return Err(Error::ShapeMismatch {
                    op: "layer_forward",
                    lhs: tokens.shape().to_vec(),
                    rhs: local.shape().to_vec(),
                });
            }
            let class_row = tokens.slice_axis(0, 0, 1)?;
            let patch_rows = tokens.slice_axis(0, 1, t - 1)?;
            concat(&[&class_row, &patch_rows.add(local)?], 0)?
        }
        None => tokens.clone(),
    };
    let attended = mhsa(&x.layer_norm(&params.ln1_gain, &params.ln1_bias, LN_EPS)?, params, heads)?;
    let x_prime = attended.add(&x)?;
    let fed = mlp(
        &x_prime.layer_norm(&params.ln2_gain, &params.ln2_bias, LN_EPS)?,
        params,
    )?;
    fed.add(&x_prime)
}
