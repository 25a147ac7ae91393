//! Image → token sequence: non-overlapping P×P patches, linear projection
//! to the model width, a prepended learnable class token, and learnable
//! position embeddings added once before the first block.

use crate::error::{Error, Result};
use crate::numerics::ops::concat;
use crate::numerics::Tensor;

/// Splits an image `[C, H, W]` into rows of flattened P×P patches.
///
/// Row `i` is patch `i` in raster order over the patch grid; within a patch,
/// values are laid out pixel-major in raster order with the channels of each
/// pixel adjacent. The layout is lossless (`unpatchify` inverts it).
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    if img.ndim() != 3 {
        return Err(Error::Config(format!(
            "patchify expects [C, H, W], got {:?}",
            img.shape()
        )));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by patch size {}",
            h, w, patch
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let row_w = patch * patch * c;
    let mut data = vec![0.0f32; n * row_w];
    let src = img.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        data[row * row_w + (py * patch + px) * c + ch] =
                            src[ch * h * w + y * w + x];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, row_w], data)
}

/// Inverse of [`patchify`]; bit-exact round trip.
pub fn unpatchify(rows: &Tensor, channels: usize, h: usize, w: usize, patch: usize) -> Result<Tensor> {
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let row_w = patch * patch * channels;
    if rows.shape() != [n, row_w] {
        return Err(Error::Config(format!(
            "unpatchify expects [{}, {}], got {:?}",
            n,
            row_w,
            rows.shape()
        )));
    }
    let mut data = vec![0.0f32; channels * h * w];
    let src = rows.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..channels {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        data[ch * h * w + y * w + x] =
                            src[row * row_w + (py * patch + px) * channels + ch];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Learnable parameters of the patch embedding.
#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    /// Projection from flattened patch (P²·C) to model width D. No bias.
    pub proj: Tensor,
    /// Class token, shape [1, D].
    pub class_token: Tensor,
    /// Position embeddings for class + patch tokens, shape [N+1, D].
    pub pos: Tensor,
}

/// Projects patch rows `[N, P²·C]` to width D, prepends the class token and
/// adds position embeddings: output `[N+1, D]` with the class token at row 0.
pub fn embed(patch_rows: &Tensor, params: &EmbeddingParams) -> Result<Tensor> {
    let projected = patch_rows.matmul(&params.proj)?;
    let tokens = concat(&[&params.class_token, &projected], 0)?;
    tokens.add(&params.pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_2x2_single_channel_p1() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let rows = patchify(&img, 1).unwrap();
        assert_eq!(rows.shape(), [4, 1]);
        assert_eq!(rows.data(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patchify_shape_32x32x3_p8() {
        let img = Tensor::zeros(&[3, 32, 32]);
        let rows = patchify(&img, 8).unwrap();
        assert_eq!(rows.shape(), [16, 192]);
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = Tensor::zeros(&[3, 30, 32]);
        assert!(matches!(patchify(&img, 8), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_round_trip_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let img = Tensor::from_vec(&[3, 16, 16], data).unwrap();
        for patch in [1, 2, 4, 8, 16] {
            let rows = patchify(&img, patch).unwrap();
            let back = unpatchify(&rows, 3, 16, 16, patch).unwrap();
            assert!(back.bit_eq(&img), "round trip failed for P={}", patch);
        }
    }

    fn toy_params(n: usize, in_w: usize, d: usize) -> EmbeddingParams {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        EmbeddingParams {
            proj: Tensor::trunc_normal(&[in_w, d], 0.02, &mut rng),
            class_token: Tensor::trunc_normal(&[1, d], 0.02, &mut rng),
            pos: Tensor::trunc_normal(&[n + 1, d], 0.02, &mut rng),
        }
    }

    #[test]
    fn embed_zero_image_zero_pos() {
        let mut p = toy_params(4, 6, 8);
        p.pos = Tensor::zeros(&[5, 8]);
        let rows = Tensor::zeros(&[4, 6]);
        let tokens = embed(&rows, &p).unwrap();
        assert_eq!(tokens.shape(), [5, 8]);
        // class token row unchanged, patch rows all zero
        assert_eq!(&tokens.data()[..8], p.class_token.data());
        assert!(tokens.data()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_output_shape() {
        let p = toy_params(16, 192, 64);
        let rows = Tensor::zeros(&[16, 192]);
        let tokens = embed(&rows, &p).unwrap();
        assert_eq!(tokens.shape(), [17, 64]);
    }

    #[test]
    fn embed_permutation_equivariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let p = toy_params(n, 4, 8);
        let data: Vec<f32> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rows = Tensor::from_vec(&[n, 4], data).unwrap();
        let base = embed(&rows, &p).unwrap();

        // cyclic shift of patch rows together with pos rows 1..N
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let shuffled_rows = {
            let mut d = vec![0.0f32; n * 4];
            for (i, &s) in perm.iter().enumerate() {
                d[i * 4..(i + 1) * 4].copy_from_slice(&rows.data()[s * 4..(s + 1) * 4]);
            }
            Tensor::from_vec(&[n, 4], d).unwrap()
        };
        let shuffled_pos = {
            let d0 = p.pos.data();
            let mut d = d0[..8].to_vec();
            for &s in &perm {
                d.extend_from_slice(&d0[(s + 1) * 8..(s + 2) * 8]);
            }
            Tensor::from_vec(&[n + 1, 8], d).unwrap()
        };
        let p2 = EmbeddingParams {
            proj: p.proj.clone(),
            class_token: p.class_token.clone(),
            pos: shuffled_pos,
        };
        let permuted = embed(&shuffled_rows, &p2).unwrap();

        // row 0 identical, rows 1.. permuted identically
        assert_eq!(&permuted.data()[..8], &base.data()[..8]);
        for (i, &s) in perm.iter().enumerate() {
            assert_eq!(
                &permuted.data()[(i + 1) * 8..(i + 2) * 8],
                &base.data()[(s + 1) * 8..(s + 2) * 8]
            );
        }
    }
}
