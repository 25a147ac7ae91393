//! BNNeck head application and the training objective: cross-entropy on
//! post-BN features plus batch-hard triplet on pre-BN features.

use crate::error::{Error, Result};
use crate::model::{HeadParams, BN_EPS};
use crate::numerics::ops::BatchStats;
use crate::numerics::Tensor;

pub use crate::numerics::ops::cross_entropy;

/// Stabilizer added inside the pairwise-distance square root; keeps the
/// zero diagonal differentiable while perturbing distances by at most 1e-6.
pub const DIST_EPS: f32 = 1e-12;

/// BNNeck output: the raw feature feeds the triplet loss, the normalized
/// one feeds cross-entropy through the bias-free classifier.
pub struct BnneckOutput {
    pub triplet_feature: Tensor,
    pub ce_feature: Tensor,
    pub logits: Tensor,
    pub batch_stats: Option<BatchStats>,
}

/// Applies the BNNeck: train mode normalizes with batch statistics (and
/// returns them for the running-stat update), inference mode with frozen
/// running statistics.
pub fn bnneck(features: &Tensor, head: &HeadParams, train: bool) -> Result<BnneckOutput> {
    let (ce_feature, batch_stats) = if train {
        let (f, s) = features.batch_norm_train(&head.bn_gain, &head.bn_bias, BN_EPS)?;
        (f, Some(s))
    } else {
        (
            features.batch_norm_infer(
                &head.bn_gain,
                &head.bn_bias,
                &head.running_mean,
                &head.running_var,
                BN_EPS,
            )?,
            None,
        )
    };
    let logits = ce_feature.matmul(&head.classifier)?;
    Ok(BnneckOutput {
        triplet_feature: features.clone(),
        ce_feature,
        logits,
        batch_stats,
    })
}

/// Which triplet formulation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletMode {
    /// Soft margin with hard mining: mean softplus(d_ap − d_an). Default.
    Soft,
    /// The hinge exactly as printed, mean max(d_an − d_ap, 0); kept for
    /// auditability of the reversed ordering.
    Literal,
}

impl std::str::FromStr for TripletMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(TripletMode::Soft),
            "literal" => Ok(TripletMode::Literal),
            _ => Err(Error::Config(format!("unknown triplet mode '{}'", s))),
        }
    }
}

pub struct TripletOutcome {
    pub loss: Tensor,
    /// Anchors whose label appears only once in the batch; they contribute
    /// through their hardest negative only.
    pub singleton_anchors: usize,
}

/// Batch-hard triplet over `[B, D]` features: per anchor, the farthest
/// same-label sample and the closest different-label sample (Euclidean,
/// non-squared).
pub fn triplet_hard(features: &Tensor, labels: &[u32], mode: TripletMode) -> Result<TripletOutcome> {
    if features.ndim() != 2 {
        return Err(Error::InvalidArg {
            op: "triplet_hard",
            msg: format!("expected [B, D] features, got {:?}", features.shape()),
        });
    }
    let b = features.shape()[0];
    if labels.len() != b {
        return Err(Error::InvalidArg {
            op: "triplet_hard",
            msg: format!("{} labels for batch of {}", labels.len(), b),
        });
    }
    let dist = features.pairwise_distances(DIST_EPS)?;
    let d = dist.data();

    let mut ap_pairs = Vec::with_capacity(b);
    let mut an_pairs = Vec::with_capacity(b);
    let mut singleton_anchors = 0usize;
    for i in 0..b {
        let mut hardest_pos = i;
        let mut pos_dist = f32::MIN;
        let mut hardest_neg = usize::MAX;
        let mut neg_dist = f32::MAX;
        let mut has_other_pos = false;
        for j in 0..b {
            let v = d[i * b + j];
            if labels[j] == labels[i] {
                if j != i {
                    has_other_pos = true;
                }
                if v > pos_dist {
                    pos_dist = v;
                    hardest_pos = j;
                }
            } else if v < neg_dist {
                neg_dist = v;
                hardest_neg = j;
            }
        }
        if hardest_neg == usize::MAX {
            return Err(Error::Contract(
                "triplet_hard: batch holds a single label, no negatives exist".into(),
            ));
        }
        if !has_other_pos {
            singleton_anchors += 1;
        }
        ap_pairs.push((i, hardest_pos));
        an_pairs.push((i, hardest_neg));
    }

    let d_ap = dist.select_pairs(&ap_pairs)?;
    let d_an = dist.select_pairs(&an_pairs)?;
    let loss = match mode {
        TripletMode::Soft => d_ap.sub(&d_an)?.softplus()?.mean_all()?,
        TripletMode::Literal => d_an.sub(&d_ap)?.relu()?.mean_all()?,
    };
    Ok(TripletOutcome {
        loss,
        singleton_anchors,
    })
}

/// Weighted objective α·ce + β·triplet.
pub fn total_loss(ce: &Tensor, triplet: &Tensor, alpha: f32, beta: f32) -> Result<Tensor> {
    ce.scale(alpha)?.add(&triplet.scale(beta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GitConfig, GitModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn desk_head(seed: u64) -> HeadParams {
        GitModel::init(GitConfig::desk(4), seed).unwrap().head
    }

    #[test]
    fn bnneck_inference_with_unit_stats_is_affine_only() {
        let head = desk_head(1);
        let f = rand_tensor(&[3, 64], 2);
        let out = bnneck(&f, &head, false).unwrap();
        // fresh running stats are mean 0 / var 1, so BN is x·γ/√(1+eps) + β
        let scale = 1.0 / (1.0f32 + BN_EPS).sqrt();
        for r in 0..3 {
            for j in 0..64 {
                let expect =
                    f.data()[r * 64 + j] * scale * head.bn_gain.data()[j] + head.bn_bias.data()[j];
                assert!((out.ce_feature.data()[r * 64 + j] - expect).abs() < 1e-6);
            }
        }
        assert_eq!(out.logits.shape(), [3, 4]);
        assert!(out.batch_stats.is_none());
    }

    #[test]
    fn bnneck_train_matches_batch_statistics_oracle() {
        let head = desk_head(3);
        let f = rand_tensor(&[8, 64], 4);
        let out = bnneck(&f, &head, true).unwrap();
        let stats = out.batch_stats.unwrap();
        for j in 0..64 {
            let col: Vec<f32> = (0..8).map(|r| f.data()[r * 64 + j]).collect();
            let mean = col.iter().sum::<f32>() / 8.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
            assert!((stats.mean[j] - mean).abs() < 1e-5);
            assert!((stats.var[j] - var).abs() < 1e-5);
            for (r, &v) in col.iter().enumerate() {
                let expect = (v - mean) / (var + BN_EPS).sqrt() * head.bn_gain.data()[j]
                    + head.bn_bias.data()[j];
                assert!((out.ce_feature.data()[r * 64 + j] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn bn_train_and_infer_agree_when_running_equals_batch() {
        let mut head = desk_head(5);
        let f = rand_tensor(&[6, 64], 6);
        let train = bnneck(&f, &head, true).unwrap();
        let stats = train.batch_stats.unwrap();
        head.running_mean = Tensor::from_vec(&[64], stats.mean.clone()).unwrap();
        head.running_var = Tensor::from_vec(&[64], stats.var.clone()).unwrap();
        let infer = bnneck(&f, &head, false).unwrap();
        assert!(train.ce_feature.max_abs_diff(&infer.ce_feature).unwrap() < 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let logits = Tensor::zeros(&[3, 4]);
        let loss = cross_entropy(&logits, &[0, 1, 2]).unwrap();
        assert!((loss.item().unwrap() - 4.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_dominant_logit_approaches_zero() {
        let mut data = vec![0.0f32; 2 * 3];
        data[0] = 30.0;
        data[3 + 1] = 30.0;
        let logits = Tensor::from_vec(&[2, 3], data).unwrap();
        let loss = cross_entropy(&logits, &[0, 1]).unwrap();
        assert!(loss.item().unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[0, 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn triplet_identical_features_gives_ln2() {
        let f = Tensor::from_vec(&[4, 3], vec![0.5; 12]).unwrap();
        let out = triplet_hard(&f, &[0, 0, 1, 1], TripletMode::Soft).unwrap();
        assert!((out.loss.item().unwrap() - 2.0f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn triplet_separated_clusters_approaches_zero() {
        let mut data = Vec::new();
        for i in 0..6 {
            let offset = if i < 3 { 0.0 } else { 100.0 };
            data.extend_from_slice(&[offset + 0.01 * i as f32, offset]);
        }
        let f = Tensor::from_vec(&[6, 2], data).unwrap();
        let out = triplet_hard(&f, &[0, 0, 0, 1, 1, 1], TripletMode::Soft).unwrap();
        assert!(out.loss.item().unwrap() < 1e-6);
    }

    #[test]
    fn triplet_six_point_case_matches_exhaustive_scan() {
        let f = Tensor::from_vec(
            &[6, 2],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 5.0, 5.0, 6.0, 5.0, 5.0, 7.0],
        )
        .unwrap();
        let labels = [0u32, 0, 0, 1, 1, 1];
        let out = triplet_hard(&f, &labels, TripletMode::Soft).unwrap();

        // brute force: all-pairs distances, hardest pair per anchor
        let d = |i: usize, j: usize| -> f64 {
            let dx = f.data()[i * 2] as f64 - f.data()[j * 2] as f64;
            let dy = f.data()[i * 2 + 1] as f64 - f.data()[j * 2 + 1] as f64;
            (dx * dx + dy * dy + DIST_EPS as f64).sqrt()
        };
        let mut total = 0.0f64;
        for i in 0..6 {
            let mut ap: f64 = f64::MIN;
            let mut an: f64 = f64::MAX;
            for j in 0..6 {
                if labels[j] == labels[i] {
                    ap = ap.max(d(i, j));
                } else {
                    an = an.min(d(i, j));
                }
            }
            let x = ap - an;
            total += x.max(0.0) + (-x.abs()).exp().ln_1p();
        }
        let expect = (total / 6.0) as f32;
        assert!((out.loss.item().unwrap() - expect).abs() < 1e-5);
    }

    #[test]
    fn triplet_literal_mode_reverses_ordering() {
        let f = rand_tensor(&[6, 4], 10);
        let labels = [0u32, 0, 1, 1, 2, 2];
        let soft = triplet_hard(&f, &labels, TripletMode::Soft).unwrap();
        let literal = triplet_hard(&f, &labels, TripletMode::Literal).unwrap();
        // the two objectives generally disagree; both stay finite
        assert!(soft.loss.item().unwrap().is_finite());
        assert!(literal.loss.item().unwrap().is_finite());
    }

    #[test]
    fn triplet_counts_singleton_labels() {
        let f = rand_tensor(&[3, 4], 11);
        let out = triplet_hard(&f, &[0, 0, 1], TripletMode::Soft).unwrap();
        assert_eq!(out.singleton_anchors, 1);
    }

    #[test]
    fn triplet_single_label_batch_is_contract_error() {
        let f = rand_tensor(&[3, 4], 12);
        assert!(matches!(
            triplet_hard(&f, &[5, 5, 5], TripletMode::Soft),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn total_loss_weighting() {
        let ce = Tensor::scalar(1.0).unwrap();
        let tri = Tensor::scalar(0.5).unwrap();
        assert_eq!(
            total_loss(&ce, &tri, 1.0, 0.0).unwrap().item().unwrap(),
            1.0
        );
        assert_eq!(
            total_loss(&ce, &tri, 1.0, 1.0).unwrap().item().unwrap(),
            1.5
        );
    }
}
