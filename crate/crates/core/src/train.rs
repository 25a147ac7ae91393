//! Desk-scale training: SGD with momentum and warmup, deterministic
//! batching and augmentation, per-step loss logging, periodic train-set
//! retrieval, and a checkpoint at the end.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::config::{lr_at, EvalProtocol, RunConfig, SourceKind};
use crate::data::{
    augment, channel_stats, load_folder, normalize, synth_dataset, ChannelStats, Dataset,
    PkSampler,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, leave_one_out, repeated_draw_protocol, EvalReport, GalleryIndex,
};
use crate::losses::{cross_entropy, total_loss, triplet_hard};
use crate::model::{CouplingMode, GitModel};
use crate::numerics::ops::concat;
use crate::numerics::{GradTape, Gradients, Tensor};

/// Stochastic gradient descent with momentum and L2 weight decay.
/// Velocity is keyed by parameter name, so it survives tensor replacement.
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// v ← μ·v + (g + wd·p);  p ← p − lr·v
    pub fn step(&mut self, model: &mut GitModel, grads: &Gradients, lr: f32) -> Result<()> {
        for (name, param) in model.named_params_mut() {
            let Some(grad) = grads.wrt(param) else {
                continue;
            };
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| vec![0.0; grad.len()]);
            let mut data = param.data().to_vec();
            for i in 0..data.len() {
                let g = grad[i] + self.weight_decay * data[i];
                v[i] = self.momentum * v[i] + g;
                data[i] -= lr * v[i];
            }
            *param = Tensor::from_vec(param.shape(), data)?.requiring_grad();
        }
        Ok(())
    }
}

/// Loss components of one step.
struct StepLosses {
    total: f32,
    ce: f32,
    triplet: f32,
    ce_local: Option<f32>,
    triplet_local: Option<f32>,
    singleton_anchors: usize,
}

/// What a training run leaves behind.
#[derive(Debug)]
pub struct TrainArtifacts {
    pub model: GitModel,
    pub final_loss: f32,
    pub steps_run: usize,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub eval_log: PathBuf,
    pub final_report: EvalReport,
}

/// Loads the configured dataset and remaps vehicle ids to class indices.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Vec<usize>)> {
    let dataset = match cfg.data.source {
        SourceKind::Synthetic => {
            let mut spec = cfg.data.synthetic.clone();
            spec.seed = cfg.seed;
            synth_dataset(&spec)
        }
        SourceKind::Folder => load_folder(&cfg.data.folder)?,
    };
    let distinct = dataset.distinct_ids();
    let classes: Vec<usize> = dataset
        .records
        .iter()
        .map(|r| distinct.iter().position(|&d| d == r.vehicle_id).unwrap())
        .collect();
    Ok((dataset, classes))
}

/// Inference features for retrieval: post-BN features; for the un-coupled
/// topology, the two streams' BN features concatenated (the index
/// L2-normalizes rows).
pub fn extract_features(
    model: &GitModel,
    dataset: &Dataset,
    stats: &ChannelStats,
) -> Result<Tensor> {
    let mut chunks: Vec<Tensor> = Vec::new();
    for chunk in dataset.records.chunks(64) {
        let images: Vec<Tensor> = chunk
            .iter()
            .map(|r| normalize(&r.image, stats))
            .collect::<Result<_>>()?;
        let out = model.forward(&images, false)?;
        let features = match (&out.local_bn_feature, model.config.coupling) {
            (Some(local), CouplingMode::NoInteractive) => {
                concat(&[&out.bn_feature, local], 1)?
            }
            _ => out.bn_feature,
        };
        chunks.push(features);
    }
    let refs: Vec<&Tensor> = chunks.iter().collect();
    concat(&refs, 0)
}

/// Train-set retrieval under the configured protocol.
pub fn evaluate_dataset(cfg: &RunConfig, features: &Tensor, dataset: &Dataset) -> Result<EvalReport> {
    let ids = dataset.labels();
    let cams = dataset.cameras();
    match cfg.eval.protocol {
        EvalProtocol::LeaveOneOut => {
            let index = GalleryIndex::new(features, ids, cams)?;
            Ok(leave_one_out(&index))
        }
        EvalProtocol::CrossCamera => {
            let index = GalleryIndex::new(features, ids.clone(), cams.clone())?;
            let queries = GalleryIndex::new(features, ids, cams)?;
            Ok(evaluate(&queries, &index, true))
        }
        EvalProtocol::RepeatedDraw => Ok(repeated_draw_protocol(
            features,
            &ids,
            cfg.eval.draws,
            cfg.seed,
            cfg.eval.probe_per_id,
        )?
        .averaged),
    }
}

/// Runs the configured training loop. Logs are comma-separated and a
/// byte-deterministic function of the config and seed.
pub fn train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let mut cfg = cfg.clone();
    std::fs::create_dir_all(&cfg.out_dir)?;

    let (dataset, class_of_record) = load_dataset(&cfg)?;
    let class_count = class_of_record.iter().copied().max().unwrap_or(0) + 1;
    if cfg.model.classes == 0 {
        cfg.model.classes = class_count;
    } else if cfg.model.classes < class_count {
        return Err(Error::Config(format!(
            "model.classes = {} but the dataset holds {} identities",
            cfg.model.classes, class_count
        )));
    }
    cfg.model.validate()?;
    let stats = channel_stats(&dataset.records);

    let mut model = GitModel::init(cfg.model.clone(), cfg.seed)?;
    let mut sgd = Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay);
    let mut sampler = PkSampler::new(
        &dataset.labels(),
        cfg.batch.p_ids,
        cfg.batch.k_imgs,
        cfg.seed.wrapping_add(1),
    )?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));

    let train_log_path = cfg.out_dir.join("train_log.csv");
    let eval_log_path = cfg.out_dir.join("eval_log.csv");
    let mut train_log = File::create(&train_log_path)?;
    let mut eval_log = File::create(&eval_log_path)?;
    let dual_head = cfg.model.coupling == CouplingMode::NoInteractive;
    if dual_head {
        writeln!(train_log, "step,lr,loss,ce,triplet,ce_local,triplet_local")?;
    } else {
        writeln!(train_log, "step,lr,loss,ce,triplet")?;
    }
    writeln!(eval_log, "step,rank1,map")?;

    let mut pending: Vec<crate::data::PkBatch> = Vec::new();
    let mut final_loss = f32::NAN;
    let mut final_report = None;
    let mut warned_replacement = false;
    let mut warned_singleton = false;

    for step in 0..cfg.optim.steps {
        if pending.is_empty() {
            pending = sampler.next_epoch();
            pending.reverse(); // pop() consumes in epoch order
        }
        let batch = pending.pop().expect("epoch produced no batches");
        if batch.with_replacement > 0 && !warned_replacement {
            eprintln!(
                "note: step {}: {} image slots drawn with replacement (ids hold fewer than {} images)",
                step, batch.with_replacement, cfg.batch.k_imgs
            );
            warned_replacement = true;
        }

        let mut images = Vec::with_capacity(batch.indices.len());
        let mut labels = Vec::with_capacity(batch.indices.len());
        let mut label_ids = Vec::with_capacity(batch.indices.len());
        for &idx in &batch.indices {
            let rec = &dataset.records[idx];
            let aug = augment(&rec.image, &cfg.augment, &mut aug_rng);
            images.push(normalize(&aug, &stats)?);
            labels.push(class_of_record[idx]);
            label_ids.push(rec.vehicle_id);
        }

        let lr = lr_at(&cfg.optim, step);
        let outcome = run_step(&mut model, &mut sgd, &cfg, &images, &labels, &label_ids, lr);
        let losses = match outcome {
            Ok(l) => l,
            Err(err) => {
                let dump = cfg.out_dir.join("abort_dump.txt");
                let _ = std::fs::write(
                    &dump,
                    format!(
                        "aborted at step {}\nlr {}\nlast finite loss {}\nerror: {}\n",
                        step, lr, final_loss, err
                    ),
                );
                return Err(err);
            }
        };
        final_loss = losses.total;
        if losses.singleton_anchors > 0 && !warned_singleton {
            eprintln!(
                "note: step {}: {} anchors hold their label alone in the batch and contribute through negatives only",
                step, losses.singleton_anchors
            );
            warned_singleton = true;
        }

        if dual_head {
            writeln!(
                train_log,
                "{},{},{},{},{},{},{}",
                step,
                lr,
                losses.total,
                losses.ce,
                losses.triplet,
                losses.ce_local.unwrap_or(f32::NAN),
                losses.triplet_local.unwrap_or(f32::NAN)
            )?;
        } else {
            writeln!(
                train_log,
                "{},{},{},{},{}",
                step, lr, losses.total, losses.ce, losses.triplet
            )?;
        }

        let last = step + 1 == cfg.optim.steps;
        if (cfg.eval.every > 0 && (step + 1) % cfg.eval.every == 0) || last {
            let features = extract_features(&model, &dataset, &stats)?;
            let report = evaluate_dataset(&cfg, &features, &dataset)?;
            writeln!(eval_log, "{},{},{}", step, report.rank1(), report.map)?;
            if last {
                final_report = Some(report);
            }
        }
    }
    train_log.flush()?;
    eval_log.flush()?;

    let checkpoint = cfg.out_dir.join("model.ckpt");
    save_checkpoint(&model, &checkpoint)?;
    let final_report = match final_report {
        Some(r) => r,
        None => {
            let features = extract_features(&model, &dataset, &stats)?;
            evaluate_dataset(&cfg, &features, &dataset)?
        }
    };
    crate::eval::write_report_csv(&final_report, &cfg.out_dir.join("final_metrics.csv"))?;

    Ok(TrainArtifacts {
        model,
        final_loss,
        steps_run: cfg.optim.steps,
        checkpoint,
        train_log: train_log_path,
        eval_log: eval_log_path,
        final_report,
    })
}

fn run_step(
    model: &mut GitModel,
    sgd: &mut Sgd,
    cfg: &RunConfig,
    images: &[Tensor],
    labels: &[usize],
    label_ids: &[u32],
    lr: f32,
) -> Result<StepLosses> {
    let tape = GradTape::new();
    let out = model.forward(images, true)?;
    let ce = cross_entropy(&out.logits, labels)?;
    let tri = triplet_hard(&out.class_feature, label_ids, cfg.loss.triplet_mode)?;
    let mut total = total_loss(&ce, &tri.loss, cfg.loss.alpha, cfg.loss.beta)?;

    let mut ce_local_v = None;
    let mut tri_local_v = None;
    let mut singleton_anchors = tri.singleton_anchors;
    if let (Some(local_logits), Some(local_pooled)) = (&out.local_logits, &out.local_pooled) {
        let ce_local = cross_entropy(local_logits, labels)?;
        let tri_local = triplet_hard(local_pooled, label_ids, cfg.loss.triplet_mode)?;
        let local_total =
            total_loss(&ce_local, &tri_local.loss, cfg.loss.alpha, cfg.loss.beta)?;
        ce_local_v = Some(ce_local.item()?);
        tri_local_v = Some(tri_local.loss.item()?);
        singleton_anchors += tri_local.singleton_anchors;
        total = total.add(&local_total)?;
    }

    let total_v = total.item()?;
    if !total_v.is_finite() {
        return Err(Error::NonFinite { op: "train_step" });
    }

    let grads = tape.backward(&total)?;
    sgd.step(model, &grads, lr)?;
    if let Some(stats) = &out.bn_stats {
        model.head.update_running_stats(stats);
    }
    if let (Some(h), Some(stats)) = (&mut model.local_head, &out.local_bn_stats) {
        h.update_running_stats(stats);
    }

    Ok(StepLosses {
        total: total_v,
        ce: ce.item()?,
        triplet: tri.loss.item()?,
        ce_local: ce_local_v,
        triplet_local: tri_local_v,
        singleton_anchors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_cfg(dir: &std::path::Path) -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.optim.steps = 3;
        cfg.optim.warmup_steps = 2;
        cfg.eval.every = 2;
        cfg.batch.p_ids = 4;
        cfg.batch.k_imgs = 2;
        cfg.data.synthetic.id_count = 4;
        cfg.data.synthetic.images_per_id = 3;
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn short_run_produces_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let artifacts = train(&cfg).unwrap();
        assert!(artifacts.checkpoint.exists());
        assert!(artifacts.train_log.exists());
        assert!(artifacts.eval_log.exists());
        assert!(artifacts.final_loss.is_finite());
        let log = std::fs::read_to_string(&artifacts.train_log).unwrap();
        assert_eq!(log.lines().count(), 1 + 3);
        assert!(log.starts_with("step,lr,loss,ce,triplet"));
    }

    #[test]
    fn ce_descends_under_one_small_step() {
        // descent smoke property on a fixed batch
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.augment.flip_p = 0.0;
        cfg.augment.erase_p = 0.0;
        let (dataset, classes) = load_dataset(&cfg).unwrap();
        cfg.model.classes = 4;
        let stats = channel_stats(&dataset.records);
        let mut model = GitModel::init(cfg.model.clone(), 7).unwrap();
        let images: Vec<Tensor> = dataset.records[..8]
            .iter()
            .map(|r| normalize(&r.image, &stats).unwrap())
            .collect();
        let labels: Vec<usize> = classes[..8].to_vec();

        let ce_of = |model: &GitModel| -> f32 {
            let out = model.forward(&images, true).unwrap();
            cross_entropy(&out.logits, &labels).unwrap().item().unwrap()
        };
        let before = ce_of(&model);

        let tape = GradTape::new();
        let out = model.forward(&images, true).unwrap();
        let ce = cross_entropy(&out.logits, &labels).unwrap();
        let grads = tape.backward(&ce).unwrap();
        let mut sgd = Sgd::new(0.0, 0.0);
        sgd.step(&mut model, &grads, 1e-2).unwrap();

        let after = ce_of(&model);
        assert!(
            after < before,
            "cross-entropy did not descend: {} -> {}",
            before,
            after
        );
    }

    #[test]
    fn diverging_run_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.optim.steps = 40;
        cfg.optim.warmup_steps = 1;
        cfg.optim.init_lr = 1e6;
        cfg.optim.peak_lr = 1e6;
        let err = train(&cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "got: {}", err);
        assert!(dir.path().join("abort_dump.txt").exists());
    }

    #[test]
    fn dual_head_mode_trains_and_logs_extra_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.model.coupling = CouplingMode::NoInteractive;
        let artifacts = train(&cfg).unwrap();
        let log = std::fs::read_to_string(&artifacts.train_log).unwrap();
        assert!(log.starts_with("step,lr,loss,ce,triplet,ce_local,triplet_local"));
        // feature width doubles under the concatenated two-stream feature
        let (dataset, _) = load_dataset(&cfg).unwrap();
        let stats = channel_stats(&dataset.records);
        let features = extract_features(&artifacts.model, &dataset, &stats).unwrap();
        assert_eq!(features.shape()[1], 128);
    }
}
