//! Command implementations behind the `gitreid` binary: train, eval,
//! gradcheck, ablate, params.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gitreid_core::checkpoint::load_checkpoint;
use gitreid_core::config::{model_preset, EvalProtocol, RunConfig, SourceKind};
use gitreid_core::data::{channel_stats, load_folder, normalize, synth_dataset};
use gitreid_core::eval::{evaluate, report_csv, report_table, GalleryIndex};
use gitreid_core::losses::{cross_entropy, total_loss, triplet_hard, TripletMode};
use gitreid_core::model::{count_params, CouplingMode, GitConfig, GitModel};
use gitreid_core::numerics::GradTape;
use gitreid_core::train::{evaluate_dataset, extract_features, load_dataset, train};
use gitreid_reference::{central_diff, fd::relative_error, RefBatch, ReferenceModel};

#[derive(Parser)]
#[command(name = "gitreid", about = "Graph-interactive transformer re-identification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Plain-text config file; desk defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// key=value overrides applied on top of the config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl CommonArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)
                .with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::desk(),
        };
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model and write logs + checkpoint to out.dir.
    Train(CommonArgs),
    /// Evaluate a checkpoint on a dataset and write report files.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image folder; the config's dataset is used when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences of the f64
    /// reference forward, per parameter family.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every coupling topology and tabulate desk-run metrics.
    Ablate(CommonArgs),
    /// Parameter-count tables across presets and the head/depth grid.
    Params(CommonArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => cmd_train(&common.load()?),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => cmd_eval(&common.load()?, &checkpoint, data.as_deref()),
        Command::Gradcheck {
            common,
            samples,
            seed,
        } => cmd_gradcheck(&common.load()?, samples, seed),
        Command::Ablate(common) => cmd_ablate(&common.load()?),
        Command::Params(common) => cmd_params(&common.load()?),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let artifacts = train(cfg)?;
    println!(
        "trained {} steps: final loss {:.6}, train R1 {:.4}, mAP {:.4}",
        artifacts.steps_run,
        artifacts.final_loss,
        artifacts.final_report.rank1(),
        artifacts.final_report.map
    );
    println!("checkpoint: {}", artifacts.checkpoint.display());
    println!("logs: {}, {}", artifacts.train_log.display(), artifacts.eval_log.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let report = match data {
        Some(root) if root.join("query").is_dir() && root.join("gallery").is_dir() => {
            // separate probe/gallery sets with cross-camera exclusion
            let queries = load_folder(&root.join("query"))?;
            let gallery = load_folder(&root.join("gallery"))?;
            let stats = channel_stats(&gallery.records);
            let qf = extract_features(&model, &queries, &stats)?;
            let gf = extract_features(&model, &gallery, &stats)?;
            let qi = GalleryIndex::new(&qf, queries.labels(), queries.cameras())?;
            let gi = GalleryIndex::new(&gf, gallery.labels(), gallery.cameras())?;
            evaluate(&qi, &gi, true)
        }
        _ => {
            let mut cfg = cfg.clone();
            if let Some(root) = data {
                cfg.data.source = SourceKind::Folder;
                cfg.data.folder = root.to_path_buf();
                if cfg.eval.protocol == EvalProtocol::LeaveOneOut {
                    cfg.eval.protocol = EvalProtocol::RepeatedDraw;
                }
            }
            let (dataset, _) = load_dataset(&cfg)?;
            let stats = channel_stats(&dataset.records);
            let features = extract_features(&model, &dataset, &stats)?;
            evaluate_dataset(&cfg, &features, &dataset)?
        }
    };

    print!("{}", report_table(&report));
    let csv_path = cfg.out_dir.join("report.csv");
    std::fs::write(&csv_path, report_csv(&report))?;
    std::fs::write(cfg.out_dir.join("report.txt"), report_table(&report))?;
    println!("report: {}", csv_path.display());
    Ok(())
}

/// Parameter family of a named tensor: block indices are stripped so all
/// blocks' weights of one kind share a row.
pub fn family_of(name: &str) -> String {
    if let Some(rest) = name.strip_prefix("blocks.") {
        match rest.split_once('.') {
            Some((_, tail)) => tail.to_string(),
            None => rest.to_string(),
        }
    } else {
        name.to_string()
    }
}

pub struct GradcheckRow {
    pub family: String,
    pub samples: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Core of the gradcheck command, shared with tests: per parameter family,
/// the worst relative error between the analytic f32 gradient and central
/// finite differences of the f64 reference loss.
pub fn gradcheck_rows(cfg: &RunConfig, samples: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut model_cfg = cfg.model.clone();
    if model_cfg.classes == 0 {
        model_cfg.classes = cfg.data.synthetic.id_count.max(2);
    }
    let model = GitModel::init(model_cfg.clone(), seed)?;

    // fixed batch: 4 ids × 3 images of the synthetic set, no augmentation
    let mut spec = cfg.data.synthetic.clone();
    spec.seed = seed;
    spec.id_count = spec.id_count.clamp(2, 4);
    spec.images_per_id = spec.images_per_id.clamp(2, 3);
    spec.height = model_cfg.height;
    spec.width = model_cfg.width;
    let dataset = synth_dataset(&spec);
    let stats = channel_stats(&dataset.records);
    let images: Vec<_> = dataset
        .records
        .iter()
        .map(|r| normalize(&r.image, &stats))
        .collect::<gitreid_core::Result<_>>()?;
    let ids: Vec<u32> = dataset.labels();
    let labels: Vec<usize> = ids.iter().map(|&i| i as usize).collect();

    // analytic gradients of the total loss
    let tape = GradTape::new();
    let out = model.forward(&images, true)?;
    let ce = cross_entropy(&out.logits, &labels)?;
    let tri = triplet_hard(&out.class_feature, &ids, TripletMode::Soft)?;
    let mut loss = total_loss(&ce, &tri.loss, 1.0, 1.0)?;
    if let (Some(local_logits), Some(local_pooled)) = (&out.local_logits, &out.local_pooled) {
        let ce_l = cross_entropy(local_logits, &labels)?;
        let tri_l = triplet_hard(local_pooled, &ids, TripletMode::Soft)?;
        loss = loss.add(&total_loss(&ce_l, &tri_l.loss, 1.0, 1.0)?)?;
    }
    let grads = tape.backward(&loss)?;

    let reference = ReferenceModel::from_model(&model);
    let batch = RefBatch {
        images: images
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect(),
        labels,
        ids,
        alpha: 1.0,
        beta: 1.0,
        soft_triplet: true,
    };

    // coordinates: one per parameter first, then random fill
    let params = model.named_params();
    let mut coords: Vec<(String, usize)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    for (name, t) in &params {
        coords.push((name.clone(), rng.gen_range(0..t.numel())));
    }
    while coords.len() < samples.max(params.len()) {
        let pick = rng.gen_range(0..params.len());
        let (name, t) = &params[pick];
        coords.push((name.clone(), rng.gen_range(0..t.numel())));
    }

    let mut rows: std::collections::BTreeMap<String, GradcheckRow> = Default::default();
    for (name, index) in coords {
        let tensor = &params.iter().find(|(n, _)| *n == name).unwrap().1;
        let analytic = grads
            .wrt(tensor)
            .map(|g| g[index] as f64)
            .ok_or_else(|| anyhow!("no gradient recorded for {}", name))?;
        // h = 1e-5: small enough that truncation through the steepest
        // layer-norm regions is negligible, far above the f64 noise floor
        let fd = central_diff(&reference, &batch, &name, index, 1e-5);
        let rel = relative_error(analytic, fd, 1e-2);
        let row = rows.entry(family_of(&name)).or_insert(GradcheckRow {
            family: family_of(&name),
            samples: 0,
            max_rel_err: 0.0,
            pass: true,
        });
        row.samples += 1;
        row.max_rel_err = row.max_rel_err.max(rel);
        row.pass = row.max_rel_err < 1e-3;
    }
    Ok(rows.into_values().collect())
}

pub fn cmd_gradcheck(cfg: &RunConfig, samples: usize, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(cfg.seed);
    let rows = gradcheck_rows(cfg, samples, seed)?;
    println!("{:<24} {:>8} {:>14}  result", "family", "samples", "max rel err");
    let mut all_pass = true;
    for row in &rows {
        println!(
            "{:<24} {:>8} {:>14.3e}  {}",
            row.family,
            row.samples,
            row.max_rel_err,
            if row.pass { "PASS" } else { "FAIL" }
        );
        all_pass &= row.pass;
    }
    if !all_pass {
        bail!("gradient check failed");
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    println!(
        "{:<18} {:>10} {:>8} {:>8}",
        "coupling", "final loss", "R1", "mAP"
    );
    for mode in CouplingMode::ALL {
        let mut run_cfg = cfg.clone();
        run_cfg.model.coupling = mode;
        run_cfg.out_dir = cfg.out_dir.join("ablate").join(mode.to_string());
        let artifacts = train(&run_cfg)?;
        println!(
            "{:<18} {:>10.4} {:>8.4} {:>8.4}",
            mode.to_string(),
            artifacts.final_loss,
            artifacts.final_report.rank1(),
            artifacts.final_report.map
        );
    }
    Ok(())
}

pub fn cmd_params(cfg: &RunConfig) -> Result<()> {
    println!("{:<12} {:>12} {:>14}", "preset", "backbone", "(millions)");
    for name in [
        "vit_tiny", "vit_small", "vit_base", "git_tiny", "git_small", "git_base", "desk",
    ] {
        let preset = model_preset(name)?;
        let count = count_params(&preset);
        println!(
            "{:<12} {:>12} {:>13.2}M",
            name,
            count.backbone(),
            count.backbone() as f64 / 1e6
        );
    }
    let configured = count_params(&cfg.model);
    println!(
        "{:<12} {:>12} {:>13.2}M  (+{} head)",
        "configured",
        configured.backbone(),
        configured.backbone() as f64 / 1e6,
        configured.head
    );

    println!();
    println!("head/depth grid (graph coupling, backbone millions):");
    print!("{:<8}", "");
    for depth in [12, 15, 18] {
        print!("{:>10}", format!("D{}", depth));
    }
    println!();
    for heads in [3usize, 6, 12] {
        print!("H{:<7}", heads);
        for depth in [12usize, 15, 18] {
            let cfg = GitConfig::full_scale(64 * heads, heads, depth, CouplingMode::Interactive);
            let count = count_params(&cfg);
            print!("{:>9.1}M", count.backbone() as f64 / 1e6);
        }
        println!();
    }
    Ok(())
}
