//! Command-line entry points: synth, pretrain, finetune, eval, reconstruct.
//! Exit codes: 0 success, 1 validation error, 2 runtime error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use signpose::checkpoint::{Checkpoint, CheckpointError, ModelKind};
use signpose::config::{Config, ConfigError};
use signpose::finetune::{
    finetune_run, fuse_logits, metrics_report, predict_logits, FinetuneOutcome,
};
use signpose::handmodel::DecodeConsts;
use signpose::metrics::topk_accuracy;
use signpose::model::{
    init_backbone, init_classifier_head, init_latent_head, Backbone, ParamStore,
};
use signpose::posedata::{parse_sequence, serialize_sequence, HandSequence};
use signpose::pretrain::{
    evaluate_reconstruction, pretrain_run, reconstruct_sequence, split_heldout, PretrainOutcome,
    TrainError,
};
use signpose::synth::synth_generate;

#[derive(Parser)]
#[command(
    name = "signpose",
    about = "Masked pretraining and isolated sign classification over two-hand pose sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; missing fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled pose-JSON dataset
    Synth {
        #[command(flatten)]
        common: Common,
        /// output directory, one pose-JSON file per sequence
        #[arg(long)]
        out: PathBuf,
        /// overwrite existing files
        #[arg(long)]
        force: bool,
    },
    /// Self-supervised masked pretraining
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// directory of pose-JSON files
        #[arg(long)]
        data: PathBuf,
        /// output directory (checkpoint.sbc + train_log.jsonl)
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Supervised fine-tuning for isolated sign classification
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// pretraining checkpoint to initialize the backbone from
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint: reconstruction PCK/AUC (pretrain checkpoints)
    /// or classification accuracy (classifier checkpoints)
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// metrics JSON output file
        #[arg(long)]
        out: PathBuf,
        /// fuse with an externally produced scores.json before scoring
        #[arg(long)]
        fuse: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Dump per-sequence reconstructions (target, masked input,
    /// reconstruction, 3D joints) for external plotting
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => CliError::Runtime(format!("checkpoint io: {io}")),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_)
            | TrainError::EmptyDataset
            | TrainError::ClassCountMismatch { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_runtime(e: std::io::Error) -> CliError {
    CliError::Runtime(format!("io: {e}"))
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { common, out, force } => cmd_synth(common, out, force),
        Command::Pretrain {
            common,
            data,
            out,
            force,
        } => cmd_pretrain(common, data, out, force),
        Command::Finetune {
            common,
            data,
            out,
            checkpoint,
            force,
        } => cmd_finetune(common, data, out, checkpoint, force),
        Command::Eval {
            common,
            data,
            checkpoint,
            out,
            fuse,
            force,
        } => cmd_eval(common, data, checkpoint, out, fuse, force),
        Command::Reconstruct {
            common,
            data,
            checkpoint,
            out,
            force,
        } => cmd_reconstruct(common, data, checkpoint, out, force),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}

fn load_config(common: &Common) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_runtime)
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Validation(format!(
            "refusing to overwrite {} (pass --force)",
            path.display()
        )));
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<HandSequence>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Validation(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_runtime)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(io_runtime)?;
        let seq = parse_sequence(&text).map_err(|e| {
            CliError::Validation(format!("{}: {e}", p.display()))
        })?;
        out.push(seq);
    }
    if out.is_empty() {
        return Err(CliError::Validation(format!(
            "no pose-JSON files in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn cmd_synth(common: Common, out: PathBuf, force: bool) -> Result<(), CliError> {
    let cfg = load_config(&common)?;
    let data = synth_generate(&cfg.synth).map_err(CliError::Validation)?;
    ensure_out_dir(&out)?;
    for seq in &data {
        let path = out.join(format!("{}.json", seq.source_id));
        refuse_overwrite(&path, force)?;
    }
    for seq in &data {
        let path = out.join(format!("{}.json", seq.source_id));
        std::fs::write(&path, serialize_sequence(seq)).map_err(io_runtime)?;
    }
    println!(
        "wrote {} sequences ({} classes) to {}",
        data.len(),
        cfg.synth.class_count,
        out.display()
    );
    Ok(())
}

fn write_jsonl<S: serde::Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path).map_err(io_runtime)?;
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| CliError::Runtime(format!("log serialization: {e}")))?;
        writeln!(f, "{line}").map_err(io_runtime)?;
    }
    Ok(())
}

fn cmd_pretrain(
    common: Common,
    data: PathBuf,
    out: PathBuf,
    force: bool,
) -> Result<(), CliError> {
    let cfg = load_config(&common)?;
    let dataset = load_dataset(&data)?;
    let asset = cfg.asset.load()?;
    ensure_out_dir(&out)?;
    let ckpt_path = out.join("checkpoint.sbc");
    let log_path = out.join("train_log.jsonl");
    refuse_overwrite(&ckpt_path, force)?;
    refuse_overwrite(&log_path, force)?;

    let outcome: PretrainOutcome<f32> = pretrain_run(
        &dataset,
        &cfg.model,
        &cfg.pretrain,
        &cfg.optimizer,
        &asset,
        cfg.seed,
        |log| {
            println!(
                "epoch {:>3}  rec {:>10.4}  reg {:>10.4}  total {:>10.4}  heldout_pck20 {:.4}  lr {:.6}",
                log.epoch, log.loss_rec, log.loss_reg, log.loss_total, log.heldout_pck20, log.lr
            );
        },
    )?;
    write_jsonl(&log_path, &outcome.logs)?;
    let ck = Checkpoint::from_training(
        ModelKind::Pretrain,
        &cfg.hash(),
        cfg.pretrain.epochs,
        &outcome.final_rng,
        &outcome.params,
        Some(&outcome.optimizer),
    );
    ck.save(&ckpt_path)?;
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn cmd_finetune(
    common: Common,
    data: PathBuf,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
    force: bool,
) -> Result<(), CliError> {
    let cfg = load_config(&common)?;
    let dataset = load_dataset(&data)?;
    ensure_out_dir(&out)?;
    let ckpt_path = out.join("checkpoint.sbc");
    let log_path = out.join("train_log.jsonl");
    let metrics_path = out.join("metrics.json");
    let scores_path = out.join("scores.json");
    for p in [&ckpt_path, &log_path, &metrics_path, &scores_path] {
        refuse_overwrite(p, force)?;
    }

    let init = match &checkpoint {
        None => None,
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_config_hash(&cfg.hash())?;
            Some(ck)
        }
    };
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5117);
    let (train, eval) = split_heldout(&dataset, cfg.finetune.heldout_fraction, &mut rng);
    let outcome: FinetuneOutcome<f32> = finetune_run(
        &train,
        &eval,
        &cfg.model,
        &cfg.finetune,
        &cfg.optimizer,
        init.as_ref().map(|c| &c.params),
        cfg.seed,
        |log| println!("epoch {:>3}  loss {:>10.4}  lr {:.6}", log.epoch, log.loss, log.lr),
    )?;
    write_jsonl(&log_path, &outcome.logs)?;
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&outcome.report)
            .map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(io_runtime)?;
    write_scores(&scores_path, &outcome.scores, &outcome.labels, &eval)?;
    let ck = Checkpoint::from_training(
        ModelKind::Classifier,
        &cfg.hash(),
        cfg.finetune.epochs,
        &outcome.final_rng,
        &outcome.params,
        Some(&outcome.optimizer),
    );
    ck.save(&ckpt_path)?;
    println!(
        "top1_pi {:.4}  top5_pi {:.4}  top1_pc {:.4}  top5_pc {:.4}",
        outcome.report.top1_pi, outcome.report.top5_pi, outcome.report.top1_pc,
        outcome.report.top5_pc
    );
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ScoresFile {
    source_ids: Vec<String>,
    labels: Vec<usize>,
    scores: Vec<Vec<f64>>,
}

fn write_scores(
    path: &Path,
    scores: &Array2<f64>,
    labels: &[usize],
    eval: &[&HandSequence],
) -> Result<(), CliError> {
    let file = ScoresFile {
        source_ids: eval.iter().map(|s| s.source_id.clone()).collect(),
        labels: labels.to_vec(),
        scores: (0..scores.nrows())
            .map(|i| scores.row(i).to_vec())
            .collect(),
    };
    std::fs::write(
        path,
        serde_json::to_string(&file).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(io_runtime)
}

/// Expected parameter layout for a checkpoint kind under this config.
fn expected_params(cfg: &Config, kind: ModelKind, classes: Option<usize>) -> ParamStore<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    init_backbone(&cfg.model, &mut rng, &mut store);
    match kind {
        ModelKind::Pretrain => init_latent_head(&cfg.model, &mut rng, &mut store),
        ModelKind::Classifier => {
            init_classifier_head(&cfg.model, classes.unwrap_or(1), &mut rng, &mut store)
        }
    }
    store
}

fn cmd_eval(
    common: Common,
    data: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
    fuse: Option<PathBuf>,
    force: bool,
) -> Result<(), CliError> {
    let cfg = load_config(&common)?;
    let dataset = load_dataset(&data)?;
    refuse_overwrite(&out, force)?;
    let ck = Checkpoint::load(&checkpoint)?;
    ck.check_config_hash(&cfg.hash())?;
    ck.validate_architecture(&expected_params(&cfg, ck.kind, ck.classes()))?;

    let report = match ck.kind {
        ModelKind::Pretrain => {
            let asset = cfg.asset.load()?;
            let consts = DecodeConsts::<f32>::from_asset(&asset);
            let backbone = Backbone::new();
            let refs: Vec<&HandSequence> = dataset.iter().collect();
            if cfg.eval.identity_baseline {
                // diagnostic: a perfect-copy model reproduces its input
                let e = evaluate_reconstruction(
                    &cfg.model,
                    &cfg.pretrain,
                    &backbone,
                    &ck.params,
                    &consts,
                    &refs,
                    cfg.seed,
                )?;
                serde_json::json!({
                    "kind": "reconstruction",
                    "input_pck20": e.input_pck20,
                    "output_pck20": e.input_pck20,
                    "input_auc": e.input_auc,
                    "output_auc": e.input_auc,
                    "identity_baseline": true,
                })
            } else {
                let e = evaluate_reconstruction(
                    &cfg.model,
                    &cfg.pretrain,
                    &backbone,
                    &ck.params,
                    &consts,
                    &refs,
                    cfg.seed,
                )?;
                serde_json::json!({
                    "kind": "reconstruction",
                    "input_pck20": e.input_pck20,
                    "output_pck20": e.output_pck20,
                    "input_auc": e.input_auc,
                    "output_auc": e.output_auc,
                    "identity_baseline": false,
                })
            }
        }
        ModelKind::Classifier => {
            let backbone = Backbone::new();
            let classes = ck.classes().ok_or_else(|| {
                CliError::Validation("classifier checkpoint lacks a head".into())
            })?;
            let mut scores = Array2::<f64>::zeros((dataset.len(), classes));
            let mut labels = Vec::with_capacity(dataset.len());
            for (i, seq) in dataset.iter().enumerate() {
                let logits =
                    predict_logits(seq, &cfg.model, &backbone, &ck.params, cfg.seed)?;
                for (c, v) in logits.iter().enumerate() {
                    scores[[i, c]] = *v;
                }
                labels.push(seq.label.ok_or_else(|| {
                    CliError::Validation(format!("{} has no label", seq.source_id))
                })?);
            }
            let mut fused_with: Option<String> = None;
            if let Some(fuse_path) = &fuse {
                let text = std::fs::read_to_string(fuse_path).map_err(io_runtime)?;
                let other: ScoresFile = serde_json::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("bad scores file: {e}")))?;
                let by_id: std::collections::HashMap<&str, usize> = other
                    .source_ids
                    .iter()
                    .map(|s| s.as_str())
                    .zip(0..)
                    .collect();
                for (i, seq) in dataset.iter().enumerate() {
                    let j = *by_id.get(seq.source_id.as_str()).ok_or_else(|| {
                        CliError::Validation(format!(
                            "scores file has no entry for {}",
                            seq.source_id
                        ))
                    })?;
                    let row = scores.row(i).to_vec();
                    let fused = if cfg.finetune.fuse_probabilities {
                        let sm = |v: &[f64]| {
                            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
                            let z: f64 = e.iter().sum();
                            e.into_iter().map(|x| x / z).collect::<Vec<f64>>()
                        };
                        fuse_logits(&sm(&row), &sm(&other.scores[j]))
                    } else {
                        fuse_logits(&row, &other.scores[j])
                    }?;
                    for (c, v) in fused.iter().enumerate() {
                        scores[[i, c]] = *v;
                    }
                }
                fused_with = Some(fuse_path.display().to_string());
            }
            let report = metrics_report(&scores, &labels)?;
            let top2 = topk_accuracy(
                &scores,
                &labels,
                2.min(classes),
                signpose::metrics::AccuracyMode::PerInstance,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            serde_json::json!({
                "kind": "classification",
                "top1_pi": report.top1_pi,
                "top2_pi": top2,
                "top5_pi": report.top5_pi,
                "top1_pc": report.top1_pc,
                "top5_pc": report.top5_pc,
                "per_class_counts": report.per_class_counts,
                "fused_with": fused_with,
            })
        }
    };
    std::fs::write(
        &out,
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?,
    )
    .map_err(io_runtime)?;
    println!("{report}");
    Ok(())
}

fn cmd_reconstruct(
    common: Common,
    data: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
    force: bool,
) -> Result<(), CliError> {
    let cfg = load_config(&common)?;
    let dataset = load_dataset(&data)?;
    let ck = Checkpoint::load(&checkpoint)?;
    ck.check_config_hash(&cfg.hash())?;
    if ck.kind != ModelKind::Pretrain {
        return Err(CliError::Validation(
            "reconstruct needs a pretraining checkpoint".into(),
        ));
    }
    ck.validate_architecture(&expected_params(&cfg, ck.kind, None))?;
    let asset = cfg.asset.load()?;
    let consts = DecodeConsts::<f32>::from_asset(&asset);
    let backbone = Backbone::new();
    ensure_out_dir(&out)?;
    for seq in &dataset {
        let path = out.join(format!("{}_recon.json", seq.source_id));
        refuse_overwrite(&path, force)?;
        let dump = reconstruct_sequence(
            seq,
            &cfg.model,
            &cfg.pretrain,
            &backbone,
            &ck.params,
            &consts,
            cfg.seed,
        )?;
        let tokens = dump.times.len();
        let joints = signpose::posedata::JOINT_COUNT;
        let per_token: Vec<serde_json::Value> = (0..tokens)
            .map(|t| {
                let rows = |a: &Array2<f64>, cols: usize| -> Vec<Vec<f64>> {
                    (0..joints)
                        .map(|j| (0..cols).map(|c| a[[t * joints + j, c]]).collect())
                        .collect()
                };
                serde_json::json!({
                    "t": dump.times[t],
                    "hand": if dump.chirality[t] == 0 { "left" } else { "right" },
                    "target": rows(&dump.target, 2),
                    "masked_input": rows(&dump.masked_input, 2),
                    "reconstruction": rows(&dump.reconstruction, 2),
                    "joints3d": rows(&dump.joints3d, 3),
                })
            })
            .collect();
        let doc = serde_json::json!({
            "source_id": seq.source_id,
            "frames": per_token,
        });
        std::fs::write(
            &path,
            serde_json::to_string(&doc).map_err(|e| CliError::Runtime(e.to_string()))?,
        )
        .map_err(io_runtime)?;
    }
    println!("wrote {} reconstruction dumps to {}", dataset.len(), out.display());
    Ok(())
}
