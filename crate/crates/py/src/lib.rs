//! Python bindings: the dataset generator, the two training stages,
//! evaluation, reconstruction dumps, and the metric functions.
//!
//! Configs are passed as JSON strings with the same schema as the CLI's
//! `--config` file; metrics come back as JSON strings.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use signpose::checkpoint::{Checkpoint, ModelKind};
use signpose::config::Config;
use signpose::finetune as ft;
use signpose::handmodel::DecodeConsts;
use signpose::metrics as m;
use signpose::model::Backbone;
use signpose::posedata::{parse_sequence, serialize_sequence, HandSequence};
use signpose::pretrain as pt;

fn val_err(msg: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(msg.to_string())
}

fn run_err(msg: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(msg.to_string())
}

fn parse_config(json: &str) -> PyResult<Config> {
    Config::from_json(json).map_err(val_err)
}

fn load_dataset(dir: &str) -> PyResult<Vec<HandSequence>> {
    let dir = Path::new(dir);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| val_err(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| run_err(e))?;
        out.push(parse_sequence(&text).map_err(val_err)?);
    }
    if out.is_empty() {
        return Err(val_err(format!("no pose-JSON files in {}", dir.display())));
    }
    Ok(out)
}

/// Generate the synthetic dataset into `out_dir`, one pose-JSON per sequence.
#[pyfunction]
fn synth(config_json: &str, out_dir: &str) -> PyResult<usize> {
    let cfg = parse_config(config_json)?;
    let data = signpose::synth::synth_generate(&cfg.synth).map_err(val_err)?;
    std::fs::create_dir_all(out_dir).map_err(run_err)?;
    for seq in &data {
        let path = Path::new(out_dir).join(format!("{}.json", seq.source_id));
        std::fs::write(&path, serialize_sequence(seq)).map_err(run_err)?;
    }
    Ok(data.len())
}

/// Masked pretraining over the pose-JSON files in `data_dir`; writes an SBC1
/// checkpoint and returns the per-epoch log as a JSON string.
#[pyfunction]
fn pretrain(config_json: &str, data_dir: &str, checkpoint_path: &str) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let data = load_dataset(data_dir)?;
    let asset = cfg.asset.load().map_err(val_err)?;
    let outcome = pt::pretrain_run::<f32>(
        &data,
        &cfg.model,
        &cfg.pretrain,
        &cfg.optimizer,
        &asset,
        cfg.seed,
        |_| {},
    )
    .map_err(run_err)?;
    let ck = Checkpoint::from_training(
        ModelKind::Pretrain,
        &cfg.hash(),
        cfg.pretrain.epochs,
        &outcome.final_rng,
        &outcome.params,
        Some(&outcome.optimizer),
    );
    ck.save(Path::new(checkpoint_path)).map_err(run_err)?;
    serde_json::to_string(&outcome.logs).map_err(|e| run_err(e))
}

/// Fine-tune a classifier (optionally from a pretraining checkpoint).
/// Returns the held-out metrics report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, data_dir, checkpoint_path, init_checkpoint=None))]
fn finetune(
    config_json: &str,
    data_dir: &str,
    checkpoint_path: &str,
    init_checkpoint: Option<&str>,
) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let data = load_dataset(data_dir)?;
    let init = match init_checkpoint {
        None => None,
        Some(p) => {
            let ck = Checkpoint::load(Path::new(p)).map_err(val_err)?;
            ck.check_config_hash(&cfg.hash()).map_err(val_err)?;
            Some(ck)
        }
    };
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5117);
    let (train, eval) = pt::split_heldout(&data, cfg.finetune.heldout_fraction, &mut rng);
    let outcome = ft::finetune_run::<f32>(
        &train,
        &eval,
        &cfg.model,
        &cfg.finetune,
        &cfg.optimizer,
        init.as_ref().map(|c| &c.params),
        cfg.seed,
        |_| {},
    )
    .map_err(run_err)?;
    let ck = Checkpoint::from_training(
        ModelKind::Classifier,
        &cfg.hash(),
        cfg.finetune.epochs,
        &outcome.final_rng,
        &outcome.params,
        Some(&outcome.optimizer),
    );
    ck.save(Path::new(checkpoint_path)).map_err(run_err)?;
    serde_json::to_string(&outcome.report).map_err(|e| run_err(e))
}

/// Evaluate a checkpoint on a dataset. Pretraining checkpoints report
/// masked-input vs reconstructed-output PCK/AUC; classifier checkpoints
/// report top-k accuracy. Returns JSON.
#[pyfunction]
fn evaluate(config_json: &str, data_dir: &str, checkpoint_path: &str) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let data = load_dataset(data_dir)?;
    let ck = Checkpoint::load(Path::new(checkpoint_path)).map_err(val_err)?;
    ck.check_config_hash(&cfg.hash()).map_err(val_err)?;
    match ck.kind {
        ModelKind::Pretrain => {
            let asset = cfg.asset.load().map_err(val_err)?;
            let consts = DecodeConsts::<f32>::from_asset(&asset);
            let backbone = Backbone::new();
            let refs: Vec<&HandSequence> = data.iter().collect();
            let e = pt::evaluate_reconstruction(
                &cfg.model,
                &cfg.pretrain,
                &backbone,
                &ck.params,
                &consts,
                &refs,
                cfg.seed,
            )
            .map_err(run_err)?;
            Ok(serde_json::json!({
                "kind": "reconstruction",
                "input_pck20": e.input_pck20,
                "output_pck20": e.output_pck20,
                "input_auc": e.input_auc,
                "output_auc": e.output_auc,
            })
            .to_string())
        }
        ModelKind::Classifier => {
            let backbone = Backbone::new();
            let classes = ck
                .classes()
                .ok_or_else(|| val_err("classifier checkpoint lacks a head"))?;
            let mut scores = ndarray::Array2::<f64>::zeros((data.len(), classes));
            let mut labels = Vec::new();
            for (i, seq) in data.iter().enumerate() {
                let logits =
                    ft::predict_logits(seq, &cfg.model, &backbone, &ck.params, cfg.seed)
                        .map_err(run_err)?;
                for (c, v) in logits.iter().enumerate() {
                    scores[[i, c]] = *v;
                }
                labels.push(
                    seq.label
                        .ok_or_else(|| val_err(format!("{} has no label", seq.source_id)))?,
                );
            }
            let report = ft::metrics_report(&scores, &labels).map_err(run_err)?;
            serde_json::to_string(&report).map_err(|e| run_err(e))
        }
    }
}

/// Reconstruction dump for one sequence (JSON), for plotting.
#[pyfunction]
fn reconstruct(config_json: &str, pose_json: &str, checkpoint_path: &str) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let seq = parse_sequence(pose_json).map_err(val_err)?;
    let ck = Checkpoint::load(Path::new(checkpoint_path)).map_err(val_err)?;
    ck.check_config_hash(&cfg.hash()).map_err(val_err)?;
    if ck.kind != ModelKind::Pretrain {
        return Err(val_err("reconstruct needs a pretraining checkpoint"));
    }
    let asset = cfg.asset.load().map_err(val_err)?;
    let consts = DecodeConsts::<f32>::from_asset(&asset);
    let backbone = Backbone::new();
    let dump = pt::reconstruct_sequence(
        &seq,
        &cfg.model,
        &cfg.pretrain,
        &backbone,
        &ck.params,
        &consts,
        cfg.seed,
    )
    .map_err(run_err)?;
    let joints = signpose::posedata::JOINT_COUNT;
    let tokens = dump.times.len();
    let frames: Vec<serde_json::Value> = (0..tokens)
        .map(|t| {
            let rows = |a: &ndarray::Array2<f64>, cols: usize| -> Vec<Vec<f64>> {
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
    Ok(serde_json::json!({ "source_id": seq.source_id, "frames": frames }).to_string())
}

/// Percentage of correct keypoints within `tau` pixels.
#[pyfunction]
fn pck(
    predicted: Vec<(f64, f64)>,
    ground_truth: Vec<(f64, f64)>,
    tau: f64,
    valid: Vec<bool>,
) -> PyResult<f64> {
    let to_arr = |v: &[(f64, f64)]| {
        ndarray::Array2::from_shape_fn((v.len(), 2), |(i, c)| if c == 0 { v[i].0 } else { v[i].1 })
    };
    m::pck(&to_arr(&predicted), &to_arr(&ground_truth), tau, &valid).map_err(val_err)
}

/// Area under the PCK curve over integer thresholds in [tau_min, tau_max].
#[pyfunction]
#[pyo3(signature = (predicted, ground_truth, valid, tau_min=20.0, tau_max=40.0))]
fn auc(
    predicted: Vec<(f64, f64)>,
    ground_truth: Vec<(f64, f64)>,
    valid: Vec<bool>,
    tau_min: f64,
    tau_max: f64,
) -> PyResult<f64> {
    let to_arr = |v: &[(f64, f64)]| {
        ndarray::Array2::from_shape_fn((v.len(), 2), |(i, c)| if c == 0 { v[i].0 } else { v[i].1 })
    };
    m::auc(&to_arr(&predicted), &to_arr(&ground_truth), &valid, tau_min, tau_max)
        .map_err(val_err)
}

/// Top-k accuracy; `mode` is "per_instance" or "per_class".
#[pyfunction]
fn topk_accuracy(
    scores: Vec<Vec<f64>>,
    labels: Vec<usize>,
    k: usize,
    mode: &str,
) -> PyResult<f64> {
    let mode = match mode {
        "per_instance" => m::AccuracyMode::PerInstance,
        "per_class" => m::AccuracyMode::PerClass,
        other => return Err(val_err(format!("unknown mode {other}"))),
    };
    let cols = scores.first().map(|r| r.len()).unwrap_or(0);
    if scores.iter().any(|r| r.len() != cols) {
        return Err(val_err("ragged score matrix"));
    }
    let arr = ndarray::Array2::from_shape_fn((scores.len(), cols), |(i, j)| scores[i][j]);
    m::topk_accuracy(&arr, &labels, k, mode).map_err(val_err)
}

/// Elementwise late fusion of two score vectors.
#[pyfunction]
fn fuse_logits(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    ft::fuse_logits(&a, &b).map_err(val_err)
}

/// Header summary of an SBC1 checkpoint as JSON.
#[pyfunction]
fn checkpoint_info(path: &str) -> PyResult<String> {
    let ck = Checkpoint::load(Path::new(path)).map_err(val_err)?;
    let tensors: Vec<serde_json::Value> = ck
        .params
        .iter()
        .map(|(n, a)| serde_json::json!({ "name": n, "shape": a.shape() }))
        .collect();
    Ok(serde_json::json!({
        "kind": match ck.kind { ModelKind::Pretrain => "pretrain", ModelKind::Classifier => "classifier" },
        "config_hash": ck.config_hash,
        "epoch": ck.epoch,
        "classes": ck.classes(),
        "tensors": tensors,
    })
    .to_string())
}

/// The default config as a JSON string (edit and pass back in).
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&Config::default()).map_err(|e| run_err(e))
}

#[pymodule]
fn signpose_py(m_: &Bound<'_, PyModule>) -> PyResult<()> {
    m_.add_function(wrap_pyfunction!(synth, m_)?)?;
    m_.add_function(wrap_pyfunction!(pretrain, m_)?)?;
    m_.add_function(wrap_pyfunction!(finetune, m_)?)?;
    m_.add_function(wrap_pyfunction!(evaluate, m_)?)?;
    m_.add_function(wrap_pyfunction!(reconstruct, m_)?)?;
    m_.add_function(wrap_pyfunction!(pck, m_)?)?;
    m_.add_function(wrap_pyfunction!(auc, m_)?)?;
    m_.add_function(wrap_pyfunction!(topk_accuracy, m_)?)?;
    m_.add_function(wrap_pyfunction!(fuse_logits, m_)?)?;
    m_.add_function(wrap_pyfunction!(checkpoint_info, m_)?)?;
    m_.add_function(wrap_pyfunction!(default_config, m_)?)?;
    Ok(())
}
