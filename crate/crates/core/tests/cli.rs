//! End-to-end tests of the command-line interface: the synth/pretrain/
//! finetune/eval/reconstruct pipeline, determinism, overwrite protection,
//! and exit codes.

use std::path::Path;
use std::process::Command;

use signpose::posedata::{parse_sequence, Chirality};

const BIN: &str = env!("CARGO_BIN_EXE_signpose");

fn tiny_config() -> String {
    serde_json::json!({
        "seed": 5,
        "synth": {
            "class_count": 3, "sequences_per_class": 4, "sequence_length": 12,
            "noise_sigma": 0.01, "dropout_rate": 0.02, "frame_drop_rate": 0.02, "seed": 5
        },
        "asset": {"source": "synth", "seed": 5},
        "model": {
            "embed_dim": 32, "encoder_layers": 1, "encoder_heads": 2,
            "ffn_dim": 64, "dropout": 0.1, "frames": 6
        },
        "pretrain": {"epochs": 2, "batch_size": 4, "heldout_fraction": 0.2},
        "finetune": {"epochs": 2, "batch_size": 4, "heldout_fraction": 0.4}
    })
    .to_string()
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary launches")
}

fn assert_ok(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.json"), tiny_config()).unwrap();
        Workspace { dir }
    }
    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).display().to_string()
    }
}

fn synth_into(ws: &Workspace, out: &str) {
    let out_dir = ws.path(out);
    let cfg = ws.path("config.json");
    assert_ok(&run(&["synth", "--config", &cfg, "--out", &out_dir]));
}

#[test]
fn synth_output_parses_and_satisfies_invariants() {
    let ws = Workspace::new();
    synth_into(&ws, "data");
    let mut count = 0;
    for entry in std::fs::read_dir(ws.path("data")).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let seq = parse_sequence(&text).unwrap();
        count += 1;
        // invariant scan
        let times = seq.time_indices();
        for w in times.windows(2) {
            assert!(w[0] < w[1]);
        }
        for &t in &times {
            for ch in [Chirality::Left, Chirality::Right] {
                let frames: Vec<_> = seq
                    .frames
                    .iter()
                    .filter(|f| f.time_index == t && f.chirality == ch)
                    .collect();
                assert_eq!(frames.len(), 1, "one frame per chirality per time");
                for f in frames {
                    assert!(f.confidence.iter().all(|&c| (0.0..=1.0).contains(&c)));
                    assert!(f.joints.iter().all(|j| j[0].is_finite() && j[1].is_finite()));
                }
            }
        }
        assert!(seq.label.is_some());
    }
    assert_eq!(count, 12);
}

#[test]
fn synth_same_seed_is_byte_identical_and_respects_force() {
    let ws = Workspace::new();
    synth_into(&ws, "a");
    synth_into(&ws, "b");
    let mut names: Vec<String> = std::fs::read_dir(ws.path("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for n in &names {
        let a = std::fs::read(Path::new(&ws.path("a")).join(n)).unwrap();
        let b = std::fs::read(Path::new(&ws.path("b")).join(n)).unwrap();
        assert_eq!(a, b, "{n} differs between identically-seeded runs");
    }
    // overwrite refused without --force (exit code 1), allowed with it
    let cfg = ws.path("config.json");
    let out_dir = ws.path("a");
    let refused = run(&["synth", "--config", &cfg, "--out", &out_dir]);
    assert_eq!(refused.status.code(), Some(1));
    assert_ok(&run(&["synth", "--config", &cfg, "--out", &out_dir, "--force"]));
}

#[test]
fn pipeline_pretrain_eval_finetune_reconstruct() {
    let ws = Workspace::new();
    synth_into(&ws, "data");
    let cfg = ws.path("config.json");
    let data = ws.path("data");

    let pre = ws.path("pre");
    assert_ok(&run(&["pretrain", "--config", &cfg, "--data", &data, "--out", &pre]));
    let ckpt = ws.path("pre/checkpoint.sbc");
    assert!(Path::new(&ckpt).exists());
    // training log has one JSON line per epoch with the expected fields
    let log = std::fs::read_to_string(ws.path("pre/train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for line in lines {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "loss_rec", "loss_reg", "loss_total", "heldout_pck20", "lr"] {
            assert!(row.get(key).is_some(), "missing {key} in {row}");
        }
    }

    let eval_out = ws.path("eval.json");
    assert_ok(&run(&[
        "eval", "--config", &cfg, "--data", &data, "--checkpoint", &ckpt, "--out", &eval_out,
    ]));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert_eq!(eval["kind"], "reconstruction");
    assert!(eval["input_pck20"].as_f64().unwrap() > 0.0);

    let ft = ws.path("ft");
    assert_ok(&run(&[
        "finetune", "--config", &cfg, "--data", &data, "--out", &ft, "--checkpoint", &ckpt,
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("ft/metrics.json")).unwrap())
            .unwrap();
    for key in ["top1_pi", "top5_pi", "top1_pc", "top5_pc", "per_class_counts"] {
        assert!(report.get(key).is_some());
    }

    let ft_eval = ws.path("eval_cls.json");
    assert_ok(&run(&[
        "eval", "--config", &cfg, "--data", &data,
        "--checkpoint", &ws.path("ft/checkpoint.sbc"), "--out", &ft_eval,
    ]));

    // eval with fused scores from the finetune run
    let fused_out = ws.path("eval_fused.json");
    assert_ok(&run(&[
        "eval", "--config", &cfg, "--data", &data,
        "--checkpoint", &ws.path("ft/checkpoint.sbc"), "--out", &fused_out,
        "--fuse", &ws.path("ft/scores.json"),
    ]));

    let recon = ws.path("recon");
    assert_ok(&run(&[
        "reconstruct", "--config", &cfg, "--data", &data, "--checkpoint", &ckpt, "--out", &recon,
    ]));
    let first = std::fs::read_to_string(
        std::fs::read_dir(&recon).unwrap().next().unwrap().unwrap().path(),
    )
    .unwrap();
    let dump: serde_json::Value = serde_json::from_str(&first).unwrap();
    let frames = dump["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 12); // 2T tokens with T=6
    for key in ["t", "hand", "target", "masked_input", "reconstruction", "joints3d"] {
        assert!(frames[0].get(key).is_some(), "missing {key}");
    }
    assert_eq!(frames[0]["target"].as_array().unwrap().len(), 21);
}

#[test]
fn identical_runs_produce_identical_losses_and_checkpoints() {
    let ws = Workspace::new();
    synth_into(&ws, "data");
    let cfg = ws.path("config.json");
    let data = ws.path("data");
    for out in ["r1", "r2"] {
        let out_dir = ws.path(out);
        assert_ok(&run(&["pretrain", "--config", &cfg, "--data", &data, "--out", &out_dir]));
    }
    let log1 = std::fs::read_to_string(ws.path("r1/train_log.jsonl")).unwrap();
    let log2 = std::fs::read_to_string(ws.path("r2/train_log.jsonl")).unwrap();
    assert_eq!(log1, log2);
    let ck1 = std::fs::read(ws.path("r1/checkpoint.sbc")).unwrap();
    let ck2 = std::fs::read(ws.path("r2/checkpoint.sbc")).unwrap();
    assert_eq!(ck1, ck2);
}

#[test]
fn identity_baseline_eval_matches_input_metrics_exactly() {
    let ws = Workspace::new();
    synth_into(&ws, "data");
    let cfg_path = ws.path("config_identity.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&tiny_config()).unwrap();
    cfg["eval"] = serde_json::json!({"identity_baseline": true});
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let data = ws.path("data");
    let pre = ws.path("pre");
    assert_ok(&run(&["pretrain", "--config", &cfg_path, "--data", &data, "--out", &pre]));
    let out = ws.path("eval_identity.json");
    assert_ok(&run(&[
        "eval", "--config", &cfg_path, "--data", &data,
        "--checkpoint", &ws.path("pre/checkpoint.sbc"), "--out", &out,
    ]));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(eval["output_pck20"], eval["input_pck20"]);
    assert_eq!(eval["output_auc"], eval["input_auc"]);
}

#[test]
fn validation_failures_exit_with_code_one() {
    let ws = Workspace::new();
    // unknown config key
    let bad_cfg = ws.path("bad.json");
    std::fs::write(&bad_cfg, r#"{"no_such_section": 1}"#).unwrap();
    let out_dir = ws.path("x");
    let out = run(&["synth", "--config", &bad_cfg, "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(1));
    // missing data directory
    let cfg = ws.path("config.json");
    let nowhere = ws.path("nope");
    let pre = ws.path("pre");
    let out = run(&["pretrain", "--config", &cfg, "--data", &nowhere, "--out", &pre]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_hash_mismatch_is_rejected_with_both_hashes() {
    let ws = Workspace::new();
    synth_into(&ws, "data");
    let cfg = ws.path("config.json");
    let data = ws.path("data");
    let pre = ws.path("pre");
    assert_ok(&run(&["pretrain", "--config", &cfg, "--data", &data, "--out", &pre]));
    // a different config (changed lambda) must be refused at eval
    let mut other: serde_json::Value = serde_json::from_str(&tiny_config()).unwrap();
    other["pretrain"]["lambda"] = serde_json::json!(0.02);
    let other_path = ws.path("other.json");
    std::fs::write(&other_path, other.to_string()).unwrap();
    let out_file = ws.path("eval.json");
    let out = run(&[
        "eval", "--config", &other_path, "--data", &data,
        "--checkpoint", &ws.path("pre/checkpoint.sbc"), "--out", &out_file,
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("hash mismatch"), "{stderr}");
}
