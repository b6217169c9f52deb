#!/usr/bin/env python3
"""Build the signpose_py extension, then run a tiny end-to-end pipeline:
synth -> pretrain -> finetune -> evaluate, plus the metric helpers."""

import json
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_extension() -> Path:
    subprocess.run(
        ["cargo", "build", "--release", "-p", "signpose-py"],
        cwd=REPO,
        check=True,
    )
    built = REPO / "target" / "release" / "libsignpose_py.so"
    stage = Path(tempfile.mkdtemp(prefix="signpose_py_"))
    shutil.copy(built, stage / "signpose_py.so")
    return stage


def main() -> int:
    sys.path.insert(0, str(build_extension()))
    import signpose_py as sp

    cfg = json.loads(sp.default_config())
    cfg["seed"] = 9
    cfg["synth"] = {
        "class_count": 3,
        "sequences_per_class": 4,
        "sequence_length": 10,
        "noise_sigma": 0.01,
        "dropout_rate": 0.02,
        "frame_drop_rate": 0.02,
        "seed": 9,
    }
    cfg["asset"]["seed"] = 9
    cfg["model"] = {
        "embed_dim": 32,
        "encoder_layers": 1,
        "encoder_heads": 2,
        "ffn_dim": 64,
        "dropout": 0.0,
        "frames": 6,
    }
    cfg["pretrain"]["epochs"] = 2
    cfg["pretrain"]["batch_size"] = 4
    cfg["finetune"]["epochs"] = 2
    cfg["finetune"]["batch_size"] = 4
    cfg["finetune"]["heldout_fraction"] = 0.4
    cfg_json = json.dumps(cfg)

    work = Path(tempfile.mkdtemp(prefix="signpose_smoke_"))
    data = work / "data"

    n = sp.synth(cfg_json, str(data))
    assert n == 12, f"expected 12 sequences, got {n}"
    print(f"synth: {n} sequences")

    pre_ck = work / "pretrain.sbc"
    logs = json.loads(sp.pretrain(cfg_json, str(data), str(pre_ck)))
    assert len(logs) == 2 and math.isfinite(logs[-1]["loss_total"])
    print(f"pretrain: final loss {logs[-1]['loss_total']:.3f}")

    info = json.loads(sp.checkpoint_info(str(pre_ck)))
    assert info["kind"] == "pretrain" and info["epoch"] == 2

    recon_eval = json.loads(sp.evaluate(cfg_json, str(data), str(pre_ck)))
    assert recon_eval["kind"] == "reconstruction"
    assert 0.0 <= recon_eval["output_pck20"] <= 1.0
    print(
        f"evaluate(pretrain): input_pck20 {recon_eval['input_pck20']:.3f}, "
        f"output_pck20 {recon_eval['output_pck20']:.3f}"
    )

    ft_ck = work / "finetune.sbc"
    report = json.loads(sp.finetune(cfg_json, str(data), str(ft_ck), str(pre_ck)))
    assert 0.0 <= report["top1_pi"] <= 1.0
    print(f"finetune: top1_pi {report['top1_pi']:.3f}")

    cls_eval = json.loads(sp.evaluate(cfg_json, str(data), str(ft_ck)))
    assert cls_eval["top5_pi"] >= cls_eval["top1_pi"]

    # one-sequence reconstruction dump
    seq_path = sorted(data.glob("*.json"))[0]
    dump = json.loads(sp.reconstruct(cfg_json, seq_path.read_text(), str(pre_ck)))
    assert len(dump["frames"]) == 2 * cfg["model"]["frames"]
    assert len(dump["frames"][0]["reconstruction"]) == 21

    # metric helpers
    gt = [(float(i), 0.0) for i in range(10)]
    pred = [(float(i) + 3.0, 4.0) for i in range(10)]  # distance 5 everywhere
    assert sp.pck(pred, gt, 20.0, [True] * 10) == 1.0
    assert sp.pck(pred, gt, 4.0, [True] * 10) == 0.0
    assert sp.auc(pred, gt, [True] * 10) == 1.0
    acc = sp.topk_accuracy([[0.9, 0.1], [0.2, 0.8]], [0, 1], 1, "per_instance")
    assert acc == 1.0
    fused = sp.fuse_logits([1.0, 2.0], [0.5, -1.0])
    assert fused == [1.5, 1.0]

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
