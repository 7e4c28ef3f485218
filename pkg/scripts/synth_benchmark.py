#!/usr/bin/env python3
"""Train the dual-gate recurrent U-Net and the plain U-Net baseline on the
synthetic curves task under an identical budget and print the comparison,
including the per-iteration refinement curve.

Usage: python scripts/synth_benchmark.py [epochs] [out_dir]
"""

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from runet.config import ModelConfig, TrainConfig
from runet.data import synth_generate
from runet.metrics import evaluate
from runet.recurrent import build_model
from runet.training import load_checkpoint, train


def main():
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 15
    out_root = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("runs/synth_benchmark")
    samples = synth_generate(7, 500, 64, 64, "curves")
    train_s, val_s = samples[:400], samples[400:]

    settings = {
        "dru4": ModelConfig(variant="dru", level=4, in_channels=1, iterations=3),
        "sru4": ModelConfig(variant="sru", level=4, in_channels=1, iterations=3),
        "unet": ModelConfig(variant="unet", level=0, in_channels=1, iterations=1),
        "rec_simple": ModelConfig(variant="rec_simple", in_channels=1, iterations=3),
    }
    results = {}
    for name, model_cfg in settings.items():
        train_cfg = TrainConfig(alpha=0.4, epochs=epochs, seed=0)
        t0 = time.time()
        res = train(model_cfg, train_cfg, train_s, val_s, out_root / name, log=None)
        results[name] = res
        print(f"{name:<11} best val mIoU {res.best_miou:.4f} "
              f"(epoch {res.best_epoch}, {time.time() - t0:.0f}s)")

    print("\nper-iteration refinement of the best dual-gate model:")
    ckpt = load_checkpoint(results["dru4"].checkpoint_path)
    model = build_model(ModelConfig(**ckpt.model_config), np.random.default_rng(0))
    model.load_state_dict(ckpt.params)
    for rep in evaluate(model, val_s, iterations=3):
        print(f"  t={rep.iteration}: mIoU {rep.miou:.4f}  mRec {rep.mrec:.4f}  "
              f"mPrec {rep.mprec:.4f}  P/R {rep.pr_breakeven:.4f}")


if __name__ == "__main__":
    main()
