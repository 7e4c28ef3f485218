"""Command-line entry points: train, eval, predict, bench, synth, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Heavy
imports happen inside the command functions so that --threads can cap the
BLAS pool before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="runet",
        description="Recurrent U-Net segmentation engine",
    )
    parser.add_argument("--threads", type=int, default=0,
                        help="cap BLAS/OpenMP threads (takes effect on process start)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, one row per iteration")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None,
                   help="config supplying the data section (and the model when --random-init)")
    p.add_argument("--manifest", default=None, help="dataset manifest (overrides config data)")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--iterations", type=int, default=None,
                   help="run the recurrence for this many steps")
    p.add_argument("--random-init", action="store_true",
                   help="evaluate a freshly initialized model instead of a checkpoint")
    p.add_argument("--seed", type=int, default=0, help="init seed for --random-init")
    p.add_argument("--out", default=None, help="directory for eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write per-iteration masks for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default="predict_out")
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="parameter count and forward latency")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--input-size", default="256x256", help="HxW, multiples of 16")
    p.add_argument("--repetitions", type=int, default=30)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", action="store_true", help="print the per-layer breakdown")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="emit a synthetic dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--task", default="curves", choices=("curves", "blobs"))
    p.add_argument("--train", type=int, default=400)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--size", default="64x64", help="HxW, multiples of 16")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of ops and a full model")
    p.add_argument("--seeds", type=int, default=3, help="number of random seeds")
    p.add_argument("--skip-model", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .tensor import ConfigError, NumericsError, ShapeError
    from .training import CheckpointError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeError, NumericsError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _parse_size(text: str):
    from .tensor import ConfigError

    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--input-size/--size wants HxW, got '{text}'") from None
    if h % 16 or w % 16:
        raise ConfigError(f"sizes must be multiples of 16, got {h}x{w}")
    return h, w


def _load_samples(data_cfg):
    """(train, val, test) sample lists from a data config section."""
    from .data import load_split, read_manifest, synth_generate
    from .tensor import ConfigError

    if data_cfg.source == "synth":
        total = data_cfg.synth_train + data_cfg.synth_val + data_cfg.synth_test
        samples = synth_generate(
            data_cfg.synth_seed, total, data_cfg.height, data_cfg.width,
            data_cfg.synth_task,
        )
        a = data_cfg.synth_train
        b = a + data_cfg.synth_val
        return samples[:a], samples[a:b], samples[b:]
    manifest = read_manifest(data_cfg.manifest)
    splits = tuple(load_split(manifest, s) for s in ("train", "val", "test"))
    for split in splits:
        shapes = {s.image.shape[1:] for s in split}
        if len(shapes) > 1 and not data_cfg.patch_size:
            raise ConfigError(
                f"samples have mixed sizes {sorted(shapes)}; set data.patch_size"
            )
    return splits


def cmd_train(args) -> int:
    from .config import load_config, render_config
    from .data import extract_training_patches
    from .training import train

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.ini").write_text(render_config(cfg), encoding="utf-8")

    train_samples, val_samples, _ = _load_samples(cfg.data)
    if cfg.data.patch_size:
        stride = cfg.data.patch_stride or cfg.data.patch_size
        train_samples = extract_training_patches(train_samples, cfg.data.patch_size, stride)
        val_samples = extract_training_patches(val_samples, cfg.data.patch_size, stride)

    result = train(cfg.model, cfg.train, train_samples, val_samples, out_dir, log=print)
    print(
        f"done: best val mIoU {result.best_miou:.4f} at epoch {result.best_epoch} "
        f"({result.epochs_run} epochs, {result.seconds:.1f}s)"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return EXIT_OK


def _restore_model(checkpoint_path, iterations=None, dtype=None):
    import numpy as np

    from .config import model_config_from_dict
    from .recurrent import build_model
    from .training import load_checkpoint

    ckpt = load_checkpoint(checkpoint_path)
    model_cfg = model_config_from_dict(ckpt.model_config)
    model = build_model(model_cfg, np.random.default_rng(0),
                        dtype=dtype or np.float32)
    model.load_state_dict(ckpt.params)
    if iterations is not None:
        model_cfg.iterations = iterations
    return model, model_cfg


_EVAL_COLUMNS = (
    "iteration,miou,mrec,mprec,f1,pr_breakeven,fg_iou,fg_recall,fg_precision,loss"
)


def _eval_rows(reports):
    rows = []
    for rep in reports:
        loss = "" if rep.loss is None else f"{rep.loss:.6f}"
        pr = "" if rep.pr_breakeven is None else f"{rep.pr_breakeven:.6f}"
        rows.append(
            f"{rep.iteration},{rep.miou:.6f},{rep.mrec:.6f},{rep.mprec:.6f},"
            f"{rep.mf1:.6f},{pr},{rep.fg_iou:.6f},{rep.fg_recall:.6f},"
            f"{rep.fg_precision:.6f},{loss}"
        )
    return rows


def cmd_eval(args) -> int:
    import numpy as np

    from .config import load_config
    from .data import load_split, read_manifest
    from .metrics import evaluate, evaluate_patched
    from .recurrent import build_model
    from .tensor import ConfigError

    cfg = load_config(args.config) if args.config else None
    if args.random_init:
        if cfg is None:
            raise ConfigError("--random-init needs --config for the model section")
        model = build_model(cfg.model, np.random.default_rng(args.seed))
        model_cfg = cfg.model
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --random-init)")
        model, model_cfg = _restore_model(args.checkpoint)

    patch_size = cfg.data.patch_size if cfg else 0
    patch_stride = (cfg.data.patch_stride or patch_size) if cfg else 0
    if args.manifest:
        manifest = read_manifest(args.manifest)
        samples = load_split(manifest, args.split)
    else:
        if cfg is None:
            raise ConfigError("eval needs --manifest or --config with a data section")
        train_s, val_s, test_s = _load_samples(cfg.data)
        samples = {"train": train_s, "val": val_s, "test": test_s}[args.split]
    if not samples:
        raise ConfigError(f"split '{args.split}' is empty")

    iterations = args.iterations if args.iterations else model_cfg.iterations
    if patch_size:
        reports = evaluate_patched(
            model, samples, patch_size, patch_stride, iterations=iterations
        )
    else:
        reports = evaluate(model, samples, iterations=iterations)

    print(_EVAL_COLUMNS)
    rows = _eval_rows(reports)
    print("\n".join(rows))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval.csv").write_text(
            _EVAL_COLUMNS + "\n" + "\n".join(rows) + "\n", encoding="utf-8"
        )
        print(f"wrote {out_dir / 'eval.csv'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import load_image, save_mask_png, save_prob_pgm
    from .metrics import predict_probabilities
    from .tensor import ConfigError

    model, model_cfg = _restore_model(args.checkpoint)
    if model_cfg.n_classes != 1:
        raise ConfigError("predict supports single-class models")
    image = load_image(args.image)
    if image.shape[0] != model_cfg.in_channels:
        raise ConfigError(
            f"image has {image.shape[0]} channels, model wants {model_cfg.in_channels}"
        )
    iterations = args.iterations if args.iterations else model_cfg.iterations
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    probs = predict_probabilities(model, image, iterations)
    for t, prob in enumerate(probs, start=1):
        quantized = save_prob_pgm(out_dir / f"prob_t{t}.pgm", prob[0])
        save_mask_png(out_dir / f"mask_t{t}.png", quantized >= 128)
    print(f"wrote {len(probs)} mask/probability pairs to {out_dir}")
    return EXIT_OK


def cmd_bench(args) -> int:
    import numpy as np

    from .blocks import count_parameters
    from .config import load_config
    from .recurrent import build_model, recurrent_forward
    from .tensor import ConfigError, Tensor, no_grad

    if args.checkpoint:
        model, model_cfg = _restore_model(args.checkpoint)
    elif args.config:
        cfg = load_config(args.config)
        model_cfg = cfg.model
        model = build_model(model_cfg, np.random.default_rng(args.seed))
    else:
        raise ConfigError("bench needs --checkpoint or --config")

    h, w = _parse_size(args.input_size)
    n_iter = args.iterations if args.iterations else model_cfg.iterations
    total, rows = count_parameters(model)
    print(f"model: {model_cfg.variant}({model_cfg.level}) iterations={n_iter}")
    print(f"parameters: {total}")
    if args.params:
        for name, shape, count in rows:
            print(f"  {name:<48} {str(tuple(shape)):<20} {count}")

    rng = np.random.default_rng(args.seed)
    x = Tensor(rng.uniform(0, 1, size=(1, model_cfg.in_channels, h, w)).astype(np.float32))

    def run(iters):
        with no_grad():
            recurrent_forward(model, x, iters)

    for _ in range(10):
        run(n_iter)
    totals, singles = [], []
    for _ in range(args.repetitions):
        t0 = time.perf_counter()
        run(n_iter)
        totals.append((time.perf_counter() - t0) * 1000.0)
        t0 = time.perf_counter()
        run(1)
        singles.append((time.perf_counter() - t0) * 1000.0)
    med_total = statistics.median(totals)
    med_single = statistics.median(singles)
    print(f"input: 1x{model_cfg.in_channels}x{h}x{w}")
    print(f"latency (1 iteration):  {med_single:.2f} ms")
    print(f"latency ({n_iter} iterations): {med_total:.2f} ms "
          f"({med_total / n_iter:.2f} ms/iteration)")
    print(f"fps: {1000.0 / med_total:.1f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import synth_to_disk

    h, w = _parse_size(args.size)
    counts = {"train": args.train, "val": args.val, "test": args.test}
    manifest = synth_to_disk(args.out, args.task, counts, args.seed, h, w)
    print(f"wrote {sum(counts.values())} samples; manifest: {manifest}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checksuite import model_check, run_op_checks

    print(f"op gradient checks ({args.seeds} seeds):")
    failures, _ = run_op_checks(seeds=range(args.seeds), log=print)
    if not args.skip_model:
        print("whole-model check (dual-gate unit at level 3, 16x16):")
        worst, bad = model_check(seed=0)
        status = "FAIL" if bad else "PASS"
        print(f"  {status} model                  worst rel err {worst:.3g}")
        failures += bad
    if failures:
        print(f"{len(failures)} failures", file=sys.stderr)
        for f in failures[:20]:
            print(f"  {f}", file=sys.stderr)
        return EXIT_RUNTIME
    print("all gradient checks passed")
    return EXIT_OK


def console_entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
