"""Iteration-weighted training: loss schedule, Adam, the loop, checkpoints.

Losses are supervised at every recurrence iteration with weights
w_t = alpha**(N-t); alpha = 1 weighs all iterations equally, alpha < 1
shifts the emphasis onto the final prediction. Checkpoints are a small
binary container (magic "RUNT") holding the model config, flat named
float payloads, optimizer state, and the RNG state, CRC32-checked.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
import tempfile
import time
import zlib
from collections import OrderedDict
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import ops
from .config import ModelConfig, TrainConfig, config_to_dict
from .metrics import ConfusionCounts, confusion_counts, metrics_from_counts
from .recurrent import build_model, recurrent_forward
from .tensor import ConfigError, NumericsError, Tensor, backward, no_grad

METRICS_CSV_HEADER = "epoch,split,iteration,miou,mrec,mprec,f1,loss"

CHECKPOINT_MAGIC = b"RUNT"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


def iteration_weights(n: int, alpha: float) -> list[float]:
    """[alpha**(n-1), ..., alpha, 1]: nondecreasing, final weight 1.

    Computed in exact rational arithmetic so the stated decimal values
    (e.g. 0.16 for alpha=0.4, n=3) hold exactly after float conversion.
    """
    if n < 1:
        raise ConfigError(f"iteration count must be >= 1, got {n}")
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    a = Fraction(str(alpha))
    return [float(a ** (n - t)) for t in range(1, n + 1)]


def recurrent_loss(logits_list, target: Tensor, weights) -> Tensor:
    """Weighted sum of per-iteration BCE losses, as one scalar tensor."""
    if len(logits_list) != len(weights):
        raise ConfigError(
            f"{len(logits_list)} logit maps but {len(weights)} weights"
        )
    total = None
    for logits, w in zip(logits_list, weights):
        term = ops.mul(ops.bce_with_logits(logits, target), float(w))
        total = term if total is None else ops.add(total, term)
    return total


class Adam:
    """Adam over named parameters; grads must be zeroed between steps."""

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint container


@dataclasses.dataclass
class Checkpoint:
    version: int
    model_config: dict
    epoch: int
    rng_state: dict | None
    optimizer: dict | None
    params: "OrderedDict[str, np.ndarray]"
    adam_m: "OrderedDict[str, np.ndarray]"
    adam_v: "OrderedDict[str, np.ndarray]"


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"cannot store dtype {arr.dtype} for {name}")
    payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<Q", len(payload))
    return head + payload


def save_checkpoint(
    path,
    model_config: ModelConfig,
    params: "OrderedDict[str, np.ndarray] | dict",
    optimizer: Adam | None = None,
    epoch: int = 0,
    rng_state: dict | None = None,
):
    """Atomic write: temp file in the target directory, then rename."""
    meta = {
        "model_config": config_to_dict(model_config),
        "epoch": epoch,
        "rng_state": rng_state,
        "optimizer": None,
    }
    records = [("param/" + name, arr) for name, arr in params.items()]
    if optimizer is not None:
        meta["optimizer"] = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step": optimizer.t,
        }
        records += [("adam.m/" + name, arr) for name, arr in optimizer.m.items()]
        records += [("adam.v/" + name, arr) for name, arr in optimizer.v.items()]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(meta_bytes)) + meta_bytes
    blob += struct.pack("<I", len(records))
    for name, arr in records:
        blob += _pack_record(name, arr)
    blob += struct.pack("<I", zlib.crc32(blob))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        return struct.unpack("<" + fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a runet checkpoint (bad magic)")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt or truncated")
    r = _Reader(blob[:-4])
    r.take(4)
    version = r.u("I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} != supported {CHECKPOINT_VERSION}"
        )
    meta = json.loads(r.take(r.u("I")).decode("utf-8"))
    n_records = r.u("I")
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    adam_m: OrderedDict[str, np.ndarray] = OrderedDict()
    adam_v: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(n_records):
        name = r.take(r.u("H")).decode("utf-8")
        code = r.u("B")
        ndim = r.u("B")
        shape = tuple(r.u("I") for _ in range(ndim))
        nbytes = r.u("Q")
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(
                f"{path}: record {name} payload {nbytes} bytes != shape {shape}"
            )
        arr = np.frombuffer(r.take(nbytes), dtype=dtype.newbyteorder("<"))
        arr = arr.astype(dtype).reshape(shape)
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("adam.m/"):
            adam_m[name[len("adam.m/"):]] = arr
        elif name.startswith("adam.v/"):
            adam_v[name[len("adam.v/"):]] = arr
        else:
            raise CheckpointError(f"{path}: unknown record kind {name}")
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing bytes")
    return Checkpoint(
        version=version,
        model_config=meta["model_config"],
        epoch=meta["epoch"],
        rng_state=meta.get("rng_state"),
        optimizer=meta.get("optimizer"),
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
    )


# ---------------------------------------------------------------------------
# the loop


@dataclasses.dataclass
class TrainResult:
    best_miou: float
    best_epoch: int
    epochs_run: int
    checkpoint_path: str
    metrics_path: str
    seconds: float


def _batch_arrays(samples, indices, dtype, rng=None, hflip=False):
    images, masks = [], []
    for i in indices:
        img = samples[i].image
        mask = samples[i].mask
        if hflip and rng.random() < 0.5:
            img = img[:, :, ::-1]
            mask = mask[:, :, ::-1]
        images.append(img)
        masks.append(mask)
    x = np.ascontiguousarray(np.stack(images), dtype=dtype)
    y = np.ascontiguousarray(np.stack(masks), dtype=dtype)
    return Tensor(x), Tensor(y)


def _epoch_rows(epoch, split, n_iter, counts, loss_sums, n_batches):
    rows = []
    for t in range(n_iter):
        rep = metrics_from_counts(counts[t])
        loss = loss_sums[t] / max(n_batches, 1)
        rows.append(
            f"{epoch},{split},{t + 1},{rep.miou:.6f},{rep.mrec:.6f},"
            f"{rep.mprec:.6f},{rep.mf1:.6f},{loss:.6f}"
        )
    return rows


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_samples,
    val_samples,
    out_dir,
    model=None,
    log=None,
) -> TrainResult:
    """Train, log per-epoch metrics to CSV, keep the best-val-mIoU checkpoint.

    The RNG stream (seeded from train_cfg.seed) drives init, shuffling and
    augmentation, so a repeated run reproduces metrics.csv byte for byte.
    """
    model_cfg.validate()
    train_cfg.validate()
    if model_cfg.n_classes != 1:
        raise ConfigError("training supports single-class (binary) models")
    if not train_samples:
        raise ConfigError("training split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = np.float32 if train_cfg.precision == "float32" else np.float64
    rng = np.random.default_rng(train_cfg.seed)
    if model is None:
        model = build_model(model_cfg, rng, dtype=dtype)
    n_iter = model_cfg.iterations
    weights = iteration_weights(n_iter, train_cfg.alpha)
    optimizer = Adam(
        model.named_parameters(),
        lr=train_cfg.learning_rate,
        beta1=train_cfg.beta1,
        beta2=train_cfg.beta2,
        eps=train_cfg.adam_eps,
    )

    csv_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "best.ckpt"
    start = time.monotonic()
    best_miou = -1.0
    best_epoch = 0
    epochs_run = 0

    with open(csv_path, "w", encoding="utf-8") as csv:
        csv.write(METRICS_CSV_HEADER + "\n")
        for epoch in range(1, train_cfg.epochs + 1):
            order = rng.permutation(len(train_samples))
            counts = [ConfusionCounts() for _ in range(n_iter)]
            loss_sums = [0.0] * n_iter
            n_batches = 0
            for lo in range(0, len(order), train_cfg.batch_size):
                idx = order[lo : lo + train_cfg.batch_size]
                x, y = _batch_arrays(
                    train_samples, idx, dtype,
                    rng=rng, hflip=train_cfg.augment_hflip,
                )
                logits_list = recurrent_forward(model, x, n_iter)
                terms = [ops.bce_with_logits(lg, y) for lg in logits_list]
                total = None
                for term, w in zip(terms, weights):
                    piece = ops.mul(term, float(w))
                    total = piece if total is None else ops.add(total, piece)
                loss_value = total.item()
                if not math.isfinite(loss_value):
                    raise NumericsError(
                        f"training loss is non-finite at epoch {epoch}, "
                        f"batch {n_batches + 1}"
                    )
                backward(total)
                optimizer.step()
                optimizer.zero_grad()
                for t, (lg, term) in enumerate(zip(logits_list, terms)):
                    prob = ops._sigmoid(lg.data)
                    counts[t].merge(confusion_counts(prob, y.data, 0.5))
                    loss_sums[t] += term.item()
                n_batches += 1
            rows = _epoch_rows(epoch, "train", n_iter, counts, loss_sums, n_batches)

            if val_samples:
                vcounts = [ConfusionCounts() for _ in range(n_iter)]
                vloss = [0.0] * n_iter
                vbatches = 0
                with no_grad():
                    for lo in range(0, len(val_samples), train_cfg.batch_size):
                        idx = range(lo, min(lo + train_cfg.batch_size, len(val_samples)))
                        x, y = _batch_arrays(val_samples, idx, dtype)
                        logits_list = recurrent_forward(model, x, n_iter)
                        for t, lg in enumerate(logits_list):
                            prob = ops._sigmoid(lg.data)
                            vcounts[t].merge(confusion_counts(prob, y.data, 0.5))
                            vloss[t] += ops.bce_with_logits(lg, y).item()
                        vbatches += 1
                rows += _epoch_rows(epoch, "val", n_iter, vcounts, vloss, vbatches)
                epoch_miou = metrics_from_counts(vcounts[-1]).miou
            else:
                epoch_miou = metrics_from_counts(counts[-1]).miou

            csv.write("\n".join(rows) + "\n")
            csv.flush()
            epochs_run = epoch
            if log is not None:
                log(
                    f"epoch {epoch}/{train_cfg.epochs}: "
                    f"val mIoU(t={n_iter}) {epoch_miou:.4f}, "
                    f"loss {loss_sums[-1] / max(n_batches, 1):.4f}"
                )
            if epoch_miou > best_miou:
                best_miou = epoch_miou
                best_epoch = epoch
                save_checkpoint(
                    ckpt_path,
                    model_cfg,
                    model.state_dict(),
                    optimizer=optimizer,
                    epoch=epoch,
                    rng_state=_rng_state_dict(rng),
                )
            if train_cfg.max_seconds and time.monotonic() - start > train_cfg.max_seconds:
                break

    return TrainResult(
        best_miou=best_miou,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        checkpoint_path=str(ckpt_path),
        metrics_path=str(csv_path),
        seconds=time.monotonic() - start,
    )


def _rng_state_dict(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))
