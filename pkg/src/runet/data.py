"""Dataset ingestion (image + binary mask pairs), synthetic task
generation, and sliding-window patch tiling.

Manifests are plain text, one `split<TAB>image_path<TAB>mask_path` line
per sample, paths relative to the manifest file. Images may be PNG, PGM
(P5), or PPM (P6); values are scaled to [0,1] and masks binarized at 0.5.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ConfigError, ShapeError

SPLITS = ("train", "val", "test")


@dataclasses.dataclass
class SegmentationSample:
    image: np.ndarray  # (C,H,W) float32 in [0,1]
    mask: np.ndarray  # (1,H,W) float32 in {0,1}
    id: str

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ShapeError(
                f"sample {self.id}: image {self.image.shape} vs mask "
                f"{self.mask.shape} spatial dims differ"
            )


@dataclasses.dataclass
class ManifestEntry:
    split: str
    image_path: Path
    mask_path: Path


@dataclasses.dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def load_image(path) -> np.ndarray:
    """Decode to (C,H,W) float32 in [0,1]; grayscale stays single-channel."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from None
    if img.mode in ("I", "I;16"):
        arr = np.asarray(img, dtype=np.float32) / 65535.0
        return arr[None]
    if img.mode == "L":
        return np.asarray(img, dtype=np.float32)[None] / 255.0
    if img.mode != "RGB":
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read mask {path}: {exc}") from None
    if img.mode in ("I", "I;16"):
        arr = np.asarray(img, dtype=np.float32) / 65535.0
    else:
        if img.mode != "L":
            img = img.convert("L")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return (arr >= 0.5).astype(np.float32)[None]


def save_gray_png(path, values: np.ndarray):
    """(H,W) floats in [0,1] -> 8-bit grayscale PNG."""
    u8 = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def save_mask_png(path, mask: np.ndarray):
    """(H,W) boolean/binary -> strictly {0,255} PNG."""
    u8 = np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def save_prob_pgm(path, prob: np.ndarray) -> np.ndarray:
    """(H,W) floats -> 8-bit binary PGM (P5); returns the quantized map."""
    u8 = np.rint(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path, format="PPM")
    return u8


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    split_by_image: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError(
                f"{path}:{lineno}: expected 'split<TAB>image<TAB>mask', got {line!r}"
            )
        split, image_rel, mask_rel = (p.strip() for p in parts)
        if split not in SPLITS:
            raise ConfigError(f"{path}:{lineno}: unknown split '{split}'")
        image_path = (root / image_rel).resolve()
        mask_path = (root / mask_rel).resolve()
        for p in (image_path, mask_path):
            if not p.is_file():
                raise ConfigError(f"{path}:{lineno}: missing file {p}")
        key = str(image_path)
        if split_by_image.get(key, split) != split:
            raise ConfigError(
                f"{path}:{lineno}: {image_rel} appears in both "
                f"'{split_by_image[key]}' and '{split}' splits"
            )
        split_by_image[key] = split
        entries.append(ManifestEntry(split, image_path, mask_path))
    if not entries:
        raise ConfigError(f"manifest {path} lists no samples")
    return DatasetManifest(root=root, entries=entries)


def load_split(manifest: DatasetManifest, split: str) -> list[SegmentationSample]:
    samples = []
    for entry in manifest.split_entries(split):
        image = load_image(entry.image_path)
        mask = load_mask(entry.mask_path)
        samples.append(
            SegmentationSample(image=image, mask=mask, id=entry.image_path.stem)
        )
    return samples


# ---------------------------------------------------------------------------
# synthetic tasks


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int = 8) -> np.ndarray:
    """Bilinearly upsampled coarse uniform noise in [0,1]."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(0.0, 1.0, size=(gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def _stamp(mask: np.ndarray, py: np.ndarray, px: np.ndarray, width: int):
    h, w = mask.shape
    for dy in range(-(width // 2), -(width // 2) + width):
        for dx in range(-(width // 2), -(width // 2) + width):
            yy = np.clip(py + dy, 0, h - 1)
            xx = np.clip(px + dx, 0, w - 1)
            mask[yy, xx] = True


def _polyline_masks(rng: np.random.Generator, h: int, w: int):
    """One random-walk polyline of width 1-3 px.

    Returns (mask, visible): the exact ground-truth pixels and the subset
    that keeps image evidence. With probability 1/2 a short run of
    segments is occluded (in `mask` but not `visible`), which is what
    makes iterative refinement earn its keep on this task.
    """
    mask = np.zeros((h, w), dtype=bool)
    visible = np.zeros((h, w), dtype=bool)
    width = int(rng.integers(1, 4))
    y = float(rng.uniform(2, h - 3))
    x = float(rng.uniform(2, w - 3))
    angle = float(rng.uniform(0, 2 * math.pi))
    n_segments = int(rng.integers(6, 13))
    gap = range(0)
    if rng.random() < 0.75 and n_segments >= 5:
        gap_len = int(rng.integers(1, 4))
        gap_start = int(rng.integers(1, n_segments - gap_len))
        gap = range(gap_start, gap_start + gap_len)
    for seg in range(n_segments):
        length = float(rng.uniform(4, 9))
        ny = y + length * math.sin(angle)
        nx = x + length * math.cos(angle)
        steps = max(2, int(2 * length) + 1)
        ts = np.linspace(0.0, 1.0, steps)
        py = np.clip(np.rint(y + (ny - y) * ts), 0, h - 1).astype(int)
        px = np.clip(np.rint(x + (nx - x) * ts), 0, w - 1).astype(int)
        _stamp(mask, py, px, width)
        if seg not in gap:
            _stamp(visible, py, px, width)
        y, x = min(max(ny, 1.0), h - 2.0), min(max(nx, 1.0), w - 2.0)
        angle += float(rng.normal(0.0, 0.5))
    return mask, visible


def draw_polyline(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    return _polyline_masks(rng, h, w)[0]


def _curves_sample(rng, h, w):
    mask = np.zeros((h, w), dtype=bool)
    darkness = np.zeros((h, w), dtype=np.float64)
    for _ in range(int(rng.integers(1, 4))):
        line, visible = _polyline_masks(rng, h, w)
        contrast = rng.uniform(0.15, 0.38)
        mask |= line
        darkness = np.maximum(darkness, contrast * visible)
    bg = 0.35 + 0.4 * _smooth_noise(rng, h, w)
    img = bg - darkness + 0.04 * rng.standard_normal((h, w))
    return np.clip(img, 0.0, 1.0), mask


def _ellipse(rng, h, w, mask):
    cy = rng.uniform(0.2 * h, 0.8 * h)
    cx = rng.uniform(0.2 * w, 0.8 * w)
    a = rng.uniform(h / 16, h / 5)
    b = rng.uniform(w / 16, w / 5)
    theta = rng.uniform(0, math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    u = (yy - cy) * math.cos(theta) + (xx - cx) * math.sin(theta)
    v = -(yy - cy) * math.sin(theta) + (xx - cx) * math.cos(theta)
    mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _blobs_sample(rng, h, w):
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(100):
        mask[:] = False
        for _ in range(int(rng.integers(1, 6))):
            _ellipse(rng, h, w, mask)
        if 0.02 <= mask.mean() <= 0.5:
            break
    else:
        mask[:] = False
        yy, xx = np.mgrid[0:h, 0:w]
        mask |= ((yy - h / 2) / (h / 6)) ** 2 + ((xx - w / 2) / (w / 6)) ** 2 <= 1.0
    bg = 0.25 + 0.35 * _smooth_noise(rng, h, w)
    img = bg + 0.35 * mask + 0.02 * rng.standard_normal((h, w))
    return np.clip(img, 0.0, 1.0), mask


def synth_generate(seed: int, n: int, height: int, width: int, task: str) -> list[SegmentationSample]:
    """Deterministic synthetic samples; `curves` mimics thin elongated
    structures, `blobs` compact regions with 2-50% foreground."""
    if task not in ("blobs", "curves"):
        raise ConfigError(f"unknown synthetic task '{task}'")
    if height % 16 or width % 16:
        raise ConfigError(
            f"synthetic size ({height},{width}) must be a multiple of 16"
        )
    rng = np.random.default_rng(seed)
    gen = _curves_sample if task == "curves" else _blobs_sample
    samples = []
    for i in range(n):
        img, mask = gen(rng, height, width)
        samples.append(
            SegmentationSample(
                image=img[None].astype(np.float32),
                mask=mask[None].astype(np.float32),
                id=f"{task}-{seed}-{i:05d}",
            )
        )
    return samples


def synth_to_disk(out_dir, task, counts: dict, seed: int, height: int, width: int) -> Path:
    """Write PNG image/mask pairs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    total = sum(counts.values())
    samples = synth_generate(seed, total, height, width, task)
    lines = []
    i = 0
    for split in SPLITS:
        for _ in range(counts.get(split, 0)):
            s = samples[i]
            img_rel = f"images/{s.id}.png"
            mask_rel = f"masks/{s.id}.png"
            save_gray_png(out_dir / img_rel, s.image[0])
            save_mask_png(out_dir / mask_rel, s.mask[0])
            lines.append(f"{split}\t{img_rel}\t{mask_rel}")
            i += 1
    manifest_path = out_dir / "manifest.tsv"
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


# ---------------------------------------------------------------------------
# patch tiling


def _pad_axis_reflect(arr: np.ndarray, axis: int, amount: int) -> np.ndarray:
    # np.pad reflect caps each application at (size - 1); loop for tiny inputs
    while amount > 0:
        step = min(amount, arr.shape[axis] - 1)
        if step <= 0:
            raise ShapeError("cannot reflect-pad a singleton dimension")
        pads = [(0, 0)] * arr.ndim
        pads[axis] = (0, step)
        arr = np.pad(arr, pads, mode="reflect")
        amount -= step
    return arr


def reflect_pad_chw(image: np.ndarray, multiple: int):
    """Pad (C,H,W) on the bottom/right so H and W divide `multiple`."""
    c, h, w = image.shape
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    out = _pad_axis_reflect(image, 1, ph)
    out = _pad_axis_reflect(out, 2, pw)
    return out, (h + ph, w + pw)


def patch_positions(size: int, patch: int, stride: int) -> tuple[int, list[int]]:
    """Padded extent and start offsets of a ceil-cover 1-d patch grid."""
    if size <= patch:
        return patch, [0]
    n_steps = math.ceil((size - patch) / stride)
    padded = patch + n_steps * stride
    return padded, [i * stride for i in range(n_steps + 1)]


def extract_patch_grid(image: np.ndarray, patch: int, stride: int = 0):
    """Reflect-padded ceil-cover tiling of a (C,H,W) image.

    Returns (patches, positions, padded_hw); with stride == patch the
    tiles are disjoint and cover every padded pixel exactly once.
    """
    if patch % 16:
        raise ConfigError(f"patch size {patch} must be a multiple of 16")
    stride = stride or patch
    if not 1 <= stride <= patch:
        raise ConfigError(f"patch stride {stride} outside 1..{patch}")
    c, h, w = image.shape
    ph, ys = patch_positions(h, patch, stride)
    pw, xs = patch_positions(w, patch, stride)
    padded = _pad_axis_reflect(image, 1, ph - h)
    padded = _pad_axis_reflect(padded, 2, pw - w)
    patches = []
    positions = []
    for y in ys:
        for x in xs:
            patches.append(np.ascontiguousarray(padded[:, y : y + patch, x : x + patch]))
            positions.append((y, x))
    return patches, positions, (ph, pw)


def reassemble_patches(patches, positions, padded_hw, orig_hw) -> np.ndarray:
    """Average overlapping patch predictions back onto the original canvas."""
    ph, pw = padded_hw
    c = patches[0].shape[0]
    size = patches[0].shape[1]
    acc = np.zeros((c, ph, pw), dtype=np.float64)
    cnt = np.zeros((ph, pw), dtype=np.float64)
    for p, (y, x) in zip(patches, positions):
        acc[:, y : y + size, x : x + size] += p
        cnt[y : y + size, x : x + size] += 1.0
    out = acc / cnt[None]
    h, w = orig_hw
    return np.ascontiguousarray(out[:, :h, :w]).astype(np.float32)


def extract_training_patches(samples, patch: int, stride: int = 0) -> list[SegmentationSample]:
    """Tile image+mask pairs into patch-sized samples for training."""
    out = []
    for s in samples:
        img_patches, positions, padded = extract_patch_grid(s.image, patch, stride)
        mask_patches, _, _ = extract_patch_grid(s.mask, patch, stride)
        for k, (img_p, mask_p) in enumerate(zip(img_patches, mask_patches)):
            out.append(
                SegmentationSample(
                    image=img_p,
                    mask=(mask_p >= 0.5).astype(np.float32),
                    id=f"{s.id}#p{k:03d}",
                )
            )
    return out
