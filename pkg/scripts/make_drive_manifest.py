#!/usr/bin/env python3
"""Build a manifest for the standard DRIVE retina layout.

Expects the usual directory structure:

    <root>/training/images/*_training.tif (or .png/.ppm)
    <root>/training/1st_manual/*_manual1.gif (or .png/.pgm)
    <root>/test/images/..., <root>/test/1st_manual/...

The 20 training images are split 16/4 into train/val; the test images, if
mask files exist, become the test split. TIFF/GIF sources are converted
to PNG next to the manifest since the engine reads PNG/PGM/PPM.

Usage: python scripts/make_drive_manifest.py <drive_root> [out_manifest]
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from PIL import Image


def collect(root: Path, part: str):
    images = sorted((root / part / "images").glob("*_*.*"))
    masks = sorted((root / part / "1st_manual").glob("*_manual1.*"))
    if len(images) != len(masks):
        raise SystemExit(
            f"{part}: {len(images)} images but {len(masks)} masks"
        )
    return list(zip(images, masks))


def ensure_png(src: Path, out_dir: Path) -> Path:
    if src.suffix.lower() in (".png", ".pgm", ".ppm"):
        return src
    out_dir.mkdir(parents=True, exist_ok=True)
    dst = out_dir / (src.stem + ".png")
    if not dst.exists():
        Image.open(src).save(dst)
    return dst


def main():
    if len(sys.argv) < 2:
        raise SystemExit(__doc__)
    root = Path(sys.argv[1])
    manifest_path = Path(sys.argv[2]) if len(sys.argv) > 2 else root / "manifest.tsv"
    converted = manifest_path.parent / "converted"

    lines = []
    pairs = collect(root, "training")
    for i, (img, mask) in enumerate(pairs):
        split = "train" if i < len(pairs) - 4 else "val"
        img_p = ensure_png(img, converted)
        mask_p = ensure_png(mask, converted)
        lines.append(
            f"{split}\t{img_p.relative_to(manifest_path.parent)}"
            f"\t{mask_p.relative_to(manifest_path.parent)}"
        )
    test_dir = root / "test" / "1st_manual"
    if test_dir.is_dir() and any(test_dir.iterdir()):
        for img, mask in collect(root, "test"):
            img_p = ensure_png(img, converted)
            mask_p = ensure_png(mask, converted)
            lines.append(
                f"test\t{img_p.relative_to(manifest_path.parent)}"
                f"\t{mask_p.relative_to(manifest_path.parent)}"
            )
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {manifest_path} ({len(lines)} samples)")


if __name__ == "__main__":
    main()
