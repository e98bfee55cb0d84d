"""Corpus handling: annotated microscopy-style images, class encoding, splits.

An annotated image pairs a float pixel raster in [0, 1] with an integer mask
over the classes {0: background, 1: wear A, 2: wear M}. A synthetic corpus
generator produces images with the same large-strip geometry as real
tool-surface microscopy, so every downstream stage can be exercised without
proprietary data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, gaussian_filter1d

CLASS_BACKGROUND = 0
CLASS_WEAR_A = 1
CLASS_WEAR_M = 2
VALID_CLASSES = (CLASS_BACKGROUND, CLASS_WEAR_A, CLASS_WEAR_M)
N_CLASSES = 3

# Smallest canvas on which the synthetic band/strip layout still makes sense.
MIN_SYNTH_EDGE = 64


@dataclass
class AnnotatedImage:
    """Full-resolution image plus per-pixel ground truth.

    pixels: (H, W, C) float32 in [0, 1], C in {1, 3}
    mask:   (H, W) uint8 over {0, 1, 2}
    pixel_scale: micrometers per pixel, informational only
    """

    id: str
    pixels: np.ndarray
    mask: np.ndarray
    pixel_scale: float = 1.0

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class CorpusSplit:
    """Image-level train/test partition. Splitting is by whole source image."""

    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)


def validate_mask(mask: np.ndarray) -> None:
    """Reject masks containing values outside {0, 1, 2}."""
    bad = np.setdiff1d(np.unique(mask), VALID_CLASSES)
    if bad.size:
        raise ValueError(f"mask contains invalid class value {bad[0]} (allowed: 0, 1, 2)")


def load_annotated_image(image_path: str | Path, mask_path: str | Path,
                         pixel_scale: float = 1.0) -> AnnotatedImage:
    """Load an image/mask PNG pair into an AnnotatedImage.

    The image is normalized to float32 in [0, 1]; grayscale inputs keep a
    single channel. The mask must be a single-channel raster with literal
    values in {0, 1, 2} and the same height/width as the image.
    """
    image_path, mask_path = Path(image_path), Path(mask_path)
    with Image.open(image_path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        pixels = np.asarray(im, dtype=np.float32) / 255.0
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]

    with Image.open(mask_path) as mm:
        mask = np.asarray(mm)
    if mask.ndim != 2:
        raise ValueError(f"mask {mask_path} is not single-channel (shape {mask.shape})")
    if mask.shape != pixels.shape[:2]:
        raise ValueError(
            f"image/mask dimension mismatch: image {pixels.shape[:2]} vs mask {mask.shape}"
        )
    validate_mask(mask)
    return AnnotatedImage(id=image_path.stem, pixels=pixels,
                          mask=mask.astype(np.uint8), pixel_scale=pixel_scale)


def save_annotated_image(image: AnnotatedImage, image_path: str | Path,
                         mask_path: str | Path) -> None:
    """Write the image as 8-bit PNG and the mask as single-channel PNG."""
    arr = np.clip(np.round(image.pixels * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(image_path)
    Image.fromarray(image.mask, mode="L").save(mask_path)


def collapse_to_binary(mask: np.ndarray) -> np.ndarray:
    """Merge wear classes A and M into one: 1 where mask in {1, 2}, else 0."""
    validate_mask(mask)
    return (mask > 0).astype(np.uint8)


def split_corpus(images: list[AnnotatedImage], n_test: int, seed: int) -> CorpusSplit:
    """Partition images (never tiles) into train/test id lists, seeded."""
    ids = [im.id if isinstance(im, AnnotatedImage) else str(im) for im in images]
    if n_test >= len(ids):
        raise ValueError(f"n_test={n_test} must be smaller than corpus size {len(ids)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5711]))
    order = rng.permutation(len(ids))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return CorpusSplit(train=train, test=test)


def _smooth_profile(rng: np.random.Generator, n: int, sigma: float,
                    lo: float, hi: float) -> np.ndarray:
    """Smooth random 1-D profile rescaled into [lo, hi]."""
    raw = gaussian_filter1d(rng.standard_normal(max(n, 2)), sigma, mode="reflect")
    span = raw.max() - raw.min()
    if span < 1e-9:
        return np.full(n, 0.5 * (lo + hi))[:n]
    return (lo + (raw - raw.min()) / span * (hi - lo))[:n]


def synthetic_image(index: int, height: int, width: int, seed: int) -> AnnotatedImage:
    """Generate one synthetic tool-surface image with an exact wear mask.

    Layout: a bright metallic band spans the full width (the insert face);
    along its wavy lower boundary runs an irregular wear strip covering a
    random sub-interval of the width. The strip alternates between the two
    wear textures: class 1 (abrasive, dark and rough) and class 2
    (transferred material, bright smears). The mask marks exactly the pixels
    rendered with a wear texture. Deterministic per (index, seed).
    """
    if height < MIN_SYNTH_EDGE or width < MIN_SYNTH_EDGE:
        raise ValueError(
            f"synthetic image dimensions too small: {height}x{width}, "
            f"need at least {MIN_SYNTH_EDGE} in both"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, index, 0x1ea6]))
    h, w = height, width
    rows = np.arange(h)[:, None]

    # Background: dark with a smooth illumination gradient plus speckle.
    gx, gy = rng.uniform(-0.05, 0.05, size=2)
    base = 0.18 + gx * (np.arange(w)[None, :] / w) + gy * (rows / h)
    img = base + rng.normal(0.0, 0.015, size=(h, w))

    # Metallic band with horizontal streak texture.
    band_mid = rng.uniform(0.40, 0.60) * h
    band_half = rng.uniform(0.14, 0.22) * h
    top_wave = _smooth_profile(rng, w, sigma=w / 18, lo=-0.02 * h, hi=0.02 * h)
    bot_wave = _smooth_profile(rng, w, sigma=w / 18, lo=-0.02 * h, hi=0.02 * h)
    band_top = band_mid - band_half + top_wave[None, :]
    band_bot = band_mid + band_half + bot_wave[None, :]
    in_band = (rows >= band_top) & (rows < band_bot)
    streaks = gaussian_filter1d(rng.standard_normal(h), 2.5, mode="reflect")
    band_tex = 0.55 + 0.05 * streaks[:, None] + rng.normal(0.0, 0.02, size=(h, w))
    img = np.where(in_band, band_tex, img)

    # Wear strip hugging the lower band boundary over a random x-interval.
    span = int(rng.uniform(0.55, 0.85) * w)
    a = int(rng.uniform(0, w - span))
    b = a + span
    thickness = _smooth_profile(rng, span, sigma=span / 10,
                                lo=0.03 * h, hi=0.10 * h)
    edge = band_bot[0, a:b]
    strip_top = np.clip(edge - thickness, 0, h - 1)
    in_strip_full = np.zeros((h, w), dtype=bool)
    in_strip_full[:, a:b] = (rows >= strip_top[None, :]) & (rows < edge[None, :])

    # Alternate A / M segments along x; both classes always present.
    mask = np.zeros((h, w), dtype=np.uint8)
    seg_lo, seg_hi = max(8, int(0.04 * w)), max(16, int(0.12 * w))
    cuts = [a]
    while cuts[-1] < b:
        cuts.append(min(b, cuts[-1] + int(rng.integers(seg_lo, seg_hi + 1))))
    if len(cuts) < 3:
        cuts = [a, (a + b) // 2, b]
    first_class = int(rng.integers(1, 3))
    for k in range(len(cuts) - 1):
        cls = first_class if k % 2 == 0 else 3 - first_class
        seg = np.zeros((h, w), dtype=bool)
        seg[:, cuts[k]:cuts[k + 1]] = in_strip_full[:, cuts[k]:cuts[k + 1]]
        mask[seg] = cls

    # Render wear textures where the mask says so.
    wear_a = mask == CLASS_WEAR_A
    wear_m = mask == CLASS_WEAR_M
    img = np.where(wear_a, 0.30 + rng.normal(0.0, 0.05, size=(h, w)), img)
    img = np.where(wear_m, 0.85 + rng.normal(0.0, 0.03, size=(h, w)), img)

    # Mild optical softening of the pixels only; the mask stays exact.
    img = gaussian_filter(img, sigma=0.6, mode="reflect")
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    tint = rng.uniform(0.96, 1.0, size=3).astype(np.float32)
    pixels = np.clip(img[:, :, None] * tint[None, None, :], 0.0, 1.0)

    if not (wear_a.any() and wear_m.any()):
        # Segments guarantee both classes; keep a hard check anyway.
        raise RuntimeError("synthetic generator produced an image missing a wear class")
    return AnnotatedImage(id=f"synth{index:03d}", pixels=pixels.astype(np.float32),
                          mask=mask, pixel_scale=1.0)


def generate_synthetic_corpus(n_images: int, height: int, width: int,
                              seed: int) -> list[AnnotatedImage]:
    """Generate n deterministic synthetic images (see synthetic_image)."""
    return [synthetic_image(i, height, width, seed) for i in range(n_images)]


def write_corpus(images: list[AnnotatedImage], directory: str | Path) -> Path:
    """Persist images as PNG pairs plus a line-delimited manifest.

    Each manifest line is {id, image_path, mask_path, pixel_scale} with paths
    relative to the manifest location. Returns the manifest path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "corpus.jsonl"
    with open(manifest, "w") as fh:
        for im in images:
            image_name, mask_name = f"{im.id}.png", f"{im.id}_mask.png"
            save_annotated_image(im, directory / image_name, directory / mask_name)
            fh.write(json.dumps({"id": im.id, "image_path": image_name,
                                 "mask_path": mask_name,
                                 "pixel_scale": im.pixel_scale}) + "\n")
    return manifest


def read_manifest(manifest_path: str | Path) -> list[dict]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"corpus manifest not found: {manifest_path}")
    records = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_corpus(manifest_path: str | Path) -> list[AnnotatedImage]:
    """Load every image referenced by a corpus manifest."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    images = []
    for rec in read_manifest(manifest_path):
        im = load_annotated_image(root / rec["image_path"], root / rec["mask_path"],
                                  pixel_scale=float(rec.get("pixel_scale", 1.0)))
        im.id = rec["id"]
        images.append(im)
    return images
