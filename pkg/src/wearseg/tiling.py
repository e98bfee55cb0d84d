"""Tiling: cut full images into square tiles and stitch predictions back.

Training tiles come from full-height vertical segments at a fixed horizontal
stride, cropped to a square window centered on the wear area. Full-image
inference runs the model on overlapping tiles (stride d/2, final tile flush
with the border) and averages overlapping probabilities with equal weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .corpus import AnnotatedImage, validate_mask


@dataclass(frozen=True)
class TileGeometry:
    """Tile edge length d and the horizontal stride between segments."""

    edge: int
    stride: int

    def __post_init__(self):
        if self.edge % 16 != 0:
            raise ValueError(f"tile edge {self.edge} must be divisible by 16")
        if self.stride not in (self.edge, self.edge // 2):
            raise ValueError(
                f"stride {self.stride} must be d or d/2 for edge {self.edge}"
            )


@dataclass
class Provenance:
    """Where a tile came from and how it was altered."""

    source_id: str
    x: int
    y: int
    augment: Optional[object] = None  # AugmentationSpec or None


@dataclass
class Tile:
    """Square image/mask pair of edge d with provenance."""

    pixels: np.ndarray  # (d, d, C) float32 in [0, 1]
    mask: np.ndarray    # (d, d) uint8 over {0, 1, 2}
    provenance: Provenance

    @property
    def edge(self) -> int:
        return self.mask.shape[0]

    def has_wear(self) -> bool:
        return bool((self.mask > 0).any())


def horizontal_segments(image: AnnotatedImage, geom: TileGeometry):
    """Full-height segments of width d at x = 0, stride, 2*stride, ...

    Yields (x_offset, pixel_segment, mask_segment) while x + d <= width; a
    trailing remainder narrower than d is dropped.
    """
    d = geom.edge
    if image.width < d:
        raise ValueError(f"image width {image.width} is smaller than tile edge {d}")
    out = []
    for x in range(0, image.width - d + 1, geom.stride):
        out.append((x, image.pixels[:, x:x + d], image.mask[:, x:x + d]))
    return out


def wear_centroid_row(mask: np.ndarray) -> Optional[float]:
    """Unweighted mean row index of wear pixels, or None when there is no wear."""
    rows = np.nonzero(mask > 0)[0]
    if rows.size == 0:
        return None
    return float(rows.mean())


def center_crop_rows(mask: np.ndarray, edge: int) -> Optional[int]:
    """Top row of the d-high window vertically centered on the wear area.

    clamp(round(centroid) - d/2, 0, H - d); None when the segment has no wear.
    """
    height = mask.shape[0]
    if height < edge:
        raise ValueError(f"segment height {height} is smaller than tile edge {edge}")
    centroid = wear_centroid_row(mask)
    if centroid is None:
        return None
    start = int(np.floor(centroid + 0.5)) - edge // 2
    return int(np.clip(start, 0, height - edge))


def vertical_center_crop(segment_pixels: np.ndarray, segment_mask: np.ndarray,
                         edge: int):
    """Crop the d x d window centered on the wear rows of a segment.

    Returns (tile_pixels, tile_mask, y_offset), or None when the segment
    contains no wear (caller skips it).
    """
    y = center_crop_rows(segment_mask, edge)
    if y is None:
        return None
    return segment_pixels[y:y + edge], segment_mask[y:y + edge], y


def filter_wear_tiles(tiles: list[Tile]) -> list[Tile]:
    """Keep exactly the tiles whose mask has at least one wear pixel."""
    return [t for t in tiles if t.has_wear()]


def cut_tiles(image: AnnotatedImage, geom: TileGeometry) -> list[Tile]:
    """Plain (non-augmented) tiling: segments, wear-centered crops, wear filter."""
    tiles = []
    for x, seg_px, seg_mask in horizontal_segments(image, geom):
        cropped = vertical_center_crop(seg_px, seg_mask, geom.edge)
        if cropped is None:
            continue
        px, mask, y = cropped
        tiles.append(Tile(pixels=np.ascontiguousarray(px),
                          mask=np.ascontiguousarray(mask),
                          provenance=Provenance(image.id, x, y)))
    return tiles


def _placements(length: int, edge: int) -> list[int]:
    """Offsets at stride d/2 plus a final offset flush with the border."""
    step = edge // 2
    offsets = list(range(0, length - edge + 1, step))
    if offsets[-1] != length - edge:
        offsets.append(length - edge)
    return offsets


def stitch_predict(image: AnnotatedImage,
                   predictor: Callable[[np.ndarray], np.ndarray],
                   geom: TileGeometry) -> np.ndarray:
    """Overlap-tile full-image prediction.

    Runs `predictor` on d x d tiles placed at stride d/2 (both axes, final
    row/column flush with the border) and averages overlapping per-pixel
    probabilities with equal weights. Output is (H, W, K) with K set by the
    predictor. The mean is accumulated as first-value + residual sum so a
    constant predictor stitches into an exactly constant map.
    """
    d = geom.edge
    if image.height < d or image.width < d:
        raise ValueError(
            f"image {image.height}x{image.width} is smaller than tile edge {d}"
        )
    xs = _placements(image.width, d)
    ys = _placements(image.height, d)

    first = None
    resid = None
    counts = np.zeros((image.height, image.width, 1), dtype=np.int32)
    seen = np.zeros((image.height, image.width, 1), dtype=bool)
    for y in ys:
        for x in xs:
            probs = np.asarray(predictor(image.pixels[y:y + d, x:x + d]))
            if probs.ndim == 2:
                probs = probs[:, :, None]
            if first is None:
                k = probs.shape[2]
                first = np.zeros((image.height, image.width, k), dtype=np.float64)
                resid = np.zeros_like(first)
            sl = np.s_[y:y + d, x:x + d]
            new = ~seen[sl][:, :, 0]
            first[sl][new] = probs[new]
            resid[sl][~new] += probs[~new] - first[sl][~new]
            seen[sl] = True
            counts[sl] += 1
    return first + resid / counts


class TileSetWriter:
    """Incrementally persist tiles as paired 8-bit PNGs plus a provenance
    sidecar (tiles.jsonl, one record per tile). Lets callers stream large
    corpora without holding every tile in memory."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.sidecar = self.directory / "tiles.jsonl"
        self._fh = open(self.sidecar, "w")
        self.count = 0

    def add(self, tile: Tile) -> None:
        i = self.count
        img = np.clip(np.round(tile.pixels * 255.0), 0, 255).astype(np.uint8)
        if img.shape[2] == 1:
            img = img[:, :, 0]
        Image.fromarray(img).save(self.directory / f"{i:05d}.png")
        Image.fromarray(tile.mask, mode="L").save(self.directory / f"{i:05d}_mask.png")
        rec = {"index": i, "source_id": tile.provenance.source_id,
               "x": tile.provenance.x, "y": tile.provenance.y,
               "augment": asdict(tile.provenance.augment)
               if tile.provenance.augment is not None else None}
        self._fh.write(json.dumps(rec) + "\n")
        self.count += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def save_tiles(tiles: list[Tile], directory: str | Path) -> Path:
    """Persist a tile list (see TileSetWriter). Returns the sidecar path."""
    with TileSetWriter(directory) as writer:
        for t in tiles:
            writer.add(t)
    return writer.sidecar


def load_tiles(directory: str | Path) -> list[Tile]:
    """Load a tile set written by save_tiles."""
    from .augment import AugmentationSpec

    directory = Path(directory)
    sidecar = directory / "tiles.jsonl"
    if not sidecar.exists():
        raise FileNotFoundError(f"tile sidecar not found: {sidecar}")
    tiles = []
    with open(sidecar) as fh:
        for line in fh:
            rec = json.loads(line)
            i = rec["index"]
            with Image.open(directory / f"{i:05d}.png") as im:
                pixels = np.asarray(im, dtype=np.float32) / 255.0
            if pixels.ndim == 2:
                pixels = pixels[:, :, None]
            with Image.open(directory / f"{i:05d}_mask.png") as mm:
                mask = np.asarray(mm).astype(np.uint8)
            validate_mask(mask)
            aug = (AugmentationSpec(**rec["augment"])
                   if rec.get("augment") is not None else None)
            tiles.append(Tile(pixels=pixels, mask=mask,
                              provenance=Provenance(rec["source_id"], rec["x"],
                                                    rec["y"], aug)))
    return tiles
