"""Three-level data augmentation applied before the tile window is cut.

Geometric transforms (rotation, shift) act on the full image so the tile
window never contains empty corners; where the transformed window would
leave the source canvas, reflection padding fills in. Photometric jitter
(contrast, brightness) and an optional Gaussian blur act on the cut tile.
Parameter intervals per level:

    level      rotation     shift frac    contrast/brightness   blur radius
    none       identity     identity      identity              0
    moderate   [-30, 30]    [-0.15,0.15]  [0.9, 1.1]            0
    full       [-90, 90]    [-0.3, 0.3]   [0.8, 1.2]            [0, 1]

Stride between segments is d for the non-augmented set and d/2 otherwise.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .corpus import AnnotatedImage
from .tiling import Provenance, Tile, TileGeometry, vertical_center_crop

LEVELS = ("none", "moderate", "full")

# (lo, hi) per parameter; degenerate intervals mean "leave unchanged".
INTERVALS = {
    "none": {"rotation": (0.0, 0.0), "shift": (0.0, 0.0),
             "contrast": (1.0, 1.0), "brightness": (1.0, 1.0), "blur": (0.0, 0.0)},
    "moderate": {"rotation": (-30.0, 30.0), "shift": (-0.15, 0.15),
                 "contrast": (0.9, 1.1), "brightness": (0.9, 1.1), "blur": (0.0, 0.0)},
    "full": {"rotation": (-90.0, 90.0), "shift": (-0.3, 0.3),
             "contrast": (0.8, 1.2), "brightness": (0.8, 1.2), "blur": (0.0, 1.0)},
}


@dataclass(frozen=True)
class AugmentationSpec:
    """One sampled set of augmentation parameters (replayable via seed)."""

    rotation_deg: float = 0.0
    shift_x_frac: float = 0.0
    shift_y_frac: float = 0.0
    contrast_factor: float = 1.0
    brightness_factor: float = 1.0
    blur_radius: float = 0.0
    seed: int = 0

    @property
    def is_geometric_identity(self) -> bool:
        return (self.rotation_deg == 0.0 and self.shift_x_frac == 0.0
                and self.shift_y_frac == 0.0)


IDENTITY_SPEC = AugmentationSpec()


def level_intervals(level: str) -> dict:
    if level not in INTERVALS:
        raise ValueError(f"unknown augmentation level {level!r}; expected one of {LEVELS}")
    return INTERVALS[level]


def geometry_for_level(edge: int, level: str) -> TileGeometry:
    """Stride convention per level: d for 'none', d/2 for the augmented sets."""
    level_intervals(level)
    return TileGeometry(edge=edge, stride=edge if level == "none" else edge // 2)


def sample_spec(level: str, seed: int) -> AugmentationSpec:
    """Sample each parameter uniformly from its level interval, seeded."""
    iv = level_intervals(level)
    if level == "none":
        return AugmentationSpec(seed=seed)
    rng = np.random.default_rng(seed)
    return AugmentationSpec(
        rotation_deg=float(rng.uniform(*iv["rotation"])),
        shift_x_frac=float(rng.uniform(*iv["shift"])),
        shift_y_frac=float(rng.uniform(*iv["shift"])),
        contrast_factor=float(rng.uniform(*iv["contrast"])),
        brightness_factor=float(rng.uniform(*iv["brightness"])),
        blur_radius=float(rng.uniform(*iv["blur"])),
        seed=seed,
    )


def _warp_window(pixels: np.ndarray, mask: np.ndarray, x0: int, y0: int,
                 out_w: int, out_h: int, center: tuple[float, float],
                 spec: AugmentationSpec):
    """Read an out_w x out_h window at (x0, y0) from the transformed image.

    The source is rotated by spec.rotation_deg about `center` and translated
    by (shift_x_frac * d, shift_y_frac * d) with d = out_w; the window is then
    sampled from the result (bilinear for pixels, nearest for the mask,
    reflection at the canvas borders).
    """
    theta = math.radians(spec.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    tx = spec.shift_x_frac * out_w
    ty = spec.shift_y_frac * out_w
    cx, cy = center
    # Inverse map: dst (u, v) -> src R^T((x0+u, y0+v) - c - t) + c
    bx = cos_t * (x0 - cx - tx) + sin_t * (y0 - cy - ty) + cx
    by = -sin_t * (x0 - cx - tx) + cos_t * (y0 - cy - ty) + cy
    m = np.array([[cos_t, sin_t, bx], [-sin_t, cos_t, by]], dtype=np.float64)

    warped_px = cv2.warpAffine(
        pixels, m, (out_w, out_h),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_REFLECT_101)
    if warped_px.ndim == 2:
        warped_px = warped_px[:, :, None]
    warped_mask = cv2.warpAffine(
        mask, m, (out_w, out_h),
        flags=cv2.INTER_NEAREST | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_REFLECT_101)
    return np.clip(warped_px, 0.0, 1.0), warped_mask


def precrop_geometric(image: AnnotatedImage, window: tuple[int, int, int],
                      spec: AugmentationSpec):
    """Rotate/shift the full image, then cut the d x d window.

    window is (x, y, d); rotation is about the window center. Returns
    (tile_pixels, tile_mask); mask values stay in {0, 1, 2} by nearest-
    neighbor sampling.
    """
    x, y, d = window
    if x < 0 or y < 0 or x + d > image.width or y + d > image.height:
        raise ValueError(
            f"window (x={x}, y={y}, d={d}) outside image "
            f"{image.height}x{image.width}"
        )
    if spec.is_geometric_identity:
        return (np.ascontiguousarray(image.pixels[y:y + d, x:x + d]),
                np.ascontiguousarray(image.mask[y:y + d, x:x + d]))
    center = (x + (d - 1) / 2.0, y + (d - 1) / 2.0)
    return _warp_window(image.pixels, image.mask, x, y, d, d, center, spec)


def photometric(pixels: np.ndarray, contrast_factor: float,
                brightness_factor: float) -> np.ndarray:
    """Mean-anchored contrast then multiplicative brightness, clipped to [0, 1].

    out = clip(b * (mean + c * (pixel - mean)), 0, 1) with a per-tile,
    per-channel mean; c = b = 1 is the identity.
    """
    if contrast_factor == 1.0 and brightness_factor == 1.0:
        return pixels
    mean = pixels.mean(axis=(0, 1), keepdims=True, dtype=np.float64)
    out = brightness_factor * (mean + contrast_factor * (pixels - mean))
    return np.clip(out, 0.0, 1.0).astype(pixels.dtype)


def gaussian_blur(pixels: np.ndarray, radius: float) -> np.ndarray:
    """Gaussian blur with sigma = radius and kernel half-width ceil(3 sigma).

    radius 0 is the identity; the mask is never blurred. Reflective boundary.
    """
    if radius < 0 or radius > 1:
        raise ValueError(f"blur radius {radius} outside [0, 1]")
    if radius == 0.0:
        return pixels
    half_width = int(math.ceil(3.0 * radius))
    out = np.empty_like(pixels, dtype=np.float64)
    for c in range(pixels.shape[2]):
        out[:, :, c] = gaussian_filter(pixels[:, :, c].astype(np.float64),
                                       sigma=radius, radius=half_width,
                                       mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(pixels.dtype)


def augment_tile_pixels(pixels: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Photometric jitter then blur, in the preprocessing-flow order."""
    out = photometric(pixels, spec.contrast_factor, spec.brightness_factor)
    return gaussian_blur(out, spec.blur_radius)


def build_training_set(images: list[AnnotatedImage], geom: TileGeometry,
                       level: str, seed: int) -> list[Tile]:
    """Cut one augmented tile per segment position over the training images.

    Per segment: sample a spec, rotate/shift the full image and read the
    full-height segment strip, center the d x d window vertically on the
    (transformed) wear area, then apply contrast/brightness and blur to the
    tile. Segments without wear after the transform are dropped, so each
    source position yields at most one sample and never several.
    """
    level_intervals(level)
    d = geom.edge
    tiles: list[Tile] = []
    for image in images:
        if image.width < d:
            raise ValueError(
                f"image {image.id} width {image.width} smaller than tile edge {d}"
            )
        if image.height < d:
            raise ValueError(
                f"image {image.id} height {image.height} smaller than tile edge {d}"
            )
        # Keyed by image id, not list position, so per-image streaming calls
        # produce the same tiles as one batch call.
        img_key = int.from_bytes(
            hashlib.sha256(image.id.encode()).digest()[:8], "little")
        for seg_idx, x in enumerate(range(0, image.width - d + 1, geom.stride)):
            spec_seed = int(np.random.SeedSequence(
                [seed, img_key, seg_idx]).generate_state(1, np.uint64)[0] >> 1)
            spec = sample_spec(level, spec_seed)
            if spec.is_geometric_identity:
                strip_px = image.pixels[:, x:x + d]
                strip_mask = image.mask[:, x:x + d]
            else:
                center = (x + (d - 1) / 2.0, (image.height - 1) / 2.0)
                strip_px, strip_mask = _warp_window(
                    image.pixels, image.mask, x, 0, d, image.height, center, spec)
            cropped = vertical_center_crop(strip_px, strip_mask, d)
            if cropped is None:
                continue
            px, mask, y = cropped
            px = augment_tile_pixels(np.ascontiguousarray(px), spec)
            tiles.append(Tile(
                pixels=np.ascontiguousarray(px),
                mask=np.ascontiguousarray(mask),
                provenance=Provenance(image.id, x, y,
                                      spec if level != "none" else None)))
    return tiles
