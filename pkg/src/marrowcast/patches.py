"""Bone-mask post-processing, patch sampling inside bone, and risk-map fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError

BONE_THRESHOLD = 0.5
DILATION_RADIUS_PX = 2
PATCH_SIZE = 64
DEFAULT_STRIDE = 2
FUSION_MODES = ("mean", "max", "center")


def disk(radius):
    """Boolean footprint of offsets with dx^2 + dy^2 <= r^2."""
    r = int(np.floor(radius))
    dx, dy = np.mgrid[-r:r + 1, -r:r + 1]
    return dx * dx + dy * dy <= radius * radius


def binarize_and_dilate(bone_prob, threshold=BONE_THRESHOLD, radius_px=DILATION_RADIUS_PX):
    """Threshold (``>=``) a bone probability slice and dilate by a Euclidean disk."""
    fg = np.asarray(bone_prob) >= threshold
    if radius_px <= 0 or not fg.any():
        return fg
    return ndimage.binary_dilation(fg, structure=disk(radius_px))


def mask_crop(img, mask):
    img = np.asarray(img)
    mask = np.asarray(mask)
    if img.shape != mask.shape:
        raise ShapeError(f"image {img.shape} and mask {mask.shape} differ")
    return img * mask.astype(img.dtype)


@dataclass
class PatchGrid:
    """Centres ``(x, y)`` of square windows on a slice of shape ``slice_dims``.

    The window of centre ``(cx, cy)`` covers rows ``cx - size//2`` to
    ``cx - size//2 + size - 1`` (and likewise for columns).
    """
    patch_size: int
    stride: int
    slice_dims: tuple
    centers: np.ndarray  # (n, 2) int

    def __len__(self):
        return len(self.centers)

    def window(self, i):
        """Row/column start of window ``i`` in unpadded slice coordinates."""
        h = self.patch_size // 2
        cx, cy = self.centers[i]
        return int(cx) - h, int(cy) - h


def lattice_centers(mask, stride):
    nx, ny = mask.shape
    xs = np.arange(0, nx, stride)
    ys = np.arange(0, ny, stride)
    sub = mask[np.ix_(xs, ys)]
    ix, iy = np.nonzero(sub)  # row-major order
    return np.stack([xs[ix], ys[iy]], axis=1).astype(np.int64)


def extract_windows(img, centers, patch_size):
    """``(n, 1, s, s)`` windows around ``centers`` read from the reflect-padded image."""
    img = np.asarray(img)
    h = patch_size // 2
    pad = patch_size
    padded = np.pad(img, pad, mode="reflect")
    out = np.empty((len(centers), 1, patch_size, patch_size), dtype=img.dtype)
    for i, (cx, cy) in enumerate(centers):
        x0, y0 = cx - h + pad, cy - h + pad
        out[i, 0] = padded[x0:x0 + patch_size, y0:y0 + patch_size]
    return out


def extract_patches(img, bone_mask, patch_size=PATCH_SIZE, stride=DEFAULT_STRIDE):
    """Sliding-window patches centred on lattice points inside ``bone_mask``.

    Lattice points are every ``stride``-th pixel starting at 0 along both
    axes; centres are kept in row-major order.
    """
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be >= 1")
    img = np.asarray(img)
    bone_mask = np.asarray(bone_mask, dtype=bool)
    if img.shape != bone_mask.shape:
        raise ShapeError(f"image {img.shape} and mask {bone_mask.shape} differ")
    centers = lattice_centers(bone_mask, stride)
    grid = PatchGrid(patch_size, stride, img.shape, centers)
    return grid, extract_windows(img, centers, patch_size)


@dataclass
class RiskSlice:
    risk: np.ndarray
    coverage: np.ndarray


def reconstruct_risk_map(grid, preds, fusion="mean"):
    """Fuse per-patch predictions into a full-slice risk map.

    ``mean`` averages every prediction covering a pixel, ``max`` takes the
    largest, ``center`` uses only each patch's centre pixel. Pixels covered
    by no patch get risk 0.
    """
    if fusion not in FUSION_MODES:
        raise ValueError(f"fusion must be one of {FUSION_MODES}")
    preds = np.asarray(preds)
    if len(preds) != len(grid):
        raise ShapeError(f"{len(preds)} predictions for {len(grid)} patches")
    s = grid.patch_size
    if len(preds):
        preds = preds.reshape(len(preds), -1)
        if preds.shape[1] != s * s:
            raise ShapeError(f"each prediction must have {s * s} values, got {preds.shape[1]}")
        preds = preds.reshape(len(preds), s, s)
    nx, ny = grid.slice_dims
    acc = np.zeros((nx, ny), dtype=np.float64)
    cov = np.zeros((nx, ny), dtype=np.int64)
    if fusion == "center":
        h = s // 2
        for (cx, cy), p in zip(grid.centers, preds):
            acc[cx, cy] += p[h, h]
            cov[cx, cy] += 1
    else:
        for i, p in enumerate(preds):
            x0, y0 = grid.window(i)
            xa, ya = max(x0, 0), max(y0, 0)
            xb, yb = min(x0 + s, nx), min(y0 + s, ny)
            if xa >= xb or ya >= yb:
                continue
            part = p[xa - x0:xb - x0, ya - y0:yb - y0]
            if fusion == "mean":
                acc[xa:xb, ya:yb] += part
            else:
                np.maximum(acc[xa:xb, ya:yb], part, out=acc[xa:xb, ya:yb])
            cov[xa:xb, ya:yb] += 1
    risk = np.zeros_like(acc)
    covered = cov > 0
    risk[covered] = acc[covered] / cov[covered] if fusion != "max" else acc[covered]
    return RiskSlice(np.clip(risk, 0.0, 1.0), cov)
