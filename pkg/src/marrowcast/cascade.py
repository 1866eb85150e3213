"""Two-stage inference: BoneNet on axial slices, LesionNet on bone patches.

Also builds the two training sets: ``Bone`` pairs (slice, bone mask) and
``Lesion`` pairs (bone-cropped patch at t, follow-up annotation patch at
t+1).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import nn, patches, unet
from .errors import DegenerateInputError, GeometryError
from .volume import MaskVolume, check_same_geometry


def pad_to(img, size):
    """Zero-pad a 2-D slice to ``size x size``, centred. Returns ``(padded, (ox, oy))``."""
    nx, ny = img.shape
    if nx > size or ny > size:
        raise GeometryError(f"slice {img.shape} is larger than the network input {size}")
    ox, oy = (size - nx) // 2, (size - ny) // 2
    out = np.zeros((size, size), dtype=img.dtype)
    out[ox:ox + nx, oy:oy + ny] = img
    return out, (ox, oy)


def unpad(img, offset, shape):
    ox, oy = offset
    return img[ox:ox + shape[0], oy:oy + shape[1]]


@dataclass
class BoneDataset:
    inputs: np.ndarray       # (n, 1, s, s)
    targets: np.ndarray      # (n, 1, s, s)
    provenance: list         # (patient_id, z)
    offsets: list            # padding offset per pair

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, i):
        return self.inputs[i:i + 1], self.targets[i:i + 1]


@dataclass
class LesionDataset:
    inputs: np.ndarray       # (n, 1, p, p)
    targets: np.ndarray      # (n, 1, p, p)
    patient_ids: list
    slices: np.ndarray       # (n,)
    centers: np.ndarray      # (n, 2)
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.inputs)

    def __getitem__(self, i):
        return self.inputs[i:i + 1], self.targets[i:i + 1]

    def positive_weight(self):
        return self.stats["w_pos"]


def build_bone_dataset(cases, input_size):
    """Every axial slice of every baseline image paired with its bone mask."""
    cases = list(cases)
    if not cases:
        raise ValueError("build_bone_dataset needs at least one case")
    xs, ys, prov, offs = [], [], [], []
    for case in cases:
        check_same_geometry(case.I_t, case.B_t)
        img, bone = case.I_t.data, case.B_t.data
        for z in range(img.shape[2]):
            x, off = pad_to(img[:, :, z], input_size)
            y, off_y = pad_to(bone[:, :, z], input_size)
            assert off == off_y
            xs.append(x)
            ys.append(y)
            prov.append((case.patient_id, z))
            offs.append(off)
    return BoneDataset(np.stack(xs)[:, None], np.stack(ys)[:, None], prov, offs)


def predict_bone_volume(bonenet, img_volume, batch_size=None):
    """BoneNet probabilities for every axial slice, as a (nx, ny, nz) array."""
    data = img_volume.data
    s = bonenet.config.input_size
    padded, offsets = zip(*(pad_to(data[:, :, z], s) for z in range(data.shape[2])))
    probs = bonenet.predict(np.stack(padded)[:, None], batch_size=batch_size)
    out = np.stack([unpad(probs[z, 0], offsets[z], data.shape[:2]) for z in range(data.shape[2])], axis=2)
    return out


def _bone_maps(case, source, bonenet):
    if source == "ground_truth":
        return case.B_t.data
    if source == "bonenet":
        if bonenet is None:
            raise ValueError("bone_source='bonenet' requires a trained bonenet")
        return predict_bone_volume(bonenet, case.I_t)
    raise ValueError(f"unknown bone_source {source!r}")


def build_lesion_dataset(cases, patch_size, stride=patches.DEFAULT_STRIDE, bone_source="ground_truth",
                         bonenet=None, threshold=patches.BONE_THRESHOLD,
                         radius_px=patches.DILATION_RADIUS_PX, max_negatives_per_case=None, seed=0):
    """Patches from bone regions of ``I_t`` with targets from the aligned ``A_t1``.

    Per slice the bone map (ground truth or BoneNet) is thresholded and
    dilated, the image is cropped to it and patches are taken on the
    ``stride`` lattice. With ``max_negatives_per_case`` set, patches whose
    target window is empty are subsampled (seeded) to at most that many per
    case; patches with any positive target pixel are always kept.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("build_lesion_dataset needs at least one case")
    rng = np.random.default_rng(seed)
    xs, ys, pids, zs, cs = [], [], [], [], []
    for case in cases:
        check_same_geometry(case.I_t, case.A_t1)
        bone = _bone_maps(case, bone_source, bonenet)
        img, target = case.I_t.data, case.A_t1.data
        cx, cy_, cz, cc = [], [], [], []
        for z in range(img.shape[2]):
            mask = patches.binarize_and_dilate(bone[:, :, z], threshold, radius_px)
            if not mask.any():
                continue
            crop = patches.mask_crop(img[:, :, z], mask)
            grid, px = patches.extract_patches(crop, mask, patch_size, stride)
            if not len(grid):
                continue
            cx.append(px)
            cy_.append(patches.extract_windows(target[:, :, z], grid.centers, patch_size))
            cz.append(np.full(len(grid), z))
            cc.append(grid.centers)
        if not cx:
            continue
        px, py = np.concatenate(cx), np.concatenate(cy_)
        pz, pc = np.concatenate(cz), np.concatenate(cc)
        if max_negatives_per_case is not None:
            pos = py.reshape(len(py), -1).max(axis=1) >= 0.5
            neg_idx = np.flatnonzero(~pos)
            if len(neg_idx) > max_negatives_per_case:
                neg_idx = np.sort(rng.choice(neg_idx, max_negatives_per_case, replace=False))
            keep = np.sort(np.concatenate([np.flatnonzero(pos), neg_idx]))
            px, py, pz, pc = px[keep], py[keep], pz[keep], pc[keep]
        xs.append(px)
        ys.append(py)
        zs.append(pz)
        cs.append(pc)
        pids += [case.patient_id] * len(px)
    if xs:
        inputs, targets = np.concatenate(xs), (np.concatenate(ys) >= 0.5).astype(np.float32)
        slices, centers = np.concatenate(zs), np.concatenate(cs)
    else:
        inputs = targets = np.zeros((0, 1, patch_size, patch_size), dtype=np.float32)
        slices, centers = np.zeros(0, dtype=int), np.zeros((0, 2), dtype=int)
    n_pos = int(targets.sum())
    n_neg = int(targets.size - n_pos)
    stats = {"n_patches": int(len(inputs)), "n_pos_pixels": n_pos, "n_neg_pixels": n_neg,
             "imbalance": (n_neg / n_pos) if n_pos else None,
             "w_pos": nn.positive_weight(n_neg, n_pos), "bone_source": bone_source}
    return LesionDataset(inputs, targets, pids, slices, centers, stats)


PatchPredictor = Callable[[np.ndarray, patches.PatchGrid, int], np.ndarray]


@dataclass
class CascadePipeline:
    """BoneNet + LesionNet plus the glue parameters between them.

    ``bone_predict`` / ``lesion_predict`` override the networks; they are
    used for oracle and baseline pipelines in evaluation.
    """
    bonenet: Optional[unet.UNetModel] = None
    lesionnet: Optional[unet.UNetModel] = None
    threshold: float = patches.BONE_THRESHOLD
    radius_px: int = patches.DILATION_RADIUS_PX
    patch_size: int = patches.PATCH_SIZE
    stride: int = patches.DEFAULT_STRIDE
    fusion: str = "mean"
    bone_predict: Optional[Callable] = None
    lesion_predict: Optional[PatchPredictor] = None

    def __post_init__(self):
        if self.lesionnet is not None and self.lesionnet.config.input_size != self.patch_size:
            raise GeometryError(
                f"lesionnet input {self.lesionnet.config.input_size} != patch_size {self.patch_size}")

    def with_(self, **changes):
        return replace(self, **changes)


def predict_risk_volume(pipeline, img):
    """Bone probability and lesion risk volumes for a normalised image.

    Risk is zero outside the dilated predicted bone mask; the patch
    coverage count is attached as ``risk.meta["coverage"]``.
    """
    if pipeline.bone_predict is not None:
        bone = np.asarray(pipeline.bone_predict(img), dtype=np.float64)
    else:
        bone = predict_bone_volume(pipeline.bonenet, img)
    data = img.data
    nz = data.shape[2]
    grids, chunks, masks = [], [], []
    for z in range(nz):
        mask = patches.binarize_and_dilate(bone[:, :, z], pipeline.threshold, pipeline.radius_px)
        masks.append(mask)
        crop = patches.mask_crop(data[:, :, z], mask)
        grid, px = patches.extract_patches(crop, mask, pipeline.patch_size, pipeline.stride)
        grids.append(grid)
        chunks.append(px)
    if pipeline.lesion_predict is not None:
        preds = [pipeline.lesion_predict(px, grid, z) if len(grid) else px
                 for z, (px, grid) in enumerate(zip(chunks, grids))]
    else:
        flat = pipeline.lesionnet.predict(np.concatenate(chunks)) if sum(map(len, chunks)) else None
        preds, start = [], 0
        for px in chunks:
            preds.append(flat[start:start + len(px)] if flat is not None else px)
            start += len(px)
    risk = np.zeros(data.shape, dtype=np.float64)
    coverage = np.zeros(data.shape, dtype=np.int64)
    for z in range(nz):
        if not len(grids[z]):
            continue
        rs = patches.reconstruct_risk_map(grids[z], preds[z], pipeline.fusion)
        risk[:, :, z] = rs.risk * masks[z]
        coverage[:, :, z] = rs.coverage
    bone_vol = MaskVolume(np.clip(bone, 0, 1), img.spacing, {"kind": "bone_probability"})
    risk_vol = MaskVolume(risk, img.spacing, {"kind": "risk", "coverage": coverage,
                                              "dilated_bone": np.stack(masks, axis=2)})
    return bone_vol, risk_vol


# -- training helpers -------------------------------------------------------

def train_bonenet(cases, config, seed=None, log=None, shuffle_seed=None):
    """Train BoneNet on every slice of ``cases``; ``seed`` drives init, ``shuffle_seed`` batch order."""
    s = config.seed if seed is None else seed
    ds = build_bone_dataset(cases, config.input_size)
    model = unet.build(config, seed=s)
    unet.init_output_prior(model, float((ds.targets >= 0.5).mean()))
    unet.fit(model, ds, seed=s if shuffle_seed is None else shuffle_seed, log=log)
    return model


def train_lesionnet(cases, config, seed=None, stride=patches.DEFAULT_STRIDE, bone_source="ground_truth",
                    bonenet=None, max_negatives_per_case=None, log=None, shuffle_seed=None,
                    threshold=patches.BONE_THRESHOLD, radius_px=patches.DILATION_RADIUS_PX):
    """Build the lesion dataset, set ``w_pos`` from it when unset, and train."""
    s = config.seed if seed is None else seed
    sh = s if shuffle_seed is None else shuffle_seed
    ds = build_lesion_dataset(cases, config.input_size, stride=stride, bone_source=bone_source,
                              bonenet=bonenet, threshold=threshold, radius_px=radius_px,
                              max_negatives_per_case=max_negatives_per_case, seed=sh)
    if len(ds) == 0:
        raise DegenerateInputError("lesion dataset is empty: no bone patches found")
    if config.loss_kind == "weighted_bce" and config.w_pos is None:
        config = replace(config, w_pos=ds.stats["w_pos"])
    model = unet.build(config, seed=s)
    unet.fit(model, ds, seed=sh, log=log)
    return model, ds.stats
