"""Synthetic longitudinal whole-body phantoms.

Each case is a pair of T1-like volumes at two time points. Bones are bright
marrow tubes with a dark cortical rim running along z inside a soft-tissue
body ellipse. Three kinds of focal spots live in the marrow:

* stable lesions: hypointense at both time points, annotated at both;
* emerging lesions: fully hypointense and annotated only at t+1; at t they
  show up as a faint precursor whose depth is ``precursor_contrast``;
* anomalies: bright or dark spots at both time points that are never
  annotated. They stand in for bone irregularities that do not progress.

All geometry is specified in millimetres so the same parameters describe
a desk-scale (96 px) and a full-scale (384 px) phantom.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GenerationError, GeometryError
from .volume import MaskVolume, Volume, check_same_geometry, load_nifti, save_nifti

LEGS, THORAX = "legs", "thorax"
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# clean-image intensities before scaling
AIR, TISSUE, MARROW, CORTEX, LESION = 0.0, 0.45, 1.0, 0.2, 0.3
ANOMALY_DELTA = 0.35


@dataclass(frozen=True)
class PhantomParams:
    seed: int = 0
    dims: tuple = (96, 96, 24)
    spacing: tuple = (4.0, 4.0, 6.0)
    n_bones: int = 4
    n_emerging_lesions: int = 3
    n_stable_lesions: int = 2
    n_anomalies: int = 2
    precursor_contrast: float = 0.4
    noise_sigma: float = 0.04
    bias_field: bool = False
    bias_strength: float = 0.35
    bone_radius_mm: float = 34.0
    cortex_mm: float = 5.0
    lesion_radius_mm: tuple = (9.0, 14.0)
    resolved_fraction: float = 0.0
    growth_margin: int = 0
    legs_fraction: float = 0.5
    intensity_scale: float = 1000.0
    max_retries: int = 200

    def validate(self):
        counts = ("n_bones", "n_emerging_lesions", "n_stable_lesions", "n_anomalies", "growth_margin")
        for name in counts:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.precursor_contrast <= 1.0:
            raise ConfigError("precursor_contrast must lie in [0, 1]")
        if not 0.0 <= self.resolved_fraction <= 1.0:
            raise ConfigError("resolved_fraction must lie in [0, 1]")
        if len(self.dims) != 3 or min(self.dims) < 1 or min(self.spacing) <= 0:
            raise ConfigError(f"invalid geometry dims={self.dims} spacing={self.spacing}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 < self.legs_fraction < 1.0:
            raise ConfigError("legs_fraction must lie in (0, 1)")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d).validate()


@dataclass(eq=False)
class LongitudinalCase:
    patient_id: str
    I_t: Volume
    I_t1: Volume
    B_t: MaskVolume
    A_t: MaskVolume
    A_t1: MaskVolume
    body_part_map: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        check_same_geometry(self.I_t, self.I_t1, self.B_t, self.A_t, self.A_t1)
        if len(self.body_part_map) != self.I_t.dims[2]:
            raise GeometryError("body_part_map needs one label per axial slice")

    @property
    def dims(self):
        return self.I_t.dims

    def replace(self, **changes):
        return replace(self, **changes)


def body_part_labels(nz, legs_fraction=0.5):
    """Legs occupy the lower ``legs_fraction`` of z, thorax the rest."""
    boundary = int(round(nz * legs_fraction))
    return tuple(LEGS if z < boundary else THORAX for z in range(nz))


def _grid_mm(dims, spacing):
    return [np.arange(n, dtype=np.float64) * s for n, s in zip(dims, spacing)]


def _ellipsoid(dims, spacing, center, radii):
    gx, gy, gz = _grid_mm(dims, spacing)
    d = (((gx - center[0]) / radii[0]) ** 2)[:, None, None] \
        + (((gy - center[1]) / radii[1]) ** 2)[None, :, None] \
        + (((gz - center[2]) / radii[2]) ** 2)[None, None, :]
    return d <= 1.0


def _place_bones(p, rng):
    nx, ny, nz = p.dims
    sx, sy, sz = p.spacing
    fov = np.array([nx * sx, ny * sy])
    body_axes = np.array([0.44, 0.34]) * fov
    center = fov / 2
    r = p.bone_radius_mm
    if min(body_axes) < r * 1.5 and p.n_bones:
        raise GenerationError(f"field of view {fov} mm is too small for bones of radius {r} mm")
    for _restart in range(20):
        bones = []
        for _ in range(p.max_retries):
            if len(bones) == p.n_bones:
                break
            # candidate centre, kept clear of the body outline
            ang = rng.uniform(0, 2 * math.pi)
            rad = math.sqrt(rng.uniform(0, 1))
            c = center + rad * (body_axes - r * 1.4) * np.array([math.cos(ang), math.sin(ang)])
            drift = rng.uniform(-1, 1, size=2) * r * 0.3
            gap = 2 * r + 3 * max(sx, sy)
            if all(np.linalg.norm(c - b["center"]) > gap + np.abs(drift - b["drift"]).sum() for b in bones):
                bones.append({"center": c, "drift": drift})
        if len(bones) == p.n_bones:
            break
    else:
        raise GenerationError(
            f"could not place {p.n_bones} bones without overlap in {p.max_retries} attempts")
    return bones, center, body_axes


def _rasterise_anatomy(p, bones, center, body_axes, rng):
    nx, ny, nz = p.dims
    gx, gy, gz = _grid_mm(p.dims, p.spacing)
    span = max(gz.max() - gz.min(), 1e-9)
    zfrac = (gz - gz.mean()) / span
    # body outline narrows towards the legs end
    scale = 0.9 + 0.1 * np.cos(np.pi * (zfrac + 0.5))
    body = ((((gx - center[0]) / body_axes[0])[:, None, None] / scale) ** 2
            + (((gy - center[1]) / body_axes[1])[None, :, None] / scale) ** 2) <= 1.0
    bone = np.zeros(p.dims, dtype=bool)
    marrow = np.zeros(p.dims, dtype=bool)
    for b in bones:
        cx = center[0] + (b["center"][0] - center[0]) * scale + b["drift"][0] * zfrac
        cy = center[1] + (b["center"][1] - center[1]) * scale + b["drift"][1] * zfrac
        phase = rng.uniform(0, 2 * np.pi)
        r = p.bone_radius_mm * (1.0 + 0.12 * np.sin(2 * np.pi * zfrac * 1.3 + phase))
        # bone ends give the volume structure along z
        z0 = gz.min() + rng.uniform(0.0, 0.2) * span
        z1 = gz.max() - rng.uniform(0.0, 0.2) * span
        r = r * np.sqrt(np.clip(1.0 - np.maximum(z0 + r - gz, 0) ** 2 / r ** 2, 0, 1)
                        * np.clip(1.0 - np.maximum(gz - (z1 - r), 0) ** 2 / r ** 2, 0, 1))
        rin = np.maximum(r - p.cortex_mm, 0.0)
        d2 = (gx[:, None, None] - cx[None, None, :]) ** 2 + (gy[None, :, None] - cy[None, None, :]) ** 2
        bone |= d2 <= (r * r)[None, None, :]
        marrow |= d2 <= (rin * rin)[None, None, :]
    return body, bone & body, marrow & body


def _place_spots(p, rng, marrow, labels):
    """Centres and radii for emerging, stable and anomaly spots inside marrow."""
    spacing = np.array(p.spacing)
    depth = ndimage.distance_transform_edt(marrow, sampling=p.spacing)
    z_legs = [z for z, lab in enumerate(labels) if lab == LEGS]
    z_thorax = [z for z, lab in enumerate(labels) if lab == THORAX]
    kinds = (["emerging"] * p.n_emerging_lesions + ["stable"] * p.n_stable_lesions
             + ["anomaly"] * p.n_anomalies)
    spots = []
    rmin, rmax = p.lesion_radius_mm
    for i, kind in enumerate(kinds):
        # emerging lesions alternate between body parts so both regions get positives
        if kind == "emerging":
            zs = z_legs if i % 2 == 0 else z_thorax
        else:
            zs = list(range(p.dims[2]))
        zs = zs or list(range(p.dims[2]))
        for _ in range(p.max_retries):
            radius = rng.uniform(rmin, rmax)
            z = zs[rng.integers(len(zs))]
            cand = np.argwhere(depth[:, :, z] >= 0.6 * radius)
            if len(cand) == 0:
                continue
            x, y = cand[rng.integers(len(cand))]
            c = np.array([x, y, z]) * spacing
            clear = all(np.linalg.norm(c - s["center_mm"]) > radius + s["radius_mm"] + 2.5 * spacing.max()
                        for s in spots)
            if not clear:
                continue
            shape = _ellipsoid(p.dims, p.spacing, c, (radius, radius, radius * 0.8))
            region = shape & marrow
            # mostly inside marrow, so the spot is a single compact blob
            if region.sum() < max(1, 0.6 * shape.sum()):
                continue
            spots.append({"kind": kind, "center_mm": c, "radius_mm": float(radius),
                          "center_vox": [int(x), int(y), int(z)], "region": region})
            break
        else:
            raise GenerationError(f"could not place {kind} spot #{i} after {p.max_retries} attempts")
    return spots


def _bias(p):
    gx, gy, gz = _grid_mm(p.dims, p.spacing)
    u = (gx / max(gx.max(), 1e-9) - 0.5)[:, None, None]
    v = (gy / max(gy.max(), 1e-9) - 0.5)[None, :, None]
    w = (gz / max(gz.max(), 1e-9) - 0.5)[None, None, :]
    return np.exp(p.bias_strength * (1.2 * u - 0.8 * v * v + 0.6 * w + 0.5 * u * w))


def generate_case(p, patient_id="P000"):
    """Build one :class:`LongitudinalCase`; fully determined by ``p.seed``."""
    p.validate()
    rng = np.random.default_rng(p.seed)
    labels = body_part_labels(p.dims[2], p.legs_fraction)
    bones, center, body_axes = _place_bones(p, rng)
    body, bone, marrow = _rasterise_anatomy(p, bones, center, body_axes, rng)
    spots = _place_spots(p, rng, marrow, labels) if (
        p.n_emerging_lesions + p.n_stable_lesions + p.n_anomalies) else []

    clean_t = np.where(body, TISSUE, AIR)
    clean_t[bone] = CORTEX
    clean_t[marrow] = MARROW
    clean_t1 = clean_t.copy()
    a_t = np.zeros(p.dims, dtype=bool)
    a_t1 = np.zeros(p.dims, dtype=bool)
    n_stable = sum(s["kind"] == "stable" for s in spots)
    n_resolved = int(math.floor(p.resolved_fraction * n_stable))
    seen_stable = 0
    for s in spots:
        region = s.pop("region")
        if s["kind"] == "emerging":
            clean_t[region] = MARROW + p.precursor_contrast * (LESION - MARROW)
            clean_t1[region] = LESION
            a_t1 |= region
        elif s["kind"] == "stable":
            resolved = seen_stable < n_resolved
            seen_stable += 1
            clean_t[region] = LESION
            a_t |= region
            if not resolved:
                clean_t1[region] = LESION
                a_t1 |= region
            s["resolved"] = resolved
        else:
            delta = ANOMALY_DELTA if rng.random() < 0.5 else -ANOMALY_DELTA
            clean_t[region] = MARROW + delta
            clean_t1[region] = MARROW + delta
            s["polarity"] = "bright" if delta > 0 else "dark"
        s["voxels"] = int(region.sum())

    field_ = _bias(p) if p.bias_field else 1.0
    floor = 0.02
    imgs = []
    for clean in (clean_t, clean_t1):
        noisy = clean + rng.normal(0.0, p.noise_sigma, size=p.dims)
        noisy = np.where(body, np.maximum(noisy, floor), 0.0) * field_
        imgs.append(noisy * p.intensity_scale)

    spots_meta = [{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in s.items()}
                  for s in spots]
    prov = {"seed": int(p.seed), "spots": spots_meta, "bias_field": bool(p.bias_field)}
    return LongitudinalCase(
        patient_id=patient_id,
        I_t=Volume(imgs[0], p.spacing),
        I_t1=Volume(imgs[1], p.spacing),
        B_t=MaskVolume(bone.astype(np.float32), p.spacing),
        A_t=MaskVolume(a_t.astype(np.float32), p.spacing),
        A_t1=MaskVolume(a_t1.astype(np.float32), p.spacing),
        body_part_map=labels,
        provenance=prov,
    )


# -- cohorts ----------------------------------------------------------------

def patient_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _generate_indexed(args):
    seed, index, template = args
    p = replace(template, seed=patient_seed(seed, index))
    try:
        return generate_case(p, patient_id=f"P{index:03d}")
    except GenerationError as exc:
        raise GenerationError(f"patient {index}: {exc}") from exc


def generate_cohort(seed, n_patients, template, out_dir=None, jobs=1):
    """Generate ``n_patients`` cases with per-patient seeds derived from ``seed``.

    When ``out_dir`` is given the cases are written as NIfTI files together
    with a ``manifest.json``.
    """
    if n_patients < 1:
        raise ConfigError("n_patients must be >= 1")
    template.validate()
    tasks = [(seed, i, template) for i in range(n_patients)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cases = list(pool.map(_generate_indexed, tasks))
    else:
        cases = [_generate_indexed(t) for t in tasks]
    if out_dir is not None:
        write_cohort(cases, out_dir, extra={"seed": int(seed), "params": _params_json(template)})
    return cases


def _params_json(p):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(p).items()}


CASE_VOLUMES = ("I_t", "I_t1", "B_t", "A_t", "A_t1")


def write_cohort(cases, out_dir, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cases:
        entry = {"patient_id": case.patient_id}
        for name in CASE_VOLUMES:
            rel = f"{case.patient_id}/{name}.nii"
            (out / case.patient_id).mkdir(exist_ok=True)
            save_nifti(getattr(case, name), out / rel)
            entry[name] = rel
        labels = list(case.body_part_map)
        entry["body_part_map"] = labels
        entry["body_part_boundary"] = labels.index(THORAX) if THORAX in labels else len(labels)
        entry["provenance"] = case.provenance
        entries.append(entry)
    manifest = {"format_version": MANIFEST_VERSION, **(extra or {}), "cases": entries}
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_cohort(path):
    """Read cases back from a cohort directory or its manifest file."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GenerationError(f"cannot read cohort manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    cases = []
    for entry in manifest["cases"]:
        vols = {}
        for name in CASE_VOLUMES:
            v = load_nifti(root / entry[name], kind="mask" if name[0] in "AB" else "intensity")
            vols[name] = v
        cases.append(LongitudinalCase(patient_id=entry["patient_id"], body_part_map=tuple(entry["body_part_map"]),
                                      provenance=entry.get("provenance", {}), **vols))
    return cases
