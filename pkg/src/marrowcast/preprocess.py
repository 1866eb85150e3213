"""Bias-field correction and affine alignment of follow-up scans.

Coordinates are millimetres with the origin at voxel (0, 0, 0) and axes
along the array axes (``x_mm = index * spacing``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, DivergenceError, GeometryError
from .volume import Geometry, MaskVolume, Volume, check_same_geometry

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class AffineTransform:
    """Affine map ``y = L @ x + t`` in millimetres, stored as a 3x4 matrix."""
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 4)
        if not np.all(np.isfinite(m)):
            raise GeometryError("affine transform has non-finite entries")
        if abs(np.linalg.det(m[:, :3])) <= 1e-9:
            raise GeometryError("affine linear part is singular")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.eye(3, 4))

    @classmethod
    def from_list(cls, values):
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 4))

    @classmethod
    def rigid(cls, rotation_deg=(0.0, 0.0, 0.0), translation_mm=(0.0, 0.0, 0.0), center_mm=(0.0, 0.0, 0.0)):
        """Rotation about ``center_mm`` (x, then y, then z axis) followed by a translation."""
        ax, ay, az = np.deg2rad(rotation_deg)
        rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
        ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
        rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
        lin = rz @ ry @ rx
        c = np.asarray(center_mm, dtype=np.float64)
        t = c - lin @ c + np.asarray(translation_mm, dtype=np.float64)
        return cls(np.hstack([lin, t[:, None]]))

    @property
    def linear(self):
        return self.matrix[:, :3]

    @property
    def translation(self):
        return self.matrix[:, 3]

    def homogeneous(self):
        return np.vstack([self.matrix, [0, 0, 0, 1]])

    def inverse(self):
        return AffineTransform(np.linalg.inv(self.homogeneous())[:3])

    def compose(self, other):
        """``self`` after ``other``."""
        return AffineTransform((self.homogeneous() @ other.homogeneous())[:3])

    def apply(self, points_mm):
        p = np.asarray(points_mm, dtype=np.float64)
        return p @ self.linear.T + self.translation

    def as_list(self):
        return [float(v) for v in self.matrix.ravel()]


# -- bias field -------------------------------------------------------------

def bias_correct(vol, fwhm_mm=120.0):
    """Homomorphic bias correction over the nonzero support.

    The log-intensity is smoothed with a Gaussian of the given FWHM using
    normalised convolution (background excluded), exponentiated and divided
    out. The mean over nonzero voxels is preserved and zeros stay zero.
    """
    data = vol.data.astype(np.float64)
    support = data > 0
    if not support.any():
        raise DegenerateInputError("bias correction needs at least one positive voxel")
    sigma = [fwhm_mm * FWHM_TO_SIGMA / s for s in vol.spacing]
    logi = np.zeros_like(data)
    logi[support] = np.log(data[support])
    num = ndimage.gaussian_filter(logi, sigma, mode="constant")
    den = ndimage.gaussian_filter(support.astype(np.float64), sigma, mode="constant")
    out = np.zeros_like(data)
    est = num[support] / np.maximum(den[support], 1e-12)
    out[support] = data[support] / np.exp(est - est.mean())
    out[support] *= data[support].mean() / out[support].mean()
    return vol.with_data(out, bias_corrected=True)


# -- resampling -------------------------------------------------------------

def _voxel_matrix(t, src_spacing, dst_spacing):
    """Homogeneous map from destination voxel indices to source voxel indices."""
    inv = t.inverse().homogeneous()
    m = np.diag(list(1.0 / np.asarray(src_spacing)) + [1.0]) @ inv @ np.diag(list(dst_spacing) + [1.0])
    # snap round-off so that integer shifts stay exact
    snapped = np.round(m)
    return np.where(np.abs(m - snapped) < 1e-9, snapped, m)


def _is_binary(data):
    return np.all((data == 0) | (data == 1))


def resample(vol, t, target):
    """Resample ``vol`` into ``target`` geometry through transform ``t``.

    ``t`` maps ``vol``'s millimetre space into the target's. Intensity
    volumes use trilinear interpolation; binary masks use nearest
    neighbour. Voxels whose source lies outside the field of view are 0.
    """
    geom = target.geometry if hasattr(target, "geometry") else target
    m = _voxel_matrix(t, vol.spacing, geom.spacing)
    binary_mask = isinstance(vol, MaskVolume) and _is_binary(vol.data)
    out = ndimage.affine_transform(vol.data.astype(np.float64), m[:3, :3], offset=m[:3, 3],
                                   output_shape=tuple(geom.dims), order=0 if binary_mask else 1,
                                   mode="constant", cval=0.0)
    if isinstance(vol, MaskVolume):
        out = np.clip(out, 0.0, 1.0)
    # source positions inside the field of view; only registration reads this
    prior = vol.meta.get("field_of_view")
    known = prior.astype(np.float64) if prior is not None and prior.shape == vol.dims else np.ones(vol.dims)
    inside = ndimage.affine_transform(known, m[:3, :3], offset=m[:3, 3],
                                      output_shape=tuple(geom.dims), order=0, mode="constant", cval=0.0)
    return type(vol)(out, geom.spacing, {**vol.meta, "field_of_view": inside > 0.5})


# -- registration -----------------------------------------------------------

def _extend_empty_end_slices(data):
    """Replace all-zero axial slices at either z end by the nearest acquired slice.

    An all-zero slice inside a body scan means "not acquired" (for example
    the slab a previous resampling pushed out of the field of view). Only
    the registration objective sees this extension; it matches the edge
    replication the warp already applies beyond the array bounds.
    """
    filled = np.flatnonzero(np.any(data != 0, axis=(0, 1)))
    if filled.size == 0:
        return data
    lo, hi = filled[0], filled[-1]
    if lo == 0 and hi == data.shape[2] - 1:
        return data
    out = data.copy()
    out[:, :, :lo] = data[:, :, lo:lo + 1]
    out[:, :, hi + 1:] = data[:, :, hi:hi + 1]
    return out


def _registration_image(vol):
    """Voxel data with unacquired regions filled from the nearest acquired voxel."""
    data = vol.data.astype(np.float64)
    fov = vol.meta.get("field_of_view")
    if fov is not None and fov.shape == data.shape and fov.any() and not fov.all():
        idx = ndimage.distance_transform_edt(~fov, return_distances=False, return_indices=True)
        data = data[tuple(idx)]
    return _extend_empty_end_slices(data)


def _pyramid(data, spacing, levels, min_size=8):
    """Finest-first list of ``(image, spacing)``; each level halves resolution."""
    out = [(data, tuple(spacing))]
    for _ in range(1, levels):
        img, sp = out[-1]
        factors = [2 if n >= 2 * min_size else 1 for n in img.shape]
        smooth = ndimage.gaussian_filter(img, [0.5 * f if f > 1 else 0.0 for f in factors])
        img = smooth[::factors[0], ::factors[1], ::factors[2]]
        out.append((img, tuple(s * f for s, f in zip(sp, factors))))
    return out


class _LevelProblem:
    """SSD objective for one pyramid level in normalised parameters.

    Parameters ``q`` (12) define the fixed->moving map in coordinates
    ``u = (x - c) / R``: ``u_m = (I + L) u_f + tau`` with ``q = [L.ravel(), tau]``.
    """

    def __init__(self, fixed, f_spacing, moving, m_spacing, center, radius):
        self.fixed = fixed
        self.moving = moving
        self.f_spacing = np.asarray(f_spacing)
        self.m_spacing = np.asarray(m_spacing)
        self.c = center
        self.R = radius
        grads = np.gradient(moving, *m_spacing)
        self.grads = grads
        idx = np.indices(fixed.shape, dtype=np.float64).reshape(3, -1)
        self.u = (idx * self.f_spacing[:, None] - center[:, None]) / radius
        self.f = fixed.reshape(-1)

    def transform(self, q):
        """Fixed-mm -> moving-mm affine for parameters ``q``."""
        lin = np.eye(3) + q[:9].reshape(3, 3)
        t = self.c - lin @ self.c + self.R * q[9:]
        return AffineTransform(np.hstack([lin, t[:, None]]))

    def _warp(self, img, fm):
        # affine_transform wants output-voxel -> input-voxel; edge extension
        # keeps the objective continuous when samples cross the field of view
        m = np.diag(list(1.0 / self.m_spacing) + [1.0]) @ fm.homogeneous() @ np.diag(list(self.f_spacing) + [1.0])
        return ndimage.affine_transform(img, m[:3, :3], offset=m[:3, 3], output_shape=self.fixed.shape,
                                        order=1, mode="nearest").reshape(-1)

    def objective(self, q):
        try:
            fm = self.transform(q)
        except GeometryError:
            return math.inf
        r = self._warp(self.moving, fm) - self.f
        return float(np.mean(r * r))

    def gauss_newton(self, q):
        fm = self.transform(q)
        r = self._warp(self.moving, fm) - self.f
        g = np.stack([self._warp(gi, fm) for gi in self.grads])  # (3, N), d(moving)/d(mm)
        ones = np.ones((1, self.u.shape[1]))
        basis = np.vstack([self.u, ones]) * self.R  # (4, N)
        # Jacobian columns ordered as q: L[i, j] -> g_i * u_j ; tau_i -> g_i
        jac = np.empty((12, r.size))
        for i in range(3):
            for j in range(3):
                jac[3 * i + j] = g[i] * basis[j]
            jac[9 + i] = g[i] * basis[3]
        n = r.size
        grad = 2.0 * jac @ r / n
        hess = 2.0 * jac @ jac.T / n
        return float(np.mean(r * r)), grad, hess


def register_affine_detailed(fixed, moving, levels=3, max_iter=200, tol=1e-6):
    """Like :func:`register_affine` but also returns per-level objective traces."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    f_pyr = _pyramid(_registration_image(fixed), fixed.spacing, levels)
    m_pyr = _pyramid(_registration_image(moving), moving.spacing, levels)
    extent = np.array(fixed.dims) * np.array(fixed.spacing)
    center = (np.array(fixed.dims) - 1) * np.array(fixed.spacing) / 2.0
    radius = float(np.linalg.norm(extent) / 2.0)
    q = np.zeros(12)
    traces = []
    for level in reversed(range(levels)):
        (fi, fs), (mi, ms) = f_pyr[level], m_pyr[level]
        prob = _LevelProblem(fi, fs, mi, ms, center, radius)
        obj, grad, hess = prob.gauss_newton(q)
        if not math.isfinite(obj):
            raise DivergenceError("non-finite objective at level start", last_stable=prob.transform(q))
        trace = [obj]
        step = 1.0
        for _ in range(max_iter):
            damp = 1e-6 * np.trace(hess) / 12 + 1e-12
            try:
                direction = -np.linalg.solve(hess + damp * np.eye(12), grad)
            except np.linalg.LinAlgError:
                direction = -grad
            step = min(1.0, step * 2.0)
            accepted = False
            while step > 1e-8:
                trial = q + step * direction
                val = prob.objective(trial)
                if not math.isfinite(val) and not np.isinf(val):
                    raise DivergenceError("non-finite objective during line search",
                                          last_stable=prob.transform(q))
                if val < obj:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            rel = (obj - val) / max(obj, 1e-300)
            q = trial
            obj, grad, hess = prob.gauss_newton(q)
            if not math.isfinite(obj):
                raise DivergenceError("non-finite objective", last_stable=prob.transform(q - step * direction))
            trace.append(obj)
            if rel < tol:
                break
        traces.append({"level": level, "objective": trace})
    finest = _LevelProblem(f_pyr[0][0], f_pyr[0][1], m_pyr[0][0], m_pyr[0][1], center, radius)
    at_identity = finest.objective(np.zeros(12))
    at_solution = finest.objective(q)
    if not at_solution <= at_identity:
        q = np.zeros(12)
        at_solution = at_identity
    fixed_to_moving = finest.transform(q)
    info = {"levels": traces, "objective_identity": at_identity, "objective_final": at_solution}
    return fixed_to_moving.inverse(), info


def register_affine(fixed, moving, levels=3):
    """12-parameter affine registration minimising mean squared difference.

    Coarse-to-fine over ``levels`` pyramid levels; descent directions come
    from the Gauss-Newton system and steps are accepted only if the
    objective decreases (backtracking by halving). Returns the transform
    mapping ``moving`` coordinates to ``fixed`` coordinates.
    """
    t, _ = register_affine_detailed(fixed, moving, levels)
    return t


def align_pair(case, levels=3):
    """Resample the follow-up image and annotations into baseline space."""
    check_same_geometry(case.I_t, case.I_t1, case.A_t1)
    t, info = register_affine_detailed(case.I_t, case.I_t1, levels)
    geom = case.I_t.geometry
    prov = dict(case.provenance)
    prov["alignment"] = {"transform_moving_to_fixed": t.as_list(),
                         "objective_identity": info["objective_identity"],
                         "objective_final": info["objective_final"]}
    return case.replace(I_t1=resample(case.I_t1, t, geom), A_t1=resample(case.A_t1, t, geom),
                        provenance=prov)


def misalign_followup(case, t):
    """Apply a known transform to the follow-up image and annotations (test helper)."""
    geom = case.I_t.geometry
    return case.replace(I_t1=resample(case.I_t1, t, geom), A_t1=resample(case.A_t1, t, geom))


def preprocess_case(case, fwhm_mm=120.0, align=True, levels=3):
    """Bias-correct both time points, optionally align, then normalise intensities."""
    from .volume import normalize_intensity

    c = case.replace(I_t=bias_correct(case.I_t, fwhm_mm), I_t1=bias_correct(case.I_t1, fwhm_mm))
    if align:
        c = align_pair(c, levels)
    return c.replace(I_t=normalize_intensity(c.I_t), I_t1=normalize_intensity(c.I_t1))


def volume_centroid_mm(mask):
    """Centroid in mm of a mask volume's foreground (used for alignment checks)."""
    idx = np.argwhere(mask.data >= 0.5)
    if len(idx) == 0:
        raise GeometryError("empty mask has no centroid")
    return idx.mean(axis=0) * np.asarray(mask.spacing)


__all__ = ["AffineTransform", "Geometry", "align_pair", "bias_correct", "misalign_followup",
           "preprocess_case", "register_affine", "register_affine_detailed", "resample", "Volume"]
