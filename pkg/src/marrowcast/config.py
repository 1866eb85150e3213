"""Run configuration: one JSON document, validated before any work starts.

A config names a ``profile`` (``desk_scale`` or ``paper_scale``) whose
defaults fill every section; keys given explicitly override them. Unknown
keys are rejected at every level.
"""
from __future__ import annotations

import copy
import hashlib
import json
import zlib
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import patches
from .errors import ConfigError
from .phantom import PhantomParams
from .unet import UNetConfig

CONFIG_SCHEMA_VERSION = 1
SEED_STREAMS = ("phantom", "init-bone", "init-lesion", "shuffle", "folds")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PhantomSection(_Strict):
    n_patients: int = Field(12, ge=1)
    dims: tuple[int, int, int] = (96, 96, 24)
    spacing: tuple[float, float, float] = (4.0, 4.0, 6.0)
    n_bones: int = Field(4, ge=0)
    n_emerging_lesions: int = Field(3, ge=0)
    n_stable_lesions: int = Field(2, ge=0)
    n_anomalies: int = Field(2, ge=0)
    precursor_contrast: float = Field(0.4, ge=0.0, le=1.0)
    noise_sigma: float = Field(0.04, ge=0.0)
    bias_field: bool = False
    bias_strength: float = 0.35
    bone_radius_mm: float = Field(34.0, gt=0)
    cortex_mm: float = Field(5.0, gt=0)
    lesion_radius_mm: tuple[float, float] = (9.0, 14.0)
    resolved_fraction: float = Field(0.0, ge=0.0, le=1.0)
    growth_margin: int = Field(0, ge=0)
    legs_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    intensity_scale: float = Field(1000.0, gt=0)
    max_retries: int = Field(200, ge=1)

    def params(self, seed=0):
        d = self.model_dump()
        d.pop("n_patients")
        return PhantomParams.from_dict({**d, "seed": seed})


class NetSection(_Strict):
    input_size: int = Field(ge=1)
    in_channels: int = Field(1, ge=1)
    depth: int = Field(ge=1)
    base_channels: int = Field(ge=1)
    channel_growth: float = Field(2.0, ge=1.0)
    loss_kind: Literal["bce", "weighted_bce"]
    w_pos: Optional[float] = Field(None, ge=0.0)
    lr: float = Field(gt=0.0)
    epochs: int = Field(ge=1)
    batch_size: int = Field(ge=1)

    def unet(self, seed=0):
        return UNetConfig.from_dict({**self.model_dump(), "seed": seed})


class CascadeSection(_Strict):
    threshold: float = Field(patches.BONE_THRESHOLD, ge=0.0, le=1.0)
    dilation_radius_px: int = Field(patches.DILATION_RADIUS_PX, ge=0)
    stride: int = Field(patches.DEFAULT_STRIDE, ge=1)
    train_stride: int = Field(patches.DEFAULT_STRIDE, ge=1)
    max_negatives_per_case: Optional[int] = Field(None, ge=0)
    fusion: Literal["mean", "max", "center"] = "mean"
    bone_source: Literal["ground_truth", "bonenet"] = "ground_truth"


class PreprocessSection(_Strict):
    bias_fwhm_mm: float = Field(120.0, gt=0)
    align: bool = True
    registration_levels: int = Field(3, ge=1)


class RunConfig(_Strict):
    schema_version: Literal[1] = 1
    profile: Literal["desk_scale", "paper_scale"]
    seed: int = Field(0, ge=0)
    reference_mode: bool = True
    output_dir: Optional[str] = None
    phantom: PhantomSection
    bonenet: NetSection
    lesionnet: NetSection
    cascade: CascadeSection
    preprocess: PreprocessSection

    def canonical_json(self):
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def seed_for(self, stream, *index):
        return derive_seed(self.seed, stream, *index)


PROFILES = {
    "desk_scale": {
        "phantom": {"dims": [96, 96, 24], "spacing": [4.0, 4.0, 6.0]},
        "bonenet": {"input_size": 96, "depth": 3, "base_channels": 4, "loss_kind": "bce",
                    "lr": 3e-3, "epochs": 3, "batch_size": 2},
        "lesionnet": {"input_size": 32, "depth": 2, "base_channels": 8, "loss_kind": "weighted_bce",
                      "lr": 1e-3, "epochs": 3, "batch_size": 32},
        "cascade": {"stride": 2, "train_stride": 6, "max_negatives_per_case": 200},
    },
    "paper_scale": {
        "phantom": {"dims": [384, 384, 30], "spacing": [1.0, 1.0, 6.0]},
        "bonenet": {"input_size": 384, "depth": 4, "base_channels": 16, "loss_kind": "bce",
                    "lr": 1e-4, "epochs": 10, "batch_size": 4},
        "lesionnet": {"input_size": 64, "depth": 3, "base_channels": 16, "loss_kind": "weighted_bce",
                      "lr": 1e-4, "epochs": 10, "batch_size": 32},
        "cascade": {"stride": 2, "train_stride": 2, "max_negatives_per_case": None},
    },
}


def derive_seed(seed, stream, *index):
    """Seed of a named substream of the global seed (stable across runs and platforms)."""
    if stream not in SEED_STREAMS:
        raise ConfigError(f"unknown seed stream {stream!r}")
    key = [int(seed), zlib.crc32(stream.encode())] + [int(i) for i in index]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(doc, dotted, value):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not a section")
    node[keys[-1]] = value


def parse_override(text):
    """``key.path=value`` with ``value`` parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(doc=None, overrides=()):
    """Validate a config document after applying profile defaults and overrides."""
    doc = copy.deepcopy(doc or {})
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_path(doc, key, value)
    profile = doc.get("profile", "desk_scale")
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    full = _merge({"profile": profile, "phantom": {}, "cascade": {}, "preprocess": {},
                   **copy.deepcopy(PROFILES[profile])}, doc)
    try:
        cfg = RunConfig.model_validate(full)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid config at {loc or '<root>'}: {first['msg']}") from exc
    cfg.bonenet.unet()  # divisibility and other structural checks
    cfg.lesionnet.unet()
    if cfg.bonenet.input_size < max(cfg.phantom.dims[:2]):
        raise ConfigError("bonenet.input_size must be at least the slice size (slices are padded, never resized)")
    return cfg


def load_config(path=None, overrides=()):
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return build_config(doc, overrides)


def config_schema():
    return RunConfig.model_json_schema()
