"""Configurable U-Net on top of :mod:`marrowcast.nn`, plus training and checkpoints.

Two named configurations exist: BoneNet (whole axial slices, plain BCE)
and LesionNet (bone patches, positive-weighted BCE).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, CorruptionError, NonFiniteLossError, ShapeError

CHECKPOINT_FORMAT_VERSION = 1
LOSS_KINDS = ("bce", "weighted_bce")


@dataclass
class UNetConfig:
    input_size: int
    in_channels: int = 1
    depth: int = 3
    base_channels: int = 16
    channel_growth: float = 2.0
    loss_kind: str = "bce"
    w_pos: float | None = None
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0

    def validate(self):
        for name in ("input_size", "in_channels", "depth", "base_channels", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.input_size % (2 ** self.depth):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}")
        if self.channel_growth < 1:
            raise ConfigError("channel_growth must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.w_pos is not None and (not math.isfinite(self.w_pos) or self.w_pos < 0):
            raise ConfigError(f"w_pos must be finite and >= 0, got {self.w_pos}")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        return self

    def channels(self, level):
        return max(1, int(round(self.base_channels * self.channel_growth ** level)))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown UNetConfig keys: {sorted(unknown)}")
        return cls(**d).validate()


def bonenet_default(**overrides):
    """BoneNet at full resolution: 384x384 axial slices."""
    cfg = dict(input_size=384, depth=4, base_channels=16, loss_kind="bce", batch_size=4)
    cfg.update(overrides)
    return UNetConfig(**cfg).validate()


def lesionnet_default(**overrides):
    """LesionNet at full resolution: 64x64 bone patches."""
    cfg = dict(input_size=64, depth=3, base_channels=16, loss_kind="weighted_bce", batch_size=32)
    cfg.update(overrides)
    return UNetConfig(**cfg).validate()


def layer_specs(config):
    """Ordered ``(name, c_in, c_out, k)`` for every convolution in the net."""
    d = config.depth
    specs = []
    c_prev = config.in_channels
    for i in range(d):
        c = config.channels(i)
        specs += [(f"enc{i}a", c_prev, c, 3), (f"enc{i}b", c, c, 3)]
        c_prev = c
    cb = config.channels(d)
    specs += [("bottom_a", c_prev, cb, 3), ("bottom_b", cb, cb, 3)]
    c_prev = cb
    for i in reversed(range(d)):
        c = config.channels(i)
        specs += [(f"dec{i}up", c_prev, c, 3), (f"dec{i}a", 2 * c, c, 3), (f"dec{i}b", c, c, 3)]
        c_prev = c
    specs.append(("head", c_prev, 1, 1))
    return specs


def parameter_count(config):
    return sum(k * k * ci * co + co for _, ci, co, k in layer_specs(config))


class UNetModel:
    """Parameters, optimiser state and config of one U-Net."""

    def __init__(self, config, params, adam=None):
        self.config = config
        self.params = params
        self.adam = adam if adam is not None else nn.AdamState(lr=config.lr)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        """Copy of the model with parameters cast (used for float64 gradient checks)."""
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return UNetModel(self.config, params, nn.AdamState(lr=self.config.lr))

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    # -- forward / backward ------------------------------------------------

    def _conv(self, name, x, cache):
        w, b = self.params[name + ".w"], self.params[name + ".b"]
        if cache is None:
            return nn.conv2d(x, w, b)
        y, cols = nn.conv2d(x, w, b, return_cols=True)
        cache[name] = (x, cols)
        return y

    def _conv_elu(self, name, x, cache):
        z = self._conv(name, x, cache)
        y = nn.elu(z)
        if cache is not None:
            cache[name + ".act"] = (z, y)
        return y

    def forward(self, x, cache=None):
        """Sigmoid output of shape ``(n, 1, s, s)``.

        Pass a dict as ``cache`` to record the activations needed by
        :meth:`backward`.
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size,) * 2:
            raise ShapeError(
                f"expected input (n, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        skips = []
        for i in range(cfg.depth):
            x = self._conv_elu(f"enc{i}a", x, cache)
            x = self._conv_elu(f"enc{i}b", x, cache)
            skips.append(x)
            x, arg = nn.max_pool2(x)
            if cache is not None:
                cache[f"pool{i}"] = arg
        x = self._conv_elu("bottom_a", x, cache)
        x = self._conv_elu("bottom_b", x, cache)
        for i in reversed(range(cfg.depth)):
            x = self._conv_elu(f"dec{i}up", nn.upsample2(x), cache)
            x = nn.concat_channels(skips[i], x)
            x = self._conv_elu(f"dec{i}a", x, cache)
            x = self._conv_elu(f"dec{i}b", x, cache)
        p = nn.sigmoid(self._conv("head", x, cache))
        if cache is not None:
            cache["out"] = p
        return p

    def _conv_back(self, name, dy, cache, grads):
        x, cols = cache[name]
        dx, dw, db = nn.conv2d_backward(dy, x, self.params[name + ".w"], cols)
        grads[name + ".w"] = dw
        grads[name + ".b"] = db
        return dx

    def _conv_elu_back(self, name, dy, cache, grads):
        z, y = cache[name + ".act"]
        return self._conv_back(name, nn.elu_backward(dy, z, y), cache, grads)

    def backward(self, dout, cache):
        """Parameter gradients given dL/d(output). Returns ``(grads, dL/dinput)``."""
        cfg = self.config
        grads = {}
        dz = nn.sigmoid_backward(dout, cache["out"])
        dx = self._conv_back("head", dz, cache, grads)
        dskips = [None] * cfg.depth
        for i in range(cfg.depth):
            c = cfg.channels(i)
            dx = self._conv_elu_back(f"dec{i}b", dx, cache, grads)
            dx = self._conv_elu_back(f"dec{i}a", dx, cache, grads)
            dskips[i], dx = nn.concat_channels_backward(dx, c)
            dx = nn.upsample2_backward(self._conv_elu_back(f"dec{i}up", dx, cache, grads))
        dx = self._conv_elu_back("bottom_b", dx, cache, grads)
        dx = self._conv_elu_back("bottom_a", dx, cache, grads)
        for i in reversed(range(cfg.depth)):
            dx = nn.max_pool2_backward(dx, cache[f"pool{i}"]) + dskips[i]
            dx = self._conv_elu_back(f"enc{i}b", dx, cache, grads)
            dx = self._conv_elu_back(f"enc{i}a", dx, cache, grads)
        return grads, dx

    def loss(self, p, y):
        if self.config.loss_kind == "weighted_bce":
            w = self.config.w_pos if self.config.w_pos is not None else 1.0
            return nn.weighted_bce_loss(p, y, w)
        return nn.bce_loss(p, y)

    def predict(self, x, batch_size=None):
        """Inference in fixed-size chunks; no caches are kept."""
        bs = batch_size or max(self.config.batch_size, 1)
        if len(x) == 0:
            s = self.config.input_size
            return np.zeros((0, 1, s, s), dtype=self.dtype)
        return np.concatenate([self.forward(x[i:i + bs]) for i in range(0, len(x), bs)])


def build(config, seed=None, dtype=np.float32):
    """Fresh model with He-scaled normal weights and zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, ci, co, k in layer_specs(config):
        std = math.sqrt(2.0 / (ci * k * k))
        params[name + ".w"] = (rng.standard_normal((co, ci, k, k)) * std).astype(dtype)
        params[name + ".b"] = np.zeros(co, dtype=dtype)
    return UNetModel(config, params)


def init_output_prior(model, foreground_fraction):
    """Set the head bias to the log-odds of the foreground fraction.

    The untrained net then predicts the class prior everywhere instead of
    0.5, which avoids the early plateau where a heavily imbalanced target
    drives every unit towards "background".
    """
    f = float(np.clip(foreground_fraction, 1e-4, 1 - 1e-4))
    model.params["head.b"][...] = math.log(f / (1.0 - f))
    return model


def forward(model, x):
    return model.forward(x)


def _as_arrays(dataset):
    if hasattr(dataset, "inputs") and hasattr(dataset, "targets"):
        return dataset.inputs, dataset.targets
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        return dataset
    pairs = list(dataset)
    if not pairs:
        return np.zeros((0,)), np.zeros((0,))
    xs = np.concatenate([np.asarray(x).reshape((-1,) + np.shape(x)[-3:]) for x, _ in pairs])
    ys = np.concatenate([np.asarray(y).reshape((-1,) + np.shape(y)[-3:]) for _, y in pairs])
    return xs, ys


def train_epoch(model, dataset, shuffle_seed):
    """One shuffled pass over ``dataset``; returns the mean batch loss.

    ``dataset`` is a sequence of ``(input, target)`` tensor pairs, an
    ``(inputs, targets)`` array tuple, or any object exposing ``inputs``
    and ``targets`` arrays. Targets are binarised at 0.5.
    """
    xs, ys = _as_arrays(dataset)
    if len(xs) == 0:
        raise ValueError("train_epoch needs a non-empty dataset")
    if len(xs) != len(ys):
        raise ShapeError(f"{len(xs)} inputs but {len(ys)} targets")
    order = np.random.default_rng(shuffle_seed).permutation(len(xs))
    bs = model.config.batch_size
    losses = []
    for bi, start in enumerate(range(0, len(order), bs)):
        idx = np.sort(order[start:start + bs])
        x = xs[idx].astype(model.dtype, copy=False)
        y = (ys[idx] >= 0.5).astype(model.dtype)
        cache = {}
        p = model.forward(x, cache)
        loss, dp = model.loss(p, y)
        if not math.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss {loss} at batch {bi}", batch_index=bi, loss=loss)
        grads, _ = model.backward(dp, cache)
        nn.adam_step(model.params, grads, model.adam)
        losses.append(loss)
    return float(np.mean(losses))


def fit(model, dataset, epochs=None, seed=None, log=None):
    """Run ``epochs`` epochs with per-epoch shuffle seeds derived from ``seed``."""
    epochs = model.config.epochs if epochs is None else epochs
    seed = model.config.seed if seed is None else seed
    xs_ys = _as_arrays(dataset)
    history = []
    for e in range(epochs):
        history.append(train_epoch(model, xs_ys, shuffle_seed=[seed, e]))
        if log is not None:
            log(e, history[-1])
    return history


# -- checkpoints -----------------------------------------------------------

def _checkpoint_paths(path):
    p = Path(path)
    base = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    return base.with_name(base.name + ".json"), base.with_name(base.name + ".bin")


def save_checkpoint(model, path):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float32 LE blob)."""
    manifest_path, blob_path = _checkpoint_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    groups = [("param", model.params), ("adam_m", model.adam.m), ("adam_v", model.adam.v)]
    for group, arrays in groups:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            tensors.append({"group": group, "name": name, "shape": list(arr.shape),
                            "offset": offset, "count": int(data.size)})
            chunks.append(data.tobytes())
            offset += data.size
    blob = b"".join(chunks)
    a = model.adam
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "adam": {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t},
        "tensors": tensors,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path, blob_path


def load_checkpoint(path):
    manifest_path, blob_path = _checkpoint_paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
        blob = blob_path.read_bytes()
    except FileNotFoundError as exc:
        raise CorruptionError(f"missing checkpoint file: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"unreadable manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CorruptionError(f"unsupported checkpoint format_version {manifest.get('format_version')}")
    config = UNetConfig.from_dict(manifest["config"])
    if len(blob) != manifest.get("blob_bytes") or len(blob) % 4:
        raise CorruptionError(
            f"blob is {len(blob)} bytes, manifest expects {manifest.get('blob_bytes')}")
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise CorruptionError(f"blob {blob_path} does not match the manifest checksum")
    total = sum(t["count"] for t in manifest["tensors"])
    if total * 4 != len(blob):
        raise CorruptionError(f"tensor index covers {total * 4} bytes, blob has {len(blob)}")
    expected = {}
    for name, ci, co, k in layer_specs(config):
        expected[name + ".w"] = (co, ci, k, k)
        expected[name + ".b"] = (co,)
    flat = np.frombuffer(blob, dtype="<f4")
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        if expected.get(t["name"]) != shape or math.prod(shape) != t["count"]:
            raise CorruptionError(f"tensor {t['name']!r} shape {shape} does not match the config")
        arr = flat[t["offset"]:t["offset"] + t["count"]]
        groups[t["group"]][t["name"]] = arr.astype(np.float32).reshape(shape)
    if set(groups["param"]) != set(expected):
        raise CorruptionError("checkpoint parameter set does not match the config")
    a = manifest["adam"]
    adam = nn.AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"],
                        m=groups["adam_m"], v=groups["adam_v"])
    return UNetModel(config, groups["param"], adam)


def checkpoint_digest(path):
    """sha256 over manifest + blob, for provenance records."""
    h = hashlib.sha256()
    for p in _checkpoint_paths(path):
        h.update(p.read_bytes())
    return h.hexdigest()
