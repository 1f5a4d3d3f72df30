"""QAP-Net: an encoder-decoder segmenter with four optional augmented pyramids.

The backbone is a U-Net-shaped stack (two 3x3 conv + ReLU per level, 2x2
max-pool down, 2x2 stride-2 transpose conv up, 1x1 head with channel
softmax). Four switches add the augmented pyramids:

* ``atrous_124`` / ``atrous_139``: parallel serial-atrous branches with rates
  [1, 2, 4] and [1, 3, 9], fused by a 1x1 conv plus residual, repeated
  depth, depth-1, ..., 1 times along the skip connection of each level.
* ``pool_max`` / ``pool_avg``: 4/6/8/10 pooling pyramids on encoder levels
  1..depth-1 whose quarter-resolution outputs join the decoder stage (or the
  bottleneck) running at that resolution.

Parameters are initialised per layer from ``(seed, layer name)`` so layers
shared between configurations get identical weights.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError
from .tensor import (Tensor, add, avg_pool2d, concat_channels, conv2d, conv2d_transpose, max_pool2d,
                     no_grad, parse_qat, qat_bytes, relu, resize_bilinear, softmax_channels)

ATROUS_RATES = {"124": (1, 2, 4), "139": (1, 3, 9)}
POOL_WINDOWS = (4, 6, 8, 10)
FLAG_NAMES = ("atrous_139", "atrous_124", "pool_max", "pool_avg")

# Ablation rows in results-table order: (atrous_139, atrous_124, pool_max, pool_avg)
TABLE2_COMBINATIONS: Tuple[Tuple[bool, bool, bool, bool], ...] = (
    (False, False, False, False),
    (True, False, False, False),
    (False, True, False, False),
    (True, True, False, False),
    (False, False, True, False),
    (False, False, False, True),
    (False, False, True, True),
    (True, True, False, True),
    (True, True, True, False),
    (True, True, True, True),
)


@dataclass
class ModelConfig:
    base_channels: int = 32
    depth: int = 4
    num_classes: int = 4
    in_channels: int = 1
    input_size: Tuple[int, int] = (256, 256)
    atrous_139: bool = True
    atrous_124: bool = True
    pool_max: bool = True
    pool_avg: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self) -> None:
        if self.base_channels < 1 or self.depth < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise ConfigurationError("base_channels, depth, in_channels must be >= 1 and num_classes >= 2")
        h, w = self.input_size
        step = 2 ** self.depth
        if h % step or w % step or h < step or w < step:
            raise ConfigurationError(f"input size {h}x{w} must be a positive multiple of 2^depth = {step}")
        if self.pool_max or self.pool_avg:
            if self.depth < 2:
                raise ConfigurationError("pooling pyramids need depth >= 2")
            deepest = min(h, w) // 2 ** (self.depth - 2)
            if deepest < 10:
                raise ConfigurationError(
                    f"pooling pyramid at level {self.depth - 1} would see {deepest} pixels; it needs >= 10")

    @property
    def flags(self) -> Dict[str, bool]:
        return {name: getattr(self, name) for name in FLAG_NAMES}

    def with_flags(self, atrous_139: bool, atrous_124: bool, pool_max: bool, pool_avg: bool) -> "ModelConfig":
        data = asdict(self)
        data.update(atrous_139=atrous_139, atrous_124=atrous_124, pool_max=pool_max, pool_avg=pool_avg)
        return ModelConfig(**data)

    def channels(self, level: int) -> int:
        """Feature width of encoder level ``level`` (1-based); depth + 1 is the bottleneck."""
        return self.base_channels * 2 ** (level - 1)

    def to_json(self) -> dict:
        out = asdict(self)
        out["input_size"] = list(self.input_size)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        return cls(**data)


def layer_plan(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (layer name, weight shape) pairs; every layer also owns a bias."""
    c = config.channels
    d = config.depth
    plan = []
    pyramid_kinds = [k for k, on in (("max", config.pool_max), ("avg", config.pool_avg)) if on]
    joins = {stage: 0 for stage in range(1, d + 2)}
    for level in range(1, d):
        joins[level + 2] += len(pyramid_kinds) * c(level)

    for level in range(1, d + 1):
        cin = config.in_channels if level == 1 else c(level - 1)
        plan.append((f"enc{level}.conv1", (c(level), cin, 3, 3)))
        plan.append((f"enc{level}.conv2", (c(level), c(level), 3, 3)))
    for level in range(1, d + 1):
        branches = [b for b, on in (("124", config.atrous_124), ("139", config.atrous_139)) if on]
        if not branches:
            continue
        for j in range(1, d + 2 - level):
            for b in branches:
                for i in range(1, 4):
                    plan.append((f"skip{level}.mod{j}.branch{b}.conv{i}", (c(level), c(level), 3, 3)))
            plan.append((f"skip{level}.mod{j}.fuse", (c(level), len(branches) * c(level), 1, 1)))
    for kind in pyramid_kinds:
        for level in range(1, d):
            plan.append((f"pyr{kind}{level}.fuse", (c(level), len(POOL_WINDOWS) * c(level), 1, 1)))
    plan.append(("bottleneck.conv1", (c(d + 1), c(d) + joins[d + 1], 3, 3)))
    plan.append(("bottleneck.conv2", (c(d + 1), c(d + 1), 3, 3)))
    for level in range(d, 0, -1):
        plan.append((f"dec{level}.tconv", (c(level + 1), c(level), 2, 2)))
        plan.append((f"dec{level}.conv1", (c(level), 2 * c(level) + joins[level], 3, 3)))
        plan.append((f"dec{level}.conv2", (c(level), c(level), 3, 3)))
    plan.append(("head", (config.num_classes, c(1), 1, 1)))
    return plan


def _init_layer(name: str, shape: Tuple[int, ...], seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    if name.endswith("tconv"):
        fan_in = shape[0] * shape[2] * shape[3]
        n_bias = shape[1]
    else:
        fan_in = int(np.prod(shape[1:]))
        n_bias = shape[0]
    bound = np.sqrt(6.0 / fan_in)
    weight = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return weight, np.zeros(n_bias, dtype=np.float32)


def pooling_pyramid(x: Tensor, kind: str) -> Tensor:
    """Pool with windows 4, 6, 8 and 10 (stride = window), resize to a quarter, concatenate.

    The 4x4 branch already has the quarter extent and is used as-is; the
    other three are resized bilinearly. Output has 4x the channels of ``x``.
    """
    if kind not in ("max", "avg"):
        raise ConfigurationError(f"pooling kind must be 'max' or 'avg', got {kind!r}")
    h, w = x.shape[2:]
    if min(h, w) < max(POOL_WINDOWS):
        raise ConfigurationError(f"pooling pyramid needs inputs of at least 10x10, got {h}x{w}")
    pool = max_pool2d if kind == "max" else avg_pool2d
    th, tw = h // 4, w // 4
    outs = []
    for window in POOL_WINDOWS:
        p = pool(x, window, window)
        if window != 4:
            p = resize_bilinear(p, th, tw)
        outs.append(p)
    return concat_channels(outs)


class Model:
    """Parameter store plus the forward assembly for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- parameters --------------------------------------------------------
    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def has_layer(self, layer: str) -> bool:
        return f"{layer}.weight" in self.params

    def layer_names(self) -> List[str]:
        return [name[:-len(".weight")] for name in self.params if name.endswith(".weight")]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise DimensionError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != model shape {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float32)

    # -- building blocks ---------------------------------------------------
    def _conv(self, x: Tensor, layer: str, padding: int = 0, dilation: int = 1) -> Tensor:
        return conv2d(x, self.params[f"{layer}.weight"], self.params[f"{layer}.bias"],
                      padding=padding, dilation=dilation)

    def _double_conv(self, x: Tensor, prefix: str) -> Tensor:
        x = relu(self._conv(x, f"{prefix}.conv1", padding=1))
        return relu(self._conv(x, f"{prefix}.conv2", padding=1))

    def atrous_branch(self, x: Tensor, prefix: str, rates: Sequence[int]) -> Tensor:
        """Three serial 3x3 atrous convs + ReLU; padding keeps the extent."""
        for i, rate in enumerate(rates, start=1):
            x = relu(self._conv(x, f"{prefix}.conv{i}", padding=rate, dilation=rate))
        return x

    def augmented_atrous_module(self, x: Tensor, prefix: str) -> Tensor:
        branches = [self.atrous_branch(x, f"{prefix}.branch{tag}", ATROUS_RATES[tag])
                    for tag, on in (("124", self.config.atrous_124), ("139", self.config.atrous_139)) if on]
        if not branches:
            return x
        fused = self._conv(concat_channels(branches), f"{prefix}.fuse")
        return add(fused, x)

    def atrous_skip_path(self, x: Tensor, level: int) -> Tensor:
        """Serial augmented atrous modules: depth + 1 - level of them (4, 3, 2, 1 at depth 4)."""
        if not (self.config.atrous_124 or self.config.atrous_139):
            return x
        for j in range(1, self.config.depth + 2 - level):
            x = self.augmented_atrous_module(x, f"skip{level}.mod{j}")
        return x

    def skip_module_count(self, level: int) -> int:
        return sum(1 for name in self.layer_names() if name.startswith(f"skip{level}.") and name.endswith(".fuse"))

    # -- forward -------------------------------------------------------------
    def forward(self, batch: Tensor) -> Tensor:
        """Per-pixel class probabilities of shape (N, num_classes, H, W)."""
        cfg = self.config
        if batch.data.ndim != 4 or batch.shape[1] != cfg.in_channels or tuple(batch.shape[2:]) != cfg.input_size:
            raise DimensionError(f"expected batch (N, {cfg.in_channels}, {cfg.input_size[0]}, "
                                 f"{cfg.input_size[1]}), got {batch.shape}")
        d = cfg.depth
        encoded = []
        h = batch
        for level in range(1, d + 1):
            h = self._double_conv(h, f"enc{level}")
            encoded.append(h)
            h = max_pool2d(h, 2, 2)

        joins: Dict[int, List[Tensor]] = {stage: [] for stage in range(1, d + 2)}
        for kind, on in (("max", cfg.pool_max), ("avg", cfg.pool_avg)):
            if not on:
                continue
            for level in range(1, d):
                p = pooling_pyramid(encoded[level - 1], kind)
                joins[level + 2].append(relu(self._conv(p, f"pyr{kind}{level}.fuse")))

        h = self._double_conv(concat_channels([h] + joins[d + 1]), "bottleneck")
        for level in range(d, 0, -1):
            up = conv2d_transpose(h, self.params[f"dec{level}.tconv.weight"],
                                  self.params[f"dec{level}.tconv.bias"], stride=2)
            skip = self.atrous_skip_path(encoded[level - 1], level)
            h = self._double_conv(concat_channels([up, skip] + joins[level]), f"dec{level}")
        return softmax_channels(self._conv(h, "head"))

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Arg-max class ids for a stack of (N, H, W) or (N, C, H, W) images."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[:, None]
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                probs = self.forward(Tensor(images[start:start + batch_size]))
                out.append(probs.data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros((0,) + self.config.input_size, dtype=np.int64)

    # -- persistence ---------------------------------------------------------
    def save(self, path) -> None:
        """Write a JSON manifest line followed by the concatenated ``.qat`` blobs.

        Offsets in the manifest are relative to the first byte after the
        manifest's terminating newline.
        """
        blobs, entries, offset = [], {}, 0
        for name, t in self.params.items():
            arr = t.data
            blob = qat_bytes(arr.reshape((1,) * (4 - arr.ndim) + arr.shape))
            entries[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
            blobs.append(blob)
            offset += len(blob)
        manifest = {"format": "qapseg-checkpoint", "version": 1, "config": self.config.to_json(),
                    "tensors": entries}
        head = json.dumps(manifest, separators=(",", ":"), sort_keys=False).encode("utf-8") + b"\n"
        Path(path).write_bytes(head + b"".join(blobs))

    @classmethod
    def load(cls, path) -> "Model":
        buf = Path(path).read_bytes()
        nl = buf.find(b"\n")
        if nl < 0:
            raise FormatError(f"{path}: no manifest terminator found")
        try:
            manifest = json.loads(buf[:nl].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable manifest ending at byte {nl}: {exc}") from None
        if manifest.get("format") != "qapseg-checkpoint":
            raise FormatError(f"{path}: not a qapseg checkpoint")
        model = build(ModelConfig.from_json(manifest["config"]), seed=0)
        base = nl + 1
        state = {}
        for name, entry in manifest["tensors"].items():
            arr, end = parse_qat(buf, base + entry["offset"])
            if end - base - entry["offset"] != entry["nbytes"]:
                raise FormatError(f"{path}: tensor {name} at byte {base + entry['offset']} has wrong length")
            state[name] = arr.reshape(entry["shape"])
        model.load_state_dict(state)
        return model


def build(config: ModelConfig, seed: int = 0) -> Model:
    config.validate()
    params: Dict[str, Tensor] = {}
    for layer, shape in layer_plan(config):
        weight, bias = _init_layer(layer, shape, seed)
        params[f"{layer}.weight"] = Tensor(weight, requires_grad=True)
        params[f"{layer}.bias"] = Tensor(bias, requires_grad=True)
    return Model(config, params)


def parameter_count(model: Model) -> int:
    return int(sum(p.data.size for p in model.params.values()))
