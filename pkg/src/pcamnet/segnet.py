"""Small encoder-decoder for volumetric segmentation with a PCAM plug point.

Encoder level ``k`` holds ``base_channels * 2**k`` channels; each block is
conv3x3x3 -> instance norm -> leaky ReLU, followed by 2x max pooling. The
decoder upsamples trilinearly, concatenates the skip and applies a block.
Decoder upsampling layers are numbered 1..stages from low to high
resolution; ``pcam_location = i`` inserts a side-output head and PCAM right
after layer ``i``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .morphology import DEFAULT_ELEMENT, StructureElement
from .pcam import build_priors, pcam_apply
from .tensor import Tensor

NET_MAGIC = b"PCAMN1"


@dataclass
class NetworkConfig:
    stages: int = 3
    base_channels: int = 8
    num_classes: int = 2
    pcam_location: int | None = 3
    leaky_slope: float = 0.01
    seed: int = 0
    erosion_iterations: int = 1
    element_3d: bool = False
    threshold: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.base_channels < self.num_classes:
            raise ConfigError("base_channels must be >= num_classes")
        if self.pcam_location is not None and not 1 <= self.pcam_location <= self.stages:
            raise ConfigError(f"pcam_location must be none or in 1..{self.stages}")
        if self.leaky_slope < 0:
            raise ConfigError("leaky_slope must be >= 0")
        if self.erosion_iterations < 1:
            raise ConfigError("erosion_iterations must be >= 1")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown network config keys: {sorted(extra)}")
        d = dict(d)
        if d.get("pcam_location") in ("none", "None"):
            d["pcam_location"] = None
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def element(self) -> StructureElement:
        return StructureElement.cube() if self.element_3d else DEFAULT_ELEMENT

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass
class ForwardOutputs:
    logits: Tensor  # (B, N, H, W, S)
    probs: Tensor
    side_outputs: list = field(default_factory=list)  # [(level, probs)]
    features_at_plug: tuple | None = None  # (pcam input, pcam output)
    priors: list | None = None  # per batch element: (N, HWS) masks or None
    pcam_status: list = field(default_factory=list)


class Network:
    def __init__(self, config: NetworkConfig):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        c = config.channels
        S = config.stages
        for k in range(S):
            self._block(f"enc{k}", 1 if k == 0 else c(k - 1), c(k), rng)
        self._block("bottleneck", c(S - 1), c(S), rng)
        for i in range(1, S + 1):
            L = S - i
            self._block(f"dec{i}", c(L + 1) + c(L), c(L), rng)
        self._head("head", c(0), rng)
        # initialised last so that enabling PCAM leaves every other weight unchanged
        if config.pcam_location is not None:
            self._head("side", c(S - config.pcam_location), rng)

    def _block(self, name, cin, cout, rng):
        fan_in = cin * 27
        self._param(f"{name}.conv", rng.standard_normal((cout, cin, 3, 3, 3)) * np.sqrt(2.0 / fan_in))
        self._param(f"{name}.gamma", np.ones(cout))
        self._param(f"{name}.beta", np.zeros(cout))

    def _head(self, name, cin, rng):
        n = self.config.num_classes
        self._param(f"{name}.w", rng.standard_normal((n, cin, 1, 1, 1)) * np.sqrt(2.0 / cin))
        self._param(f"{name}.b", np.zeros(n))

    def _param(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _apply_block(self, name, h):
        p = self.params
        h = T.conv3d(h, p[f"{name}.conv"])
        h = T.instance_norm(h, p[f"{name}.gamma"], p[f"{name}.beta"])
        return T.leaky_relu(h, self.config.leaky_slope)

    def _apply_head(self, name, h):
        return T.conv3d(h, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def forward(self, x, use_pcam: bool = True, priors=None) -> ForwardOutputs:
        """Run the network on ``(B, 1, H, W, S)`` (or unbatched ``(1, H, W, S)``).

        ``priors`` optionally replaces mask construction with fixed per-sample
        ``(N, HWS)`` masks (``None`` entries skip PCAM for that sample).
        """
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 4:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 5 or x.shape[1] != 1:
            raise DimensionError(f"input must be (B, 1, H, W, S), got {x.shape}")
        div = 2 ** cfg.stages
        if any(n % div for n in x.shape[2:]):
            raise DimensionError(f"extents {x.shape[2:]} not divisible by {div}")
        out = ForwardOutputs(logits=None, probs=None)
        skips = []
        h = x
        for k in range(cfg.stages):
            h = self._apply_block(f"enc{k}", h)
            skips.append(h)
            h = T.maxpool3d(h, 2)
        h = self._apply_block("bottleneck", h)
        for i in range(1, cfg.stages + 1):
            h = T.upsample_trilinear(h, 2)
            h = T.concat([h, skips[cfg.stages - i]], axis=1)
            h = self._apply_block(f"dec{i}", h)
            if use_pcam and cfg.pcam_location == i:
                side = T.softmax(self._apply_head("side", h), axis=1)
                out.side_outputs.append((cfg.stages - i, side))
                h_in = h
                h = self._pcam(h, side, priors, out)
                out.features_at_plug = (h_in, h)
        out.logits = self._apply_head("head", h)
        out.probs = T.softmax(out.logits, axis=1)
        return out

    def _pcam(self, h, side, priors, out):
        cfg = self.config
        used = []
        pieces = []
        for b in range(h.shape[0]):
            if priors is not None:
                masks = priors[b]
                status = "given" if masks is not None else "skipped"
            else:
                prior, status = build_priors(side.data[b], cfg.element, cfg.erosion_iterations,
                                             cfg.threshold)
                masks = None if prior is None else prior.flat()
            used.append(masks)
            out.pcam_status.append(status)
            Fb = T.select(h, b)
            pieces.append(Fb if masks is None else pcam_apply(Fb, masks))
        out.priors = used
        return T.stack(pieces, axis=0)

    __call__ = forward

    # --------------------------------------------------------------- checkpoints

    def state(self) -> list[np.ndarray]:
        return [p.data for p in self.params.values()]

    def to_bytes(self) -> bytes:
        cfg = json.dumps(self.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(NET_MAGIC)
        buf.write(struct.pack("<Q", len(cfg)))
        buf.write(cfg)
        buf.write(struct.pack("<Q", len(self.params)))
        for p in self.params.values():
            T.save_tensor(buf, p)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Network":
        buf = io.BytesIO(raw)
        if buf.read(len(NET_MAGIC)) != NET_MAGIC:
            raise ContractError("not a network checkpoint")
        (n,) = struct.unpack("<Q", buf.read(8))
        cfg = NetworkConfig.from_dict(json.loads(buf.read(n).decode()))
        net = cls(cfg)
        (count,) = struct.unpack("<Q", buf.read(8))
        if count != len(net.params):
            raise ContractError(f"checkpoint holds {count} tensors, config implies {len(net.params)}")
        for name in net.params:
            t = T.load_tensor(buf)
            if t.shape != net.params[name].shape:
                raise ContractError(f"{name}: checkpoint shape {t.shape} != {net.params[name].shape}")
            t.requires_grad = True
            net.params[name] = t
        return net

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build(config: NetworkConfig) -> Network:
    return Network(config)


def forward(net: Network, x, use_pcam: bool = True, priors=None) -> ForwardOutputs:
    return net.forward(x, use_pcam, priors)
