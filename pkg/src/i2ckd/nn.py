"""Tiny stride-1 convolutional segmentation networks.

A network is a stack of conv3x3+ReLU blocks followed by a 1x1 classifier
head. The output of block ``feature_tap`` is exposed as the feature map used
for class prototypes; an optional 1x1 projection maps those features to the
teacher's channel count when the two differ.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter


class ConfigError(ValueError):
    pass


def strict_from_dict(cls, data: dict, where: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {unknown}")
    return cls(**data)


@dataclass
class NetConfig:
    in_channels: int = 3
    widths: list[int] = field(default_factory=lambda: [16, 32])
    num_classes: int = 5
    feature_tap: Optional[int] = None  # None means the last block
    projection: Optional[int] = None  # output channels of the 1x1 feature projection

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be a non-empty list of positive ints")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")
        if self.feature_tap is None:
            self.feature_tap = len(self.widths) - 1
        if not 0 <= self.feature_tap < len(self.widths):
            raise ConfigError(
                f"feature_tap {self.feature_tap} out of range for {len(self.widths)} blocks"
            )
        if self.projection is not None and self.projection < 1:
            raise ConfigError("projection must be a positive channel count")

    @property
    def feature_channels(self) -> int:
        """Channel count of the features returned by ``forward``."""
        if self.projection is not None:
            return self.projection
        return self.widths[self.feature_tap]

    @classmethod
    def from_dict(cls, data: dict) -> "NetConfig":
        return strict_from_dict(cls, data, "net config")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


TEACHER_CONFIG = NetConfig(widths=[32, 64, 64])
STUDENT_CONFIG = NetConfig(widths=[16, 32], projection=64)


class SegNetwork:
    def __init__(self, config: NetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E6]))
        self.parameters: list[Parameter] = []
        cin = config.in_channels
        for i, width in enumerate(config.widths):
            self._add_conv(f"block{i}", rng, width, cin, 3, gain=2.0)
            cin = width
        self._add_conv("head", rng, config.num_classes, cin, 1, gain=1.0)
        # drawn last so the backbone init does not depend on the projection
        if config.projection is not None:
            k = config.widths[config.feature_tap]
            self._add_conv("proj", rng, config.projection, k, 1, gain=1.0)

    def _add_conv(self, name, rng, cout, cin, k, gain):
        std = np.sqrt(gain / (cin * k * k))
        self.parameters.append(Parameter(f"{name}.weight", rng.normal(0.0, std, (cout, cin, k, k))))
        self.parameters.append(Parameter(f"{name}.bias", np.zeros(cout)))

    def param(self, name: str) -> Parameter:
        for p in self.parameters:
            if p.name == name:
                return p
        raise KeyError(name)

    def named_values(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        names = [p.name for p in self.parameters]
        if sorted(values) != sorted(names):
            raise ConfigError(f"parameter set mismatch: expected {names}, got {sorted(values)}")
        for p in self.parameters:
            v = np.asarray(values[p.name], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ConfigError(f"{p.name}: shape {v.shape} != expected {p.value.shape}")
            p.value = np.ascontiguousarray(v)
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.parameters:
            p.requires_grad = False

    def zero_grads(self) -> None:
        for p in self.parameters:
            p.zero_grad()

    def forward(self, batch) -> tuple[Node, Node]:
        """Return (features [B,K,H,W], scores [B,C,H,W]) nodes."""
        x = batch if isinstance(batch, Node) else ad.constant(batch)
        if x.value.ndim != 4 or x.value.shape[1] != self.config.in_channels:
            raise ConfigError(
                f"expected input [B,{self.config.in_channels},H,W], got {x.value.shape}"
            )
        features = None
        h = x
        for i in range(len(self.config.widths)):
            h = ad.relu(ad.conv2d_3x3(h, self.param(f"block{i}.weight"), self.param(f"block{i}.bias")))
            if i == self.config.feature_tap:
                features = h
        scores = ad.conv2d_1x1(h, self.param("head.weight"), self.param("head.bias"))
        if self.config.projection is not None:
            features = ad.conv2d_1x1(features, self.param("proj.weight"), self.param("proj.bias"))
        return features, scores

    def predict(self, images: np.ndarray, batch_size: int = 10) -> np.ndarray:
        """Argmax labels [N,H,W] as uint8, evaluated in fixed-size chunks."""
        out = []
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                _, scores = self.forward(images[start : start + batch_size])
                out.append(np.argmax(scores.value, axis=1).astype(np.uint8))
        return np.concatenate(out, axis=0)
