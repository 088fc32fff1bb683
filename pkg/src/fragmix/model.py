"""Residual backbone -> feature mixer -> projection network.

Tensors are NCHW throughout. Channel-wise fully-connected layers are 1x1
convolutions; every normalisation is a layer norm over the channel axis at
each spatial position.
"""

from __future__ import annotations

import dataclasses
import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ResolutionMismatchError
from .numerics import Tensor, checkpoint, functional as F

SCHEMA_VERSION = 1
STAR_RELU_INIT = (0.8944, -0.4472)
DOWNSAMPLE = 32

ABLATION_VARIANTS = {
    "resnet_avgpool": {"mixer_depth": 0, "aggregation": "avgpool"},
    "resnet_mixer_avgpool": {"aggregation": "avgpool"},
    "resnet_projection": {"mixer_depth": 0, "aggregation": "projection"},
    "resnet_mixer_projection": {"aggregation": "projection"},
}


@dataclass
class ModelConfig:
    input_height: int = 512
    input_width: int = 128
    input_channels: int = 3
    backbone_stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 512])
    backbone_blocks_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    mixer_depth: int = 4
    mixer_kernel_size: int = 3
    mixer_expansion_ratio: int = 2
    mixer_mlp: bool = True
    aggregation: str = "projection"
    projection_channels: int = 512
    projection_map_dim: int = 4
    num_classes: int | None = None
    dropout_p: float = 0.5
    norm_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        self.backbone_stage_channels = list(self.backbone_stage_channels)
        self.backbone_blocks_per_stage = list(self.backbone_blocks_per_stage)
        self.validate()

    def validate(self) -> None:
        if self.input_height % DOWNSAMPLE or self.input_width % DOWNSAMPLE:
            raise ConfigError(
                f"input {self.input_height}x{self.input_width} must be divisible by {DOWNSAMPLE}"
            )
        if len(self.backbone_stage_channels) != 4 or len(self.backbone_blocks_per_stage) != 4:
            raise ConfigError("backbone needs exactly 4 stages (stem /2 and four /2 stages give /32)")
        if min(self.backbone_stage_channels) < 1 or min(self.backbone_blocks_per_stage) < 1:
            raise ConfigError("backbone stage channels and block counts must be >= 1")
        if self.mixer_depth < 0:
            raise ConfigError(f"mixer_depth must be >= 0, got {self.mixer_depth}")
        if self.mixer_kernel_size < 1 or self.mixer_kernel_size % 2 == 0:
            raise ConfigError(f"mixer_kernel_size must be odd, got {self.mixer_kernel_size}")
        if self.mixer_expansion_ratio < 1:
            raise ConfigError("mixer_expansion_ratio must be >= 1")
        if self.aggregation not in ("projection", "avgpool"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.projection_channels < 1 or self.projection_map_dim < 1:
            raise ConfigError("projection sizes must be >= 1")
        if self.num_classes is not None and self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2 when set, got {self.num_classes}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def channels(self) -> int:
        return self.backbone_stage_channels[-1]

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.input_height // DOWNSAMPLE, self.input_width // DOWNSAMPLE

    @property
    def descriptor_dim(self) -> int:
        if self.aggregation == "avgpool":
            return self.channels
        return self.projection_channels * self.projection_map_dim

    def with_variant(self, name: str) -> "ModelConfig":
        """Copy of this config switched to one of the four ablation variants."""
        if name not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(ABLATION_VARIANTS)}")
        overrides = dict(ABLATION_VARIANTS[name])
        if "mixer_depth" not in overrides and self.mixer_depth == 0:
            overrides["mixer_depth"] = 4
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported model config schema version {version}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def infer_shapes(cfg: ModelConfig, batch: int = 1) -> "OrderedDict[str, tuple]":
    """Predict the output shape of every stage from the config alone."""
    shapes: OrderedDict[str, tuple] = OrderedDict()
    h, w = cfg.input_height, cfg.input_width
    shapes["input"] = (batch, cfg.input_channels, h, w)
    h, w = h // 2, w // 2
    shapes["stem"] = (batch, cfg.backbone_stage_channels[0], h, w)
    for i, c in enumerate(cfg.backbone_stage_channels):
        h, w = h // 2, w // 2
        shapes[f"stage{i + 1}"] = (batch, c, h, w)
    shapes["backbone"] = shapes["stage4"]
    shapes["mixer"] = shapes["backbone"]
    if cfg.aggregation == "projection":
        shapes["channel_projection"] = (batch, cfg.projection_channels, h, w)
    shapes["descriptor"] = (batch, cfg.descriptor_dim)
    if cfg.num_classes:
        shapes["logits"] = (batch, cfg.num_classes)
    return shapes


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Model:
    """Parameters plus the forward pass; parameters live in ``self.params``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self._build(np.random.default_rng(seed))

    # -- construction ---------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _norm(self, name: str, c: int) -> None:
        self._add(f"{name}.gamma", np.ones(c))
        self._add(f"{name}.beta", np.zeros(c))

    def _build(self, rng) -> None:
        cfg, dt = self.cfg, self.dtype
        cin = cfg.input_channels
        c0 = cfg.backbone_stage_channels[0]
        self._add("stem.conv", _he(rng, (c0, cin, 3, 3), cin * 9, dt))
        self._norm("stem.norm", c0)
        prev = c0
        for s, (c, nblocks) in enumerate(zip(cfg.backbone_stage_channels, cfg.backbone_blocks_per_stage)):
            for b in range(nblocks):
                p = f"stage{s + 1}.block{b}"
                cin_b = prev if b == 0 else c
                self._add(f"{p}.conv1", _he(rng, (c, cin_b, 3, 3), cin_b * 9, dt))
                self._norm(f"{p}.norm1", c)
                self._add(f"{p}.conv2", _he(rng, (c, c, 3, 3), c * 9, dt))
                self._norm(f"{p}.norm2", c)
                if b == 0:
                    self._add(f"{p}.shortcut", _he(rng, (c, cin_b, 1, 1), cin_b, dt))
                    self._norm(f"{p}.shortcut_norm", c)
            prev = c

        C = cfg.channels
        rC = cfg.mixer_expansion_ratio * C
        ks = cfg.mixer_kernel_size
        for i in range(cfg.mixer_depth):
            p = f"mixer{i}"
            self._norm(f"{p}.norm1", C)
            self._add(f"{p}.expand_fc", _he(rng, (rC, C, 1, 1), C, dt))
            self._add(f"{p}.star_relu.a", np.array(STAR_RELU_INIT[0]))
            self._add(f"{p}.star_relu.b", np.array(STAR_RELU_INIT[1]))
            self._add(f"{p}.depthwise_conv", _he(rng, (rC, 1, ks, ks), ks * ks, dt))
            self._add(f"{p}.reduce_fc", rng.standard_normal((C, rC, 1, 1)) / np.sqrt(rC))
            self._add(f"{p}.scale1", np.ones(C))
            if cfg.mixer_mlp:
                self._norm(f"{p}.norm2", C)
                self._add(f"{p}.mlp_fc1", _he(rng, (rC, C, 1, 1), C, dt))
                self._add(f"{p}.mlp_act.a", np.array(STAR_RELU_INIT[0]))
                self._add(f"{p}.mlp_act.b", np.array(STAR_RELU_INIT[1]))
                self._add(f"{p}.mlp_fc2", rng.standard_normal((C, rC, 1, 1)) / np.sqrt(rC))
                self._add(f"{p}.scale2", np.ones(C))

        if cfg.aggregation == "projection":
            h, w = cfg.feature_hw
            k, n = cfg.projection_channels, cfg.projection_map_dim
            self._add("projection.W_c", rng.standard_normal((k, C)) / np.sqrt(C))
            self._add("projection.b_c", np.zeros(k))
            self._add("projection.W_r", rng.standard_normal((n, h * w)) / np.sqrt(h * w))
            self._add("projection.b_r", np.zeros(n))

        if cfg.num_classes:
            d = cfg.descriptor_dim
            self._add("classifier.weight", rng.standard_normal((cfg.num_classes, d)) / np.sqrt(d))
            self._add("classifier.bias", np.zeros(cfg.num_classes))

    # -- parameter access -------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            v = np.asarray(state[k])
            if v.shape != p.shape:
                raise ConfigError(f"{k}: checkpoint shape {v.shape} != model shape {p.shape}")
            p.data = v.astype(self.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(v.data.tobytes())
        return h.hexdigest()

    # -- stages -----------------------------------------------------------------

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return F.layer_norm(x, 1, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.cfg.norm_eps)

    def backbone_forward(self, x: Tensor, taps: dict | None = None) -> Tensor:
        P = self.params
        x = F.relu(self._ln(F.conv2d(x, P["stem.conv"], stride=2, padding=1), "stem.norm"))
        if taps is not None:
            taps["stem"] = x.shape
        for s, nblocks in enumerate(self.cfg.backbone_blocks_per_stage):
            for b in range(nblocks):
                p = f"stage{s + 1}.block{b}"
                stride = 2 if b == 0 else 1
                h = F.conv2d(x, P[f"{p}.conv1"], stride=stride, padding=1)
                h = F.relu(self._ln(h, f"{p}.norm1"))
                h = self._ln(F.conv2d(h, P[f"{p}.conv2"], padding=1), f"{p}.norm2")
                if b == 0:
                    sc = self._ln(F.conv2d(x, P[f"{p}.shortcut"], stride=2), f"{p}.shortcut_norm")
                else:
                    sc = x
                x = F.relu(F.add(h, sc))
            if taps is not None:
                taps[f"stage{s + 1}"] = x.shape
        return x

    def mixer_block_forward(self, x: Tensor, i: int) -> Tensor:
        P = self.params
        p = f"mixer{i}"
        C = self.cfg.channels
        if x.ndim != 4 or x.shape[1] != C:
            raise ResolutionMismatchError(f"mixer block expects {C} channels, got input {x.shape}")
        rC = P[f"{p}.expand_fc"].shape[0]
        pad = self.cfg.mixer_kernel_size // 2
        h = self._ln(x, f"{p}.norm1")
        h = F.conv2d(h, P[f"{p}.expand_fc"])
        h = F.star_relu(h, P[f"{p}.star_relu.a"], P[f"{p}.star_relu.b"])
        h = F.conv2d(h, P[f"{p}.depthwise_conv"], padding=pad, groups=rC)
        h = F.conv2d(h, P[f"{p}.reduce_fc"])
        y = F.add(x, F.mul(h, F.reshape(P[f"{p}.scale1"], (C, 1, 1))))
        if not self.cfg.mixer_mlp:
            return y
        h = self._ln(y, f"{p}.norm2")
        h = F.conv2d(h, P[f"{p}.mlp_fc1"])
        h = F.star_relu(h, P[f"{p}.mlp_act.a"], P[f"{p}.mlp_act.b"])
        h = F.conv2d(h, P[f"{p}.mlp_fc2"])
        return F.add(y, F.mul(h, F.reshape(P[f"{p}.scale2"], (C, 1, 1))))

    def mixer_forward(self, x: Tensor) -> Tensor:
        for i in range(self.cfg.mixer_depth):
            x = self.mixer_block_forward(x, i)
        return x

    def projection_forward(self, x: Tensor, taps: dict | None = None) -> Tensor:
        """Channel reduction, then spatial reduction, flattened and l2-normalised."""
        P = self.params
        W_c, b_c, W_r, b_r = (P[f"projection.{n}"] for n in ("W_c", "b_c", "W_r", "b_r"))
        n, c, h, w = x.shape
        k, hw = W_c.shape[0], W_r.shape[1]
        if h * w != hw:
            raise ResolutionMismatchError(
                f"projection was built for {hw} spatial positions, got {h}x{w}={h * w}; "
                f"evaluate at the training resolution {self.cfg.input_height}x{self.cfg.input_width}"
            )
        if c != W_c.shape[1]:
            raise ResolutionMismatchError(f"projection expects {W_c.shape[1]} channels, got {c}")
        xc = F.conv2d(x, F.reshape(W_c, (k, c, 1, 1)), b_c)  # (n, k, h, w)
        if taps is not None:
            taps["channel_projection"] = xc.shape
        out = F.matmul(F.reshape(xc, (n * k, hw)), F.transpose(W_r))
        out = F.add(out, b_r)  # (n*k, m)
        m = W_r.shape[0]
        out = F.transpose(F.reshape(out, (n, k, m)), (0, 2, 1))  # X_out = W_r X_c^T: (m, k) per sample
        return F.l2_normalize(F.reshape(out, (n, m * k)), axis=1)

    def avgpool_forward(self, x: Tensor) -> Tensor:
        return F.l2_normalize(F.mean(x, axis=(2, 3)), axis=1)

    def classifier_forward(self, d: Tensor, training: bool, rng: np.random.Generator | None = None) -> Tensor:
        if not self.cfg.num_classes:
            raise ConfigError("classifier head requested but num_classes is not set")
        d = F.dropout(d, self.cfg.dropout_p, rng, training)
        logits = F.matmul(d, F.transpose(self.params["classifier.weight"]))
        return F.add(logits, self.params["classifier.bias"])

    # -- full network -------------------------------------------------------------

    def check_input(self, x: Tensor) -> None:
        cfg = self.cfg
        want = (cfg.input_channels, cfg.input_height, cfg.input_width)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ResolutionMismatchError(f"model built for inputs N x {want}, got {x.shape}")

    def forward(
        self,
        x,
        training: bool = False,
        rng: np.random.Generator | None = None,
        with_logits: bool = False,
        taps: dict | None = None,
    ) -> dict:
        """Return ``{"descriptor": ..., "logits": ...?}`` for an NCHW batch."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        self.check_input(x)
        if taps is not None:
            taps["input"] = x.shape
        f = self.backbone_forward(x, taps)
        if taps is not None:
            taps["backbone"] = f.shape
        f = self.mixer_forward(f)
        if taps is not None:
            taps["mixer"] = f.shape
        if self.cfg.aggregation == "projection":
            d = self.projection_forward(f, taps)
        else:
            d = self.avgpool_forward(f)
        if taps is not None:
            taps["descriptor"] = d.shape
        out = {"descriptor": d}
        if with_logits:
            out["logits"] = self.classifier_forward(d, training, rng)
            if taps is not None:
                taps["logits"] = out["logits"].shape
        return out

    __call__ = forward

    # -- persistence ---------------------------------------------------------------

    def save(self, path, extra_tensors: dict | None = None, meta: dict | None = None) -> None:
        tensors = dict(self.state_dict())
        if extra_tensors:
            tensors.update(extra_tensors)
        checkpoint.save(path, tensors, {"model_config": self.cfg.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["Model", dict, dict]:
        """Return ``(model, meta, extra_tensors)`` from a checkpoint file."""
        tensors, meta = checkpoint.load(path)
        if "model_config" not in meta:
            raise ConfigError(f"{path}: checkpoint has no model config manifest")
        model = cls(ModelConfig.from_dict(meta["model_config"]))
        state = {k: v for k, v in tensors.items() if k in model.params}
        extra = {k: v for k, v in tensors.items() if k not in model.params}
        model.load_state_dict(state)
        return model, meta, extra
