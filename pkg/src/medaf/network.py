"""Multi-expert CNN with 1x1-conv class-activation heads and a gating network.

Layer list of the default desk-scale backbone (all 3x3 convs use padding 1,
every conv except the heads is followed by ReLU):

=====================  ============================  ======
name                   shape                         stride
=====================  ============================  ======
stem.conv1             C        -> stem[0], 3x3      1
stem.conv2             stem[0]  -> stem[1], 3x3      2
expert{i}.conv1        stem[1]  -> branch[0], 3x3    2
expert{i}.conv2        branch[0] -> branch[1], 3x3   1
expert{i}.head         branch[1] -> K, 1x1           1
gate.conv1, gate.conv2 same as the expert convs
gate.fc1               branch[1] -> gate_hidden      (ReLU)
gate.fc2               gate_hidden -> N              (softmax)
=====================  ============================  ======

Every layer carries a bias. The gating network is only built when N >= 2;
with a single expert fusion is the identity.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, ConfigError, DimensionError

FUSION_MODES = ("gating", "mean", "single_expert")
_SINGLE_RE = re.compile(r"^single_expert(?:_(\d+))?$")


@dataclass
class MedafConfig:
    num_experts: int = 3
    num_classes: int = 6
    input_shape: tuple[int, int, int] = (1, 32, 32)
    stem_channels: tuple[int, int] = (8, 16)
    branch_channels: tuple[int, int] = (16, 32)
    gate_hidden: int = 32
    beta1: float = 1.0
    beta2: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.stem_channels = tuple(int(v) for v in self.stem_channels)
        self.branch_channels = tuple(int(v) for v in self.branch_channels)
        self.validate()

    def validate(self) -> None:
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be [C, H, W], got {self.input_shape}")
        if len(self.stem_channels) != 2 or len(self.branch_channels) != 2:
            raise ConfigError("stem_channels and branch_channels take exactly two widths")
        if min(self.stem_channels + self.branch_channels) < 1 or self.gate_hidden < 1:
            raise ConfigError("channel widths must be positive")
        if min(self.beta1, self.beta2) < 0:
            raise ConfigError("beta1 and beta2 must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_shape", "stem_channels", "branch_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MedafConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def parse_fusion_mode(mode: str, num_experts: int) -> tuple[str, int | None]:
    """Split ``"single_expert_2"`` into ``("single_expert", 2)``."""
    if mode in ("gating", "mean"):
        return mode, None
    m = _SINGLE_RE.match(mode)
    if not m:
        raise ConfigError(f"unknown fusion mode {mode!r}; expected gating, mean or single_expert_<i>")
    idx = int(m.group(1) or 0)
    if idx >= num_experts:
        raise ConfigError(f"fusion mode {mode!r} names expert {idx} but there are {num_experts}")
    return "single_expert", idx


def _layer_specs(cfg: MedafConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(name, weight shape) for every layer, in declaration order."""
    C = cfg.input_shape[0]
    s0, s1 = cfg.stem_channels
    b0, b1 = cfg.branch_channels
    K, N = cfg.num_classes, cfg.num_experts
    specs = [("stem.conv1", (s0, C, 3, 3)), ("stem.conv2", (s1, s0, 3, 3))]
    for i in range(N):
        specs += [(f"expert{i}.conv1", (b0, s1, 3, 3)),
                  (f"expert{i}.conv2", (b1, b0, 3, 3)),
                  (f"expert{i}.head", (K, b1, 1, 1))]
    if N >= 2:
        specs += [("gate.conv1", (b0, s1, 3, 3)),
                  ("gate.conv2", (b1, b0, 3, 3)),
                  ("gate.fc1", (cfg.gate_hidden, b1)),
                  ("gate.fc2", (N, cfg.gate_hidden))]
    return specs


def parameter_count(cfg: MedafConfig) -> int:
    """Closed-form count: stem + N * branch + gating."""
    C = cfg.input_shape[0]
    s0, s1 = cfg.stem_channels
    b0, b1 = cfg.branch_channels
    K, N, Hd = cfg.num_classes, cfg.num_experts, cfg.gate_hidden
    stem = (9 * C * s0 + s0) + (9 * s0 * s1 + s1)
    trunk = (9 * s1 * b0 + b0) + (9 * b0 * b1 + b1)
    branch = trunk + (b1 * K + K)
    gating = trunk + (b1 * Hd + Hd) + (Hd * N + N) if N >= 2 else 0
    return stem + N * branch + gating


@dataclass
class Model:
    config: MedafConfig
    params: dict[str, Tensor]
    # per-channel input normalization, filled in from the training split
    norm_mean: list[float] = field(default_factory=list)
    norm_std: list[float] = field(default_factory=list)

    @property
    def num_experts(self) -> int:
        return self.config.num_experts

    def expert_params(self, i: int) -> dict[str, Tensor]:
        prefix = f"expert{i}."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def trainable(self, fusion_mode: str = "gating") -> dict[str, Tensor]:
        """Parameters that receive gradient under ``fusion_mode``."""
        kind, _ = parse_fusion_mode(fusion_mode, self.num_experts)
        if kind == "gating":
            return dict(self.params)
        return {k: v for k, v in self.params.items() if not k.startswith("gate.")}

    def n_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))


def build_model(config: MedafConfig, rng_seed: int | None = None) -> Model:
    """Fan-in scaled uniform init, drawn in declaration order from one seeded stream."""
    config.validate()
    seed = config.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _layer_specs(config):
        fan_in = int(np.prod(shape[1:]))
        # ReLU-followed layers get He-uniform, output layers a narrower range
        is_output = name.endswith(".head") or name == "gate.fc2"
        bound = np.sqrt((1.0 if is_output else 6.0) / fan_in)
        params[name + ".weight"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        params[name + ".bias"] = Tensor(np.zeros(shape[0]), requires_grad=True)
    return Model(config=config, params=params)


@dataclass
class ExpertOutput:
    feature_map: Tensor  # [B, K, H, W] class-indexed map M_i
    cam_for_label: Tensor  # [B, H, W]
    logits: Tensor  # [B, K], GAP of feature_map


@dataclass
class ForwardBundle:
    expert_outputs: list[ExpertOutput]
    gating_weights: Tensor  # [B, N]
    fused_logits: Tensor  # [B, K]
    cam_classes: np.ndarray  # [N, B] class used for each expert's cam_for_label

    @property
    def feature_maps(self) -> list[Tensor]:
        return [e.feature_map for e in self.expert_outputs]

    @property
    def expert_logits(self) -> list[Tensor]:
        return [e.logits for e in self.expert_outputs]


def _conv_relu(x, p, name, stride):
    return ad.relu(ad.conv2d(x, p[name + ".weight"], p[name + ".bias"], stride=stride, padding=1))


def _trunk(x, p, prefix):
    h = _conv_relu(x, p, prefix + ".conv1", 2)
    return _conv_relu(h, p, prefix + ".conv2", 1)


def forward(model: Model, images, label_for_cam=None, fusion_mode: str = "gating") -> ForwardBundle:
    """Run all experts and fuse their logits.

    ``images`` is ``[B, C, H, W]`` (a single ``[C, H, W]`` image is treated as
    a batch of one). ``label_for_cam`` selects the CAM channel per sample;
    when omitted each expert's own argmax class is used.
    """
    cfg = model.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != cfg.input_shape:
        raise DimensionError(f"expected images [B, {cfg.input_shape}], got {x.shape}")
    B = x.shape[0]
    K, N = cfg.num_classes, cfg.num_experts

    if label_for_cam is not None:
        labels = np.broadcast_to(np.asarray(label_for_cam, dtype=np.int64), (B,))
        if np.any(labels < 0) or np.any(labels >= K):
            raise ArgumentError(f"label_for_cam out of range for {K} classes")

    p = model.params
    stem = _conv_relu(x, p, "stem.conv1", 1)
    stem = _conv_relu(stem, p, "stem.conv2", 2)

    outputs: list[ExpertOutput] = []
    cam_classes = np.zeros((N, B), dtype=np.int64)
    for i in range(N):
        h = _trunk(stem, p, f"expert{i}")
        fmap = ad.conv2d(h, p[f"expert{i}.head.weight"], p[f"expert{i}.head.bias"])
        logits = ad.global_average_pool(fmap)
        cls = labels if label_for_cam is not None else np.argmax(logits.data, axis=1)
        cam_classes[i] = cls
        outputs.append(ExpertOutput(fmap, ad.take_channel(fmap, cls), logits))

    weights = gating_weights(model, stem, fusion_mode)
    fused = ad.weighted_sum(weights, ad.stack([o.logits for o in outputs], axis=1))
    return ForwardBundle(outputs, weights, fused, cam_classes)


def gating_weights(model: Model, stem: Tensor, fusion_mode: str) -> Tensor:
    N = model.num_experts
    B = stem.shape[0]
    kind, idx = parse_fusion_mode(fusion_mode, N)
    if N == 1:
        return Tensor(np.ones((B, 1)))
    if kind == "mean":
        return Tensor(np.full((B, N), 1.0 / N))
    if kind == "single_expert":
        w = np.zeros((B, N))
        w[:, idx] = 1.0
        return Tensor(w)
    p = model.params
    g = ad.global_average_pool(_trunk(stem, p, "gate"))
    g = ad.relu(ad.linear(g, p["gate.fc1.weight"], p["gate.fc1.bias"]))
    return ad.softmax(ad.linear(g, p["gate.fc2.weight"], p["gate.fc2.bias"]))


def extract_cam(expert_output: ExpertOutput, k: int) -> Tensor:
    """Channel ``k`` of the expert's feature map (``[B, H, W]`` or ``[H, W]``)."""
    fmap = expert_output.feature_map
    K = fmap.shape[-3]
    if not 0 <= k < K:
        raise ArgumentError(f"class {k} out of range for {K} classes")
    return ad.select(fmap, k, axis=-3)


def copy_model(model: Model) -> Model:
    params = {k: Tensor(v.data, requires_grad=True) for k, v in model.params.items()}
    return Model(model.config, params, list(model.norm_mean), list(model.norm_std))


def layer_names(config: MedafConfig) -> Sequence[str]:
    return [name for name, _ in _layer_specs(config)]
