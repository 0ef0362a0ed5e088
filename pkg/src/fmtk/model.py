"""Hard-parameter-sharing network: one conv backbone, two task heads.

The backbone maps an ``(N, S, S, 3)`` batch to an embedding ``z``. Head B
(overall quality) is a dense layer to C logits plus softmax; head A (the
three quality details) is a dense layer to 3 logits plus independent
sigmoids. Both heads read the very same ``z`` array.

Backbone layout, per stage ``s`` with width ``w_s``::

    conv3x3 -> relu -> [maxpool2x2, all but the last stage]
    -> blocks x (x + relu(conv3x3(x)))

followed by global average pooling, a dense layer to ``embed_dim`` and a
ReLU.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from fmtk.diffcore import (
    INPUT,
    Conv2d,
    Dense,
    GlobalAvgPool,
    Graph,
    MaxPool2x2,
    ReLU,
    ResidualAdd,
    Sigmoid,
    Softmax,
    Tensor,
    load_params,
    save_params,
)

N_DETAILS = 3

# Per-channel input standardization; pipelines replace the defaults with
# training-set statistics, which travel with the checkpoint.
DEFAULT_INPUT_MEAN, DEFAULT_INPUT_STD = 0.5, 0.5
# Without normalization layers, residual branches start scaled down so the
# block outputs stay O(1) at initialization; heads start near-uniform.
RESIDUAL_INIT_SCALE = 0.5
HEAD_INIT_SCALE = 0.25
DETAIL_NAMES = ("illumination", "clarity", "contrast")


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 32
    widths: tuple[int, ...] = (8, 16, 32)
    blocks: int = 2
    embed_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("backbone needs at least one stage")
        if self.blocks < 0 or self.embed_dim < 1:
            raise ValueError("blocks must be >= 0 and embed_dim >= 1")
        stride = 2 ** (len(self.widths) - 1)
        if self.input_size % stride:
            raise ValueError(f"input_size {self.input_size} must be divisible by {stride}")

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** (len(self.widths) - 1)

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BackboneConfig":
        return cls(**{**d, "widths": tuple(d.get("widths", cls.widths))})


def build_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float64) -> Graph:
    g = Graph((cfg.input_size, cfg.input_size, 3), dtype=dtype)
    c_in, last = 3, len(cfg.widths) - 1
    for si, w in enumerate(cfg.widths):
        g.add(f"s{si}.proj", Conv2d(c_in, w, rng, dtype=dtype), g.output or INPUT)
        g.add(f"s{si}.proj_relu", ReLU())
        if si < last:
            g.add(f"s{si}.pool", MaxPool2x2())
        for bi in range(cfg.blocks):
            skip = g.output
            g.add(f"s{si}.b{bi}.conv", Conv2d(w, w, rng, dtype=dtype, init_scale=RESIDUAL_INIT_SCALE))
            g.add(f"s{si}.b{bi}.relu", ReLU())
            g.add(f"s{si}.b{bi}.add", ResidualAdd(), (skip, g.output))
        c_in = w
    g.final_conv = g.output
    g.add("gap", GlobalAvgPool())
    g.add("embed", Dense(c_in, cfg.embed_dim, rng, dtype=dtype))
    g.add("embed_relu", ReLU())
    return g


def build_head(n_in: int, n_out: int, activation: str, rng: np.random.Generator, dtype=np.float64) -> Graph:
    g = Graph((n_in,), dtype=dtype)
    g.add("logits", Dense(n_in, n_out, rng, dtype=dtype, init_scale=HEAD_INIT_SCALE))
    g.add("probs", Softmax() if activation == "softmax" else Sigmoid())
    return g


@dataclass
class MultiTaskNet:
    """Shared backbone plus optional overall-quality and detail heads."""

    config: BackboneConfig
    n_classes: int | None
    backbone: Graph
    head_b: Graph | None = None
    head_a: Graph | None = None
    dtype: np.dtype = field(default=np.dtype(np.float64))
    input_mean: np.ndarray = field(default_factory=lambda: np.full(3, DEFAULT_INPUT_MEAN))
    input_std: np.ndarray = field(default_factory=lambda: np.full(3, DEFAULT_INPUT_STD))

    @classmethod
    def create(cls, config: BackboneConfig, n_classes: int | None, seed: int, with_head_a: bool = False, dtype=np.float64):
        if n_classes is None and not with_head_a:
            raise ValueError("a model needs at least one head")
        if n_classes is not None and config.embed_dim < n_classes:
            raise ValueError("embed_dim must be >= number of classes")
        rng = np.random.default_rng([seed, 0])
        backbone = build_backbone(config, rng, dtype)
        head_b = build_head(config.embed_dim, n_classes, "softmax", rng, dtype) if n_classes else None
        net = cls(config, n_classes, backbone, head_b, None, np.dtype(dtype))
        if with_head_a:
            net.head_a = build_head(config.embed_dim, N_DETAILS, "sigmoid", np.random.default_rng([seed, 1]), dtype)
        return net

    @property
    def is_multitask(self) -> bool:
        return self.head_a is not None and self.head_b is not None

    def attach_head_a(self, seed: int) -> "MultiTaskNet":
        """Copy of this net with a freshly initialized detail head."""
        if self.head_a is not None:
            raise ValueError("model already has a detail head")
        net = self.copy()
        net.head_a = build_head(self.config.embed_dim, N_DETAILS, "sigmoid", np.random.default_rng([seed, 1]), self.dtype)
        return net

    # -- forward / backward -------------------------------------------------

    def forward_shared(self, images) -> np.ndarray:
        x = (np.asarray(images, dtype=self.dtype) - self.input_mean) / self.input_std
        return self.backbone.forward(x)

    def set_input_stats(self, images) -> None:
        """Standardize inputs with the per-channel mean/std of ``images``."""
        images = np.asarray(images, dtype=np.float64)
        self.input_mean = images.mean(axis=(0, 1, 2))
        self.input_std = np.maximum(images.std(axis=(0, 1, 2)), 1e-6)

    def forward_heads(self, z, require_a: bool = False):
        """Return ``(probs_b, probs_a)``; either is None when its head is absent."""
        if require_a and self.head_a is None:
            raise ValueError("detail head (task A) requested but model is single-task")
        probs_b = self.head_b.forward(z) if self.head_b is not None else None
        probs_a = self.head_a.forward(z) if self.head_a is not None else None
        return probs_b, probs_a

    def forward(self, images):
        return self.forward_heads(self.forward_shared(images))

    def backward(self, grad_b=None, grad_a=None, need_input_grad=False):
        """Backpropagate head-output gradients through the shared backbone."""
        dz = None
        for head, g in ((self.head_b, grad_b), (self.head_a, grad_a)):
            if g is None:
                continue
            if head is None:
                raise ValueError("gradient supplied for an absent head")
            gz = head.backward(g)
            dz = gz if dz is None else dz + gz
        if dz is None:
            raise ValueError("no head gradient supplied")
        return self.backbone.backward(dz, need_input_grad=need_input_grad)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {f"shared.{k}": v for k, v in self.backbone.parameters().items()}
        if self.head_b is not None:
            out.update({f"head_b.{k}": v for k, v in self.head_b.parameters().items()})
        if self.head_a is not None:
            out.update({f"head_a.{k}": v for k, v in self.head_a.parameters().items()})
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params) - {k for k in state if k.startswith("meta.")}
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in params.items():
            if state[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {t.data.shape}")
            t.data[...] = state[k]

    def copy(self) -> "MultiTaskNet":
        net = MultiTaskNet.create(
            self.config, self.n_classes, seed=0, with_head_a=self.head_a is not None, dtype=self.dtype
        )
        net.load_state_dict(self.state_dict())
        net.input_mean, net.input_std = self.input_mean.copy(), self.input_std.copy()
        return net

    def save(self, path) -> None:
        state = {
            "meta.input_size": np.array([self.config.input_size], dtype=np.float64),
            "meta.input_mean": np.asarray(self.input_mean, dtype=np.float64),
            "meta.input_std": np.asarray(self.input_std, dtype=np.float64),
            **self.state_dict(),
        }
        save_params(path, state)

    @classmethod
    def load(cls, path, dtype=np.float64) -> "MultiTaskNet":
        return cls.from_state(load_params(path), dtype=dtype)

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], dtype=np.float64) -> "MultiTaskNet":
        """Rebuild a net from checkpoint tensors, inferring the architecture."""
        if "meta.input_size" not in state:
            raise ValueError("checkpoint lacks meta.input_size")
        widths, si = [], 0
        while f"shared.s{si}.proj.w" in state:
            widths.append(state[f"shared.s{si}.proj.w"].shape[3])
            si += 1
        blocks = 0
        while f"shared.s0.b{blocks}.conv.w" in state:
            blocks += 1
        config = BackboneConfig(
            input_size=int(state["meta.input_size"][0]),
            widths=tuple(widths),
            blocks=blocks,
            embed_dim=state["shared.embed.w"].shape[0],
        )
        n_classes = state["head_b.logits.w"].shape[0] if "head_b.logits.w" in state else None
        with_a = "head_a.logits.w" in state
        net = cls.create(config, n_classes, seed=0, with_head_a=with_a, dtype=dtype)
        net.load_state_dict(state)
        if "meta.input_mean" in state:
            net.input_mean = state["meta.input_mean"].copy()
            net.input_std = state["meta.input_std"].copy()
        return net

    def describe(self) -> str:
        return json.dumps(
            {"backbone": self.config.to_json(), "n_classes": self.n_classes, "head_a": self.head_a is not None}
        )
