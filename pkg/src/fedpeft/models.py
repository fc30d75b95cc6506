"""Model construction, the tagged parameter registry, and parameter counting.

Two families are supported: a plain MLP and a small pre-norm vision
transformer (patch embedding, class token, learned positional embedding).
Every parameter is registered under a dotted name with a role tag, and the
registry also records which parameters are trainable and which are sent over
the wire each round.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

ROLES = ("backbone-weight", "backbone-bias", "head", "adapter", "prompt")
MODES = ("full", "head", "bias", "adapter", "prompt")


@dataclass(frozen=True)
class ModelSpec:
    family: str = "vit"
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    mlp_hidden_dim: int = 256
    depth: int = 4
    num_heads: int = 4
    num_classes: int = 10
    in_channels: int = 3
    input_dim: int | None = None  # mlp only; defaults to in_channels * image_size**2

    def __post_init__(self):
        if self.family not in ("mlp", "vit"):
            raise ConfigError(f"unknown model family {self.family!r}")
        for name in ("image_size", "patch_size", "embed_dim", "mlp_hidden_dim",
                     "depth", "num_heads", "num_classes", "in_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.family == "vit":
            if self.image_size % self.patch_size:
                raise ConfigError(f"image_size {self.image_size} is not divisible by "
                                  f"patch_size {self.patch_size}")
            if self.embed_dim % self.num_heads:
                raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by "
                                  f"num_heads {self.num_heads}")
        if self.input_dim is not None and self.input_dim < 1:
            raise ConfigError("input_dim must be positive")

    @classmethod
    def vit_base(cls, num_classes: int = 100) -> ModelSpec:
        return cls("vit", 224, 16, 768, 3072, 12, 12, num_classes)

    @classmethod
    def mlp(cls, input_dim: int, hidden: int, num_classes: int, depth: int = 1) -> ModelSpec:
        return cls("mlp", image_size=1, patch_size=1, embed_dim=hidden, mlp_hidden_dim=hidden,
                   depth=depth, num_heads=1, num_classes=num_classes, input_dim=input_dim)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def features(self) -> int:
        """Flattened input width for the mlp family."""
        if self.input_dim is not None:
            return self.input_dim
        return self.in_channels * self.image_size ** 2

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    role: str
    trainable: bool = True
    transmitted: bool = True

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParameterRegistry:
    """Ordered catalogue of parameters.  Order defines the wire layout."""

    def __init__(self, entries=()):
        self._entries: dict[str, ParamEntry] = {}
        for e in entries:
            self.add(e)

    def add(self, entry: ParamEntry) -> None:
        if entry.role not in ROLES:
            raise ValueError(f"unknown role {entry.role!r}")
        if entry.name in self._entries:
            raise ContractError(f"parameter {entry.name!r} registered twice")
        if entry.transmitted and not entry.trainable:
            raise ContractError(f"{entry.name}: transmitted parameters must be trainable")
        self._entries[entry.name] = entry

    def update(self, name: str, **changes) -> None:
        entry = replace(self._entries[name], **changes)
        if entry.transmitted and not entry.trainable:
            raise ContractError(f"{name}: transmitted parameters must be trainable")
        self._entries[name] = entry

    def __getitem__(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self, *, role=None, trainable=None, transmitted=None) -> list[str]:
        out = []
        for e in self._entries.values():
            if role is not None and e.role != role:
                continue
            if trainable is not None and e.trainable != trainable:
                continue
            if transmitted is not None and e.transmitted != transmitted:
                continue
            out.append(e.name)
        return out

    def count(self, *, trainable=None, transmitted=None) -> int:
        return sum(self._entries[n].size
                   for n in self.names(trainable=trainable, transmitted=transmitted))

    def copy(self) -> ParameterRegistry:
        return ParameterRegistry(self._entries.values())


class GlobalModel:
    """A model: its spec, the registry, and one tensor per registry entry."""

    def __init__(self, spec: ModelSpec, registry: ParameterRegistry, params: dict[str, Tensor],
                 mode=None):
        self.spec = spec
        self.registry = registry
        self.params = params
        self.mode = mode
        for e in registry:
            if params[e.name].shape != e.shape:
                raise ContractError(f"{e.name}: weight shape {params[e.name].shape} "
                                    f"!= registered {e.shape}")
        self.sync_flags()

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def sync_flags(self) -> None:
        for e in self.registry:
            self.params[e.name].requires_grad = e.trainable

    def add_param(self, entry: ParamEntry, value: np.ndarray) -> None:
        self.registry.add(entry)
        self.params[entry.name] = Tensor(value, requires_grad=entry.trainable, dtype=self.dtype)

    def trainable_params(self) -> list[Tensor]:
        return [self.params[n] for n in self.registry.names(trainable=True)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> GlobalModel:
        """Independent copy.  Frozen arrays are shared read-only; trainable ones are copied."""
        params = {}
        for e in self.registry:
            data = self.params[e.name].data
            params[e.name] = Tensor(data.copy() if e.trainable else data, dtype=data.dtype)
        return GlobalModel(self.spec, self.registry.copy(), params, self.mode)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def __call__(self, x) -> Tensor:
        return forward(self, x)


# ---------------------------------------------------------------------------
# initialisation


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations (resampling)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _base_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], str]]:
    d, h, c = spec.embed_dim, spec.mlp_hidden_dim, spec.num_classes
    if spec.family == "mlp":
        layout = []
        fan_in = spec.features
        for i in range(spec.depth):
            layout += [(f"fc{i}.weight", (fan_in, h), "backbone-weight"),
                       (f"fc{i}.bias", (h,), "backbone-bias")]
            fan_in = h
        return layout + [("head.weight", (h, c), "head"), ("head.bias", (c,), "head")]
    patch_in = spec.in_channels * spec.patch_size ** 2
    layout = [("patch_embed.weight", (patch_in, d), "backbone-weight"),
              ("patch_embed.bias", (d,), "backbone-bias"),
              ("cls_token", (1, 1, d), "backbone-weight"),
              ("pos_embed", (1, spec.num_patches + 1, d), "backbone-weight")]
    for i in range(spec.depth):
        b = f"blocks.{i}."
        layout += [(b + "norm1.weight", (d,), "backbone-weight"),
                   (b + "norm1.bias", (d,), "backbone-bias"),
                   (b + "attn.qkv.weight", (d, 3 * d), "backbone-weight"),
                   (b + "attn.qkv.bias", (3 * d,), "backbone-bias"),
                   (b + "attn.proj.weight", (d, d), "backbone-weight"),
                   (b + "attn.proj.bias", (d,), "backbone-bias"),
                   (b + "norm2.weight", (d,), "backbone-weight"),
                   (b + "norm2.bias", (d,), "backbone-bias"),
                   (b + "mlp.fc1.weight", (d, h), "backbone-weight"),
                   (b + "mlp.fc1.bias", (h,), "backbone-bias"),
                   (b + "mlp.fc2.weight", (h, d), "backbone-weight"),
                   (b + "mlp.fc2.bias", (d,), "backbone-bias")]
    return layout + [("norm.weight", (d,), "backbone-weight"),
                     ("norm.bias", (d,), "backbone-bias"),
                     ("head.weight", (d, c), "head"),
                     ("head.bias", (c,), "head")]


def init_head(rng: np.random.Generator, shape) -> np.ndarray:
    return trunc_normal(rng, shape, 0.01)


def _init_value(rng, spec: ModelSpec, name: str, shape) -> np.ndarray:
    if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
        return np.ones(shape)
    if name == "head.weight":
        return init_head(rng, shape)
    if name.endswith("bias"):
        return np.zeros(shape)
    if spec.family == "mlp":
        return rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
    return trunc_normal(rng, shape, 0.02)


def build_model(spec: ModelSpec, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> GlobalModel:
    """Freshly initialised model with every parameter trainable and transmitted."""
    rng = np.random.default_rng(seed)
    registry = ParameterRegistry()
    params = {}
    for name, shape, role in _base_layout(spec):
        registry.add(ParamEntry(name, shape, role))
        params[name] = Tensor(_init_value(rng, spec, name, shape), dtype=dtype)
    return GlobalModel(spec, registry, params)


# ---------------------------------------------------------------------------
# analytical parameter counts


@dataclass(frozen=True)
class ParamCounts:
    total: int
    tuned: int
    transmitted: int


def adapter_width(spec: ModelSpec, bottleneck: int | None = None, reduction: int | None = None) -> int:
    if bottleneck is not None:
        return int(bottleneck)
    if reduction is not None:
        return max(1, spec.embed_dim // int(reduction))
    return 8


def count_params(spec: ModelSpec, mode="full", *, adapter_bottleneck: int | None = None,
                 adapter_reduction: int | None = None, prompt_length: int = 10) -> ParamCounts:
    """Closed-form (total, tuned, transmitted) counts without allocating weights.

    ``mode`` is a mode name or any object with ``kind`` (and optionally
    ``adapter_bottleneck``, ``adapter_reduction``, ``prompt_length``) attributes.
    """
    if not isinstance(mode, str):
        adapter_bottleneck = getattr(mode, "adapter_bottleneck", adapter_bottleneck)
        adapter_reduction = getattr(mode, "adapter_reduction", adapter_reduction)
        prompt_length = getattr(mode, "prompt_length", prompt_length)
        mode = mode.kind
    if mode not in MODES:
        raise ValueError(f"unknown tuning mode {mode!r}; expected one of {MODES}")
    d, h, c, L = spec.embed_dim, spec.mlp_hidden_dim, spec.num_classes, spec.depth
    if spec.family == "mlp":
        if mode in ("adapter", "prompt"):
            raise ConfigError(f"mode {mode!r} requires the vit family")
        head = h * c + c
        base = spec.features * h + h + (L - 1) * (h * h + h) + head
        biases = L * h
        extra = 0
    else:
        p = spec.patch_size
        head = d * c + c
        block = (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d) + 4 * d
        base = (p * p * spec.in_channels * d + d) + d + (spec.num_patches + 1) * d \
            + L * block + 2 * d + head
        biases = L * (3 * d + d + h + d + 2 * d) + d + d
        extra = 0
        if mode == "adapter":
            b = adapter_width(spec, adapter_bottleneck, adapter_reduction)
            extra = L * (d * b + b + b * d + d)
        elif mode == "prompt":
            extra = L * int(prompt_length) * d
    total = base + extra
    tuned = {"full": total, "head": head, "bias": biases + head,
             "adapter": extra + head, "prompt": extra + head}[mode]
    return ParamCounts(total=total, tuned=tuned, transmitted=tuned)


# ---------------------------------------------------------------------------
# the transmitted vector


def snapshot_transmitted(model: GlobalModel) -> np.ndarray:
    """Flat copy of every transmitted parameter, in registry order."""
    names = model.registry.names(transmitted=True)
    if not names:
        return np.zeros(0, dtype=model.dtype)
    return np.concatenate([model.params[n].data.ravel() for n in names])


def load_transmitted(model: GlobalModel, theta: np.ndarray) -> GlobalModel:
    """Overwrite the transmitted parameters from ``theta``; everything else is untouched."""
    theta = np.asarray(theta)
    expected = model.registry.count(transmitted=True)
    if theta.ndim != 1 or theta.size != expected:
        raise ContractError(f"transmitted vector has length {theta.size}, expected {expected}")
    offset = 0
    for n in model.registry.names(transmitted=True):
        p = model.params[n]
        k = p.size
        p.data = theta[offset:offset + k].reshape(p.shape).astype(p.dtype, copy=True)
        offset += k
    return model


# ---------------------------------------------------------------------------
# forward passes


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) images to (B, num_patches, C * patch * patch) rows."""
    b, c, hgt, wid = x.shape
    gh, gw = hgt // patch, wid // patch
    x = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def _linear(model: GlobalModel, x: Tensor, prefix: str) -> Tensor:
    return x @ model.params[prefix + ".weight"] + model.params[prefix + ".bias"]


def _norm(model: GlobalModel, x: Tensor, prefix: str) -> Tensor:
    return T.layer_norm(x) * model.params[prefix + ".weight"] + model.params[prefix + ".bias"]


def attention(model: GlobalModel, x: Tensor, prefix: str) -> Tensor:
    b, n, d = x.shape
    heads = model.spec.num_heads
    dh = d // heads
    qkv = _linear(model, x, prefix + ".qkv").reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    out = T.softmax(scores, axis=-1) @ v
    return _linear(model, out.transpose(0, 2, 1, 3).reshape(b, n, d), prefix + ".proj")


def _feed_forward(model: GlobalModel, x: Tensor, prefix: str) -> Tensor:
    return _linear(model, T.gelu(_linear(model, x, prefix + ".fc1")), prefix + ".fc2")


def block_forward(model: GlobalModel, x: Tensor, i: int) -> Tensor:
    """One pre-norm transformer block, with an adapter on the FFN branch if present."""
    b = f"blocks.{i}."
    x = x + attention(model, _norm(model, x, b + "norm1"), b + "attn")
    h = x
    x = _feed_forward(model, _norm(model, x, b + "norm2"), b + "mlp")
    if b + "adapter.down.weight" in model.params:
        adpt = _linear(model, T.gelu(_linear(model, x, b + "adapter.down")), b + "adapter.up")
        x = adpt + x
    return x + h


def embed(model: GlobalModel, x) -> Tensor:
    spec = model.spec
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=model.dtype)
    if x.ndim != 4 or x.shape[1:] != (spec.in_channels, spec.image_size, spec.image_size):
        raise ShapeError("embed", x.shape, detail=f"expected (B, {spec.in_channels}, "
                           f"{spec.image_size}, {spec.image_size})")
    tokens = _linear(model, Tensor(patchify(x, spec.patch_size)), "patch_embed")
    cls = T.broadcast_to(model.params["cls_token"], (x.shape[0], 1, spec.embed_dim))
    return T.concat([cls, tokens], axis=1) + model.params["pos_embed"]


def vit_forward(model: GlobalModel, x, hidden: list | None = None) -> Tensor:
    """Logits from the class token.  ``hidden`` collects each block's output if given."""
    h = embed(model, x)
    prompts = model.params.get("prompt_tokens")
    for i in range(model.spec.depth):
        if prompts is not None:
            n_prompt = prompts.shape[1]
            p = T.broadcast_to(prompts[i][None], (h.shape[0], n_prompt, h.shape[2]))
            h = T.concat([p, h], axis=1)
            h = block_forward(model, h, i)
            h = h[:, n_prompt:]
        else:
            h = block_forward(model, h, i)
        if hidden is not None:
            hidden.append(h)
    h = _norm(model, h, "norm")
    return _linear(model, h[:, 0], "head")


def mlp_forward(model: GlobalModel, x) -> Tensor:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=model.dtype)
    h = Tensor(x.reshape(x.shape[0], -1))
    if h.shape[1] != model.spec.features:
        raise ShapeError("mlp", h.shape, detail=f"expected {model.spec.features} features")
    for i in range(model.spec.depth):
        h = T.gelu(_linear(model, h, f"fc{i}"))
    return _linear(model, h, "head")


def forward(model: GlobalModel, x) -> Tensor:
    if model.spec.family == "mlp":
        return mlp_forward(model, x)
    return vit_forward(model, x)


def predict(model: GlobalModel, x, batch_size: int = 256) -> np.ndarray:
    """Logits for ``x`` without recording a graph."""
    outs = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(forward(model, x[start:start + batch_size]).data)
    return np.concatenate(outs) if outs else np.zeros((0, model.spec.num_classes))
