"""Tuning modes: which parameters train and travel, plus adapter/prompt injection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .models import MODES, GlobalModel, ParamEntry, adapter_width, trunc_normal, vit_forward
from .tensor import Tensor

PROMPT_INIT_RANGE = 0.08


@dataclass(frozen=True)
class TuningMode:
    kind: str = "full"
    adapter_bottleneck: int | None = None
    adapter_reduction: int | None = None
    prompt_length: int = 10
    prompt_init: str = "uniform"

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"unknown tuning mode {self.kind!r}; expected one of {MODES}")
        if self.adapter_bottleneck is not None and self.adapter_bottleneck < 1:
            raise ConfigError("adapter_bottleneck must be positive")
        if self.adapter_reduction is not None and self.adapter_reduction < 1:
            raise ConfigError("adapter_reduction must be positive")
        if self.prompt_length < 0:
            raise ConfigError("prompt_length must be non-negative")
        if self.prompt_init not in ("uniform", "zeros"):
            raise ConfigError(f"prompt_init must be 'uniform' or 'zeros', got {self.prompt_init!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def apply_mode(model: GlobalModel, mode: TuningMode | str, seed: int = 0) -> GlobalModel:
    """Freeze, inject, and mark the transmitted set in place; returns ``model``.

    Transmitted equals trainable in every mode.
    """
    if isinstance(mode, str):
        mode = TuningMode(mode)
    if model.mode is not None:
        raise ContractError(f"model already has mode {model.mode.kind!r} applied")
    if model.spec.family != "vit" and mode.kind in ("adapter", "prompt"):
        raise ConfigError(f"mode {mode.kind!r} requires the vit family")

    reg = model.registry
    for e in list(reg):
        if mode.kind == "full":
            keep = True
        elif e.role == "head":
            keep = True
        else:
            keep = mode.kind == "bias" and e.role == "backbone-bias"
        reg.update(e.name, trainable=keep, transmitted=keep)

    rng = np.random.default_rng([seed, 0x9EF7])
    spec = model.spec
    d = spec.embed_dim
    if mode.kind == "adapter":
        b = adapter_width(spec, mode.adapter_bottleneck, mode.adapter_reduction)
        for i in range(spec.depth):
            pre = f"blocks.{i}.adapter."
            model.add_param(ParamEntry(pre + "down.weight", (d, b), "adapter"),
                            trunc_normal(rng, (d, b), 0.02))
            model.add_param(ParamEntry(pre + "down.bias", (b,), "adapter"), np.zeros(b))
            model.add_param(ParamEntry(pre + "up.weight", (b, d), "adapter"), np.zeros((b, d)))
            model.add_param(ParamEntry(pre + "up.bias", (d,), "adapter"), np.zeros(d))
    elif mode.kind == "prompt":
        shape = (spec.depth, mode.prompt_length, d)
        if mode.prompt_init == "zeros":
            value = np.zeros(shape)
        else:
            value = rng.uniform(-PROMPT_INIT_RANGE, PROMPT_INIT_RANGE, shape)
        model.add_param(ParamEntry("prompt_tokens", shape, "prompt"), value)

    model.mode = mode
    model.sync_flags()
    return model


def _require(model: GlobalModel, kind: str) -> None:
    if model.mode is None or model.mode.kind != kind:
        got = None if model.mode is None else model.mode.kind
        raise ContractError(f"expected a model in {kind!r} mode, got {got!r}")


def forward_with_prompts(model: GlobalModel, x, hidden: list | None = None) -> Tensor:
    """Prompts are prepended before every block and stripped after it."""
    _require(model, "prompt")
    return vit_forward(model, x, hidden)


def forward_with_adapters(model: GlobalModel, x, hidden: list | None = None) -> Tensor:
    _require(model, "adapter")
    return vit_forward(model, x, hidden)


def frozen_names(model: GlobalModel) -> list[str]:
    return model.registry.names(trainable=False)


def transmitted_names(model: GlobalModel) -> list[str]:
    return model.registry.names(transmitted=True)
