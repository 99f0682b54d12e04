"""Named scale presets. `paper-exact` mirrors the published setup;
`desk-small` is the workstation-sized configuration every code path shares.
"""

from __future__ import annotations

from dataclasses import dataclass

from statebench.errors import ConfigurationError
from statebench.formats import encoded_length
from statebench.models import (
    DenseSsmConfig,
    LstmConfig,
    ModelSpec,
    TransformerConfig,
)


@dataclass(frozen=True)
class Preset:
    name: str
    transformer_layers: int
    transformer_dim: int
    transformer_heads: int
    lstm_dim: int
    ssm_dim: int
    steps: int
    eval_every: int
    batch: int


PRESETS = {
    "paper-exact": Preset(
        name="paper-exact",
        transformer_layers=6,
        transformer_dim=256,
        transformer_heads=4,
        lstm_dim=768,
        ssm_dim=256,
        steps=250_000,
        eval_every=1000,
        batch=64,
    ),
    "desk-small": Preset(
        name="desk-small",
        transformer_layers=2,
        transformer_dim=64,
        transformer_heads=4,
        lstm_dim=64,
        ssm_dim=16,
        steps=20_000,
        eval_every=250,
        batch=64,
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; choices: {sorted(PRESETS)}"
        ) from None


def max_positions_for(max_len: int) -> int:
    """Covers every format up to the 2x-length OOD evaluation."""
    return encoded_length("cot", 2 * max_len) + 2


def model_spec_for(preset: Preset, family: str, vocab: int,
                   max_len: int) -> ModelSpec:
    if family == "transformer":
        return ModelSpec(family, TransformerConfig(
            layers=preset.transformer_layers,
            dim=preset.transformer_dim,
            heads=preset.transformer_heads,
            max_positions=max_positions_for(max_len),
            vocab=vocab,
        ))
    if family == "lstm":
        return ModelSpec(family, LstmConfig(dim=preset.lstm_dim, vocab=vocab))
    if family == "dense_ssm":
        return ModelSpec(family, DenseSsmConfig(state_dim=preset.ssm_dim, vocab=vocab))
    raise ConfigurationError(f"unknown model family {family!r}")
