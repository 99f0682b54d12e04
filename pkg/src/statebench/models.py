"""The three model families as pure parameterized forward functions.

Each forward maps (params, token ids) to per-position logits and is built
from the autodiff primitives, so one backward() call trains any of them.
Params live in a name->array dict with a stable layout for flat-vector
optimization and checkpointing.

  transformer  pre-norm GPT-2-style decoder blocks, learned absolute positions
  lstm         single-layer LSTM cell + per-step linear head
  dense_ssm    h_t = A[x_t] h_{t-1}, full learned per-token transition
               matrices, no additive input term; h_0 learned
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from statebench import autodiff as ad
from statebench.errors import ConfigurationError
from statebench.seeding import derive_seed

FAMILIES = ("transformer", "lstm", "dense_ssm")

INIT_STD = 0.02
LSTM_FORGET_BIAS = 1.0


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 6
    dim: int = 256
    heads: int = 4
    mlp_factor: int = 4
    max_positions: int = 128
    vocab: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigurationError(
                f"dim {self.dim} not divisible by heads {self.heads}"
            )


@dataclass(frozen=True)
class LstmConfig:
    dim: int = 768
    vocab: int = 0


@dataclass(frozen=True)
class DenseSsmConfig:
    state_dim: int = 256
    vocab: int = 0


@dataclass(frozen=True)
class ModelSpec:
    family: str
    config: TransformerConfig | LstmConfig | DenseSsmConfig

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown model family {self.family!r}")


def _trunc_normal(rng: np.random.Generator, shape, std=INIT_STD, clip=2.0):
    """Normal(0, std^2) with values beyond clip*sigma resampled."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > clip
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > clip
    return out * std


def init_transformer(cfg: TransformerConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(derive_seed(seed, "init", "transformer"))
    d, v = cfg.dim, cfg.vocab
    h = cfg.mlp_factor * d
    params: dict[str, np.ndarray] = {
        "tok_emb": _trunc_normal(rng, (v, d)),
        "pos_emb": _trunc_normal(rng, (cfg.max_positions, d)),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        params[p + "ln1_g"] = np.ones(d)
        params[p + "ln1_b"] = np.zeros(d)
        params[p + "w_qkv"] = _trunc_normal(rng, (d, 3 * d))
        params[p + "b_qkv"] = np.zeros(3 * d)
        params[p + "wo"] = _trunc_normal(rng, (d, d))
        params[p + "bo"] = np.zeros(d)
        params[p + "ln2_g"] = np.ones(d)
        params[p + "ln2_b"] = np.zeros(d)
        params[p + "fc_w"] = _trunc_normal(rng, (d, h))
        params[p + "fc_b"] = np.zeros(h)
        params[p + "proj_w"] = _trunc_normal(rng, (h, d))
        params[p + "proj_b"] = np.zeros(d)
    params["lnf_g"] = np.ones(d)
    params["lnf_b"] = np.zeros(d)
    params["head_w"] = _trunc_normal(rng, (d, v))
    return params


def init_lstm(cfg: LstmConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(derive_seed(seed, "init", "lstm"))
    d, v = cfg.dim, cfg.vocab
    b = np.zeros(4 * d)
    b[d:2 * d] = LSTM_FORGET_BIAS
    return {
        "emb": _trunc_normal(rng, (v, d)),
        "wx": _trunc_normal(rng, (d, 4 * d)),
        "wh": _trunc_normal(rng, (d, 4 * d)),
        "b": b,
        "head_w": _trunc_normal(rng, (d, v)),
        "head_b": np.zeros(v),
    }


def init_dense_ssm(cfg: DenseSsmConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(derive_seed(seed, "init", "dense_ssm"))
    d, v = cfg.state_dim, cfg.vocab
    # near-identity transitions keep products stable over length-30 chains;
    # the 1/sqrt(d) factor pins the spectral radius near 1 at every state dim
    trans = np.eye(d)[None, :, :] + rng.normal(0.0, INIT_STD / math.sqrt(d),
                                               size=(v, d, d))
    return {
        "trans": trans,
        "h0": np.ones(d),
        "head_w": _trunc_normal(rng, (d, v)),
        "head_b": np.zeros(v),
    }


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Deterministic per (spec, seed) parameter initialization."""
    if spec.family == "transformer":
        return init_transformer(spec.config, seed)
    if spec.family == "lstm":
        return init_lstm(spec.config, seed)
    return init_dense_ssm(spec.config, seed)


def param_count(spec: ModelSpec) -> int:
    return sum(a.size for a in init_params(spec, seed=0).values())


# ---------------------------------------------------------------------------
# Forwards
# ---------------------------------------------------------------------------


def _lift(ids) -> tuple[np.ndarray, bool]:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        return ids[None, :], True
    if ids.ndim == 2:
        return ids, False
    raise ConfigurationError(f"token ids must be 1-D or 2-D, got {ids.shape}")


def transformer_forward(params: dict[str, ad.Tensor], cfg: TransformerConfig,
                        ids, pad_id: int | None = None) -> ad.Tensor:
    """Strictly causal decoder: logits at t depend only on tokens <= t."""
    ids, squeeze = _lift(ids)
    bsz, t = ids.shape
    if t > cfg.max_positions:
        raise ConfigurationError(
            f"sequence length {t} exceeds max_positions {cfg.max_positions}"
        )
    d, heads = cfg.dim, cfg.heads
    hd = d // heads

    x = ad.embedding_gather(params["tok_emb"], ids)
    pos = ad.tensor_slice(params["pos_emb"], (slice(0, t),))
    x = ad.add(x, pos)

    mask = np.triu(np.full((t, t), ad.MASK_NEG), k=1)[None, None, :, :]
    if pad_id is not None:
        key_pad = np.where(ids == pad_id, ad.MASK_NEG, 0.0)[:, None, None, :]
        mask = mask + key_pad
    mask_t = ad.constant(mask)

    def split_heads(v: ad.Tensor) -> ad.Tensor:
        return ad.transpose(ad.reshape(v, (bsz, t, heads, hd)), (0, 2, 1, 3))

    for i in range(cfg.layers):
        p = f"layer{i}."
        ln1 = ad.layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        qkv = ad.add(ad.matmul(ln1, params[p + "w_qkv"]), params[p + "b_qkv"])
        q = split_heads(ad.tensor_slice(qkv, (Ellipsis, slice(0, d))))
        k = split_heads(ad.tensor_slice(qkv, (Ellipsis, slice(d, 2 * d))))
        v = split_heads(ad.tensor_slice(qkv, (Ellipsis, slice(2 * d, 3 * d))))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), hd**-0.5)
        attn = ad.softmax(ad.add(scores, mask_t))
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (bsz, t, d))
        ctx = ad.add(ad.matmul(ctx, params[p + "wo"]), params[p + "bo"])
        x = ad.add(x, ctx)
        ln2 = ad.layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"])
        mid = ad.gelu(ad.add(ad.matmul(ln2, params[p + "fc_w"]), params[p + "fc_b"]))
        mlp = ad.add(ad.matmul(mid, params[p + "proj_w"]), params[p + "proj_b"])
        x = ad.add(x, mlp)

    x = ad.layer_norm(x, params["lnf_g"], params["lnf_b"])
    logits = ad.matmul(x, params["head_w"])
    return ad.tensor_slice(logits, (0,)) if squeeze else logits


def lstm_forward(params: dict[str, ad.Tensor], cfg: LstmConfig, ids,
                 pad_id: int | None = None) -> ad.Tensor:
    """Single-layer LSTM; h_0 = c_0 = 0; per-step linear head."""
    ids, squeeze = _lift(ids)
    bsz, t = ids.shape
    d = cfg.dim
    x = ad.embedding_gather(params["emb"], ids)
    xz = ad.add(ad.matmul(x, params["wx"]), params["b"])  # [B, T, 4d]
    h = ad.constant(np.zeros((bsz, d)))
    c = ad.constant(np.zeros((bsz, d)))
    steps = []
    cols = [slice(j * d, (j + 1) * d) for j in range(4)]  # i, f, g, o
    for step in range(t):
        z = ad.add(ad.tensor_slice(xz, (slice(None), step)), ad.matmul(h, params["wh"]))
        gi = ad.sigmoid(ad.tensor_slice(z, (slice(None), cols[0])))
        gf = ad.sigmoid(ad.tensor_slice(z, (slice(None), cols[1])))
        gg = ad.tanh(ad.tensor_slice(z, (slice(None), cols[2])))
        go = ad.sigmoid(ad.tensor_slice(z, (slice(None), cols[3])))
        c = ad.add(ad.mul(gf, c), ad.mul(gi, gg))
        h = ad.mul(go, ad.tanh(c))
        steps.append(ad.reshape(h, (bsz, 1, d)))
    hs = ad.concat(steps, axis=1)
    logits = ad.add(ad.matmul(hs, params["head_w"]), params["head_b"])
    return ad.tensor_slice(logits, (0,)) if squeeze else logits


def dense_ssm_forward(params: dict[str, ad.Tensor], cfg: DenseSsmConfig, ids,
                      pad_id: int | None = None) -> ad.Tensor:
    """Purely multiplicative recurrence h_t = A[x_t] h_{t-1}."""
    ids, squeeze = _lift(ids)
    bsz, t = ids.shape
    d = cfg.state_dim
    table = ad.reshape(params["trans"], (cfg.vocab, d * d))
    h = ad.add(ad.reshape(params["h0"], (1, d, 1)), ad.constant(np.zeros((bsz, d, 1))))
    steps = []
    for step in range(t):
        a = ad.reshape(ad.embedding_gather(table, ids[:, step]), (bsz, d, d))
        h = ad.matmul(a, h)
        steps.append(ad.reshape(h, (bsz, 1, d)))
    hs = ad.concat(steps, axis=1)
    logits = ad.add(ad.matmul(hs, params["head_w"]), params["head_b"])
    return ad.tensor_slice(logits, (0,)) if squeeze else logits


def forward(spec: ModelSpec, params: dict[str, ad.Tensor], ids,
            pad_id: int | None = None) -> ad.Tensor:
    if spec.family == "transformer":
        return transformer_forward(params, spec.config, ids, pad_id)
    if spec.family == "lstm":
        return lstm_forward(params, spec.config, ids, pad_id)
    return dense_ssm_forward(params, spec.config, ids, pad_id)


# ---------------------------------------------------------------------------
# Flat-vector packing and checkpoints
# ---------------------------------------------------------------------------


def param_layout(params: dict[str, np.ndarray]) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, offset) triples in insertion order."""
    layout = []
    off = 0
    for name, arr in params.items():
        layout.append((name, arr.shape, off))
        off += arr.size
    return layout


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for a in params.values()])


def view_params(vector: np.ndarray, layout) -> dict[str, np.ndarray]:
    """Reshaped views into the flat vector (no copies)."""
    out = {}
    for name, shape, off in layout:
        size = int(np.prod(shape))
        out[name] = vector[off:off + size].reshape(shape)
    return out


def gather_grads(leaves: dict[str, ad.Tensor], layout) -> np.ndarray:
    """Leaf gradients packed congruently with the flat parameter vector."""
    parts = []
    for name, shape, _ in layout:
        g = leaves[name].grad
        parts.append(np.zeros(int(np.prod(shape))) if g is None else g.reshape(-1))
    return np.concatenate(parts)


def save_checkpoint(path, fingerprint: str, seed: int, step: int,
                    params: dict[str, np.ndarray]) -> None:
    """Header line (JSON) + flat little-endian float64 parameter array."""
    header = {
        "fingerprint": fingerprint,
        "seed": seed,
        "step": step,
        "layout": [(n, list(s)) for n, s, _ in param_layout(params)],
    }
    flat = flatten_params(params).astype("<f8")
    with open(path, "wb") as fh:
        blob = json.dumps(header).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode())
        flat = np.frombuffer(fh.read(), dtype="<f8")
    params = {}
    off = 0
    for name, shape in header["layout"]:
        size = int(np.prod(shape))
        params[name] = flat[off:off + size].reshape(shape).copy()
        off += size
    return header, params
