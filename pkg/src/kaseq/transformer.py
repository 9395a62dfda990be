"""Matrix-form multi-head attention, encoder/decoder layers, and block masks.

Multi-head attention is computed as sum_i softmax(A_i / sqrt(d_k)) . V . W_i_vo
with A_i = Q W_i_q (W_i_k)^T K^T, so every projection shape is independent of
sequence length and concatenated sequences extend it natively.

The attention mask is represented as block bounds (never a dense matrix):
query block j may attend only to key block j. Attention is evaluated
blockwise, which keeps the cost linear in the number of blocks and makes
masked entries contribute exactly zero weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionMask:
    """Aligned block bounds for a concatenated sequence of independent parts."""

    q_sizes: tuple[int, ...]
    k_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.q_sizes) != len(self.k_sizes):
            raise ShapeError("attention mask needs one key block per query block")
        if not self.q_sizes:
            raise ContractError("attention mask with no blocks")
        if any(s <= 0 for s in self.q_sizes) or any(s <= 0 for s in self.k_sizes):
            raise ContractError("attention mask blocks must be non-empty")

    @classmethod
    def for_parts(cls, sizes: Sequence[int]) -> "AttentionMask":
        """Self-attention mask decoupling concatenated parts of these lengths."""
        return cls(tuple(sizes), tuple(sizes))

    @classmethod
    def uniform(cls, blocks: int, q_size: int, k_size: int) -> "AttentionMask":
        return cls((q_size,) * blocks, (k_size,) * blocks)

    @property
    def is_uniform(self) -> bool:
        return len(set(self.q_sizes)) == 1 and len(set(self.k_sizes)) == 1

    def bounds(self):
        qs = np.concatenate([[0], np.cumsum(self.q_sizes)])
        ks = np.concatenate([[0], np.cumsum(self.k_sizes)])
        return [(qs[i], qs[i + 1], ks[i], ks[i + 1]) for i in range(len(self.q_sizes))]


@dataclass
class MHAParams:
    """Per-head query/key projections and combined value-output projections."""

    wq: list[Tensor]
    wk: list[Tensor]
    wvo: list[Tensor]

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def d_model(self) -> int:
        return self.wq[0].shape[0]

    @property
    def d_k(self) -> int:
        return self.wq[0].shape[1]

    @classmethod
    def init(cls, d_model: int, heads: int, rng: np.random.Generator) -> "MHAParams":
        if d_model % heads:
            raise ConfigError(f"head count {heads} must divide d_model {d_model}")
        d_k = d_model // heads
        return cls(
            wq=[_xavier(d_model, d_k, rng) for _ in range(heads)],
            wk=[_xavier(d_model, d_k, rng) for _ in range(heads)],
            wvo=[_xavier(d_model, d_model, rng, gain=1.0 / heads) for _ in range(heads)],
        )


@dataclass
class EncoderLayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: MHAParams
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def init(cls, d_model, heads, ffn_dim, rng):
        return cls(
            ln1_g=_ones_row(d_model), ln1_b=_zeros_row(d_model),
            attn=MHAParams.init(d_model, heads, rng),
            ln2_g=_ones_row(d_model), ln2_b=_zeros_row(d_model),
            mlp_w1=_xavier(d_model, ffn_dim, rng), mlp_b1=_zeros_row(ffn_dim),
            mlp_w2=_xavier(ffn_dim, d_model, rng), mlp_b2=_zeros_row(d_model),
        )


@dataclass
class DecoderLayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    self_attn: MHAParams
    ln2_g: Tensor
    ln2_b: Tensor
    cross_attn: MHAParams
    ln3_g: Tensor
    ln3_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def init(cls, d_model, heads, ffn_dim, rng):
        return cls(
            ln1_g=_ones_row(d_model), ln1_b=_zeros_row(d_model),
            self_attn=MHAParams.init(d_model, heads, rng),
            ln2_g=_ones_row(d_model), ln2_b=_zeros_row(d_model),
            cross_attn=MHAParams.init(d_model, heads, rng),
            ln3_g=_ones_row(d_model), ln3_b=_zeros_row(d_model),
            mlp_w1=_xavier(d_model, ffn_dim, rng), mlp_b1=_zeros_row(ffn_dim),
            mlp_w2=_xavier(ffn_dim, d_model, rng), mlp_b2=_zeros_row(d_model),
        )


@dataclass
class TransformerParams:
    encoder: list[EncoderLayerParams] = field(default_factory=list)
    decoder: list[DecoderLayerParams] = field(default_factory=list)
    final_ln_g: Optional[Tensor] = None
    final_ln_b: Optional[Tensor] = None

    @classmethod
    def init(cls, d_model, heads, enc_layers, dec_layers, ffn_dim, rng):
        return cls(
            encoder=[EncoderLayerParams.init(d_model, heads, ffn_dim, rng)
                     for _ in range(enc_layers)],
            decoder=[DecoderLayerParams.init(d_model, heads, ffn_dim, rng)
                     for _ in range(dec_layers)],
            final_ln_g=_ones_row(d_model),
            final_ln_b=_zeros_row(d_model),
        )


def _xavier(fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 1.0) -> Tensor:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def _zeros_row(d: int) -> Tensor:
    return Tensor(np.zeros((1, d)), requires_grad=True)


def _ones_row(d: int) -> Tensor:
    return Tensor(np.ones((1, d)), requires_grad=True)


# ---------------------------------------------------------------------------
# attention


def mha(q: Tensor, k: Tensor, v: Tensor,
        p: MHAParams, mask: Optional[AttentionMask] = None) -> Tensor:
    """Multi-head attention in matrix form over optional aligned blocks."""
    if q.shape[1] != p.d_model or k.shape[1] != p.d_model or v.shape[1] != p.d_model:
        raise ShapeError("mha inputs must have width d_model")
    if k.shape[0] != v.shape[0]:
        raise ShapeError("keys and values must have equal length")
    if mask is None:
        mask = AttentionMask((q.shape[0],), (k.shape[0],))
    if sum(mask.q_sizes) != q.shape[0] or sum(mask.k_sizes) != k.shape[0]:
        raise ShapeError("attention mask blocks do not tile the sequences")
    inv_sqrt_dk = 1.0 / np.sqrt(p.d_k)

    if mask.is_uniform:
        qb, kb = mask.q_sizes[0], mask.k_sizes[0]
        out = None
        for i in range(p.heads):
            qi = T.matmul(q, p.wq[i])
            ki = T.matmul(k, p.wk[i])
            scores = T.scale(T.block_scores(qi, ki, qb, kb), inv_sqrt_dk)
            attn = T.softmax_rows(scores)
            mixed = T.matmul(T.block_mix(attn, v, qb, kb), p.wvo[i])
            out = mixed if out is None else T.add(out, mixed)
        return out

    # Ragged blocks: evaluate each span independently and re-concatenate.
    pieces = []
    for qs, qe, ks, ke in mask.bounds():
        qi_part = T.slice_rows(q, qs, qe)
        ki_part = T.slice_rows(k, ks, ke)
        vi_part = T.slice_rows(v, ks, ke)
        part_out = None
        for i in range(p.heads):
            qi = T.matmul(qi_part, p.wq[i])
            ki = T.matmul(ki_part, p.wk[i])
            scores = T.scale(T.matmul(qi, T.transpose(ki)), inv_sqrt_dk)
            attn = T.softmax_rows(scores)
            mixed = T.matmul(T.matmul(attn, vi_part), p.wvo[i])
            part_out = mixed if part_out is None else T.add(part_out, mixed)
        pieces.append(part_out)
    return pieces[0] if len(pieces) == 1 else T.concat_rows(pieces)


def masked_self_attention(parts: Sequence[Tensor], p: MHAParams) -> list[Tensor]:
    """Run one self-attention over concatenated parts with flow cut between them."""
    if not parts:
        raise ContractError("masked_self_attention needs at least one part")
    widths = {part.shape[1] for part in parts}
    if len(widths) != 1:
        raise ShapeError("all parts must share d_model")
    x = parts[0] if len(parts) == 1 else T.concat_rows(list(parts))
    mask = AttentionMask.for_parts([part.shape[0] for part in parts])
    y = mha(x, x, x, p, mask)
    outs = []
    start = 0
    for part in parts:
        outs.append(T.slice_rows(y, start, start + part.shape[0]))
        start += part.shape[0]
    return outs


# ---------------------------------------------------------------------------
# layers


def _mlp(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return T.add(T.matmul(T.relu(T.add(T.matmul(x, w1), b1)), w2), b2)


def encoder_forward(x: Tensor, layers: Sequence[EncoderLayerParams],
                    mask: Optional[AttentionMask] = None,
                    pos: Optional[np.ndarray] = None) -> list[Tensor]:
    """Pre-norm encoder; returns every layer output (the supervision points).

    Positional encodings, when given, are added to queries and keys only, at
    every layer. An empty layer stack returns an empty list (the input itself
    is the degenerate encoding).
    """
    pos_t = Tensor(pos) if pos is not None else None
    if pos_t is not None and pos_t.shape != x.shape:
        raise ShapeError("positional encodings must match the token sequence shape")
    outputs = []
    for layer in layers:
        u = T.layer_norm_rows(x, layer.ln1_g, layer.ln1_b)
        qk = T.add(u, pos_t) if pos_t is not None else u
        x = T.add(x, mha(qk, qk, u, layer.attn, mask))
        u2 = T.layer_norm_rows(x, layer.ln2_g, layer.ln2_b)
        x = T.add(x, _mlp(u2, layer.mlp_w1, layer.mlp_b1, layer.mlp_w2, layer.mlp_b2))
        outputs.append(x)
    return outputs


def decoder_forward(memory: Tensor, queries: Tensor, params: TransformerParams,
                    self_mask: Optional[AttentionMask] = None,
                    cross_mask: Optional[AttentionMask] = None) -> Tensor:
    """Pre-norm decoder over learned query tokens; cross-attention is
    mha(targets, memory, memory), so the memory length is unconstrained."""
    x = queries
    for layer in params.decoder:
        u = T.layer_norm_rows(x, layer.ln1_g, layer.ln1_b)
        x = T.add(x, mha(u, u, u, layer.self_attn, self_mask))
        u = T.layer_norm_rows(x, layer.ln2_g, layer.ln2_b)
        x = T.add(x, mha(u, memory, memory, layer.cross_attn, cross_mask))
        u = T.layer_norm_rows(x, layer.ln3_g, layer.ln3_b)
        x = T.add(x, _mlp(u, layer.mlp_w1, layer.mlp_b1, layer.mlp_w2, layer.mlp_b2))
    if params.final_ln_g is not None:
        x = T.layer_norm_rows(x, params.final_ln_g, params.final_ln_b)
    return x


def positional_encoding(grid_h: int, grid_w: int, d_model: int) -> np.ndarray:
    """Fixed 2D sinusoidal encodings, one row per grid cell in row-major order."""
    if d_model % 4:
        raise ConfigError(f"d_model {d_model} must be divisible by 4")
    quarter = d_model // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    xs = xs.reshape(-1, 1) * freqs  # (n, quarter)
    ys = ys.reshape(-1, 1) * freqs
    enc = np.empty((grid_h * grid_w, d_model))
    enc[:, 0:2 * quarter:2] = np.sin(xs)
    enc[:, 1:2 * quarter:2] = np.cos(xs)
    enc[:, 2 * quarter::2] = np.sin(ys)
    enc[:, 2 * quarter + 1::2] = np.cos(ys)
    return enc
