"""Masked multi-resolution transformer block.

Token maps of all steps so far are flattened and concatenated into one
sequence; a patch-wise causal mask lets each token see its own map and every
earlier (coarser) map.  Image tokens enter through unmasked cross-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .config import ModelConfig
from .numerics import ShapeError, layer_norm, matmul, resize_to, softmax

Tensor = torch.Tensor


@dataclass
class TokenMap:
    features: Tensor  # (B, C, h, w)
    step: int

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.features.shape[-2:])


@dataclass
class ImageTokens:
    features: Tensor  # (B, C, H/8, W/8)


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    heads: int

    def __post_init__(self):
        n = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (n, n):
                raise ShapeError(f"attention weights must all be ({n}, {n}), got {tuple(w.shape)}")
        if self.heads < 1 or n % self.heads:
            raise ShapeError(f"{self.heads} heads do not divide hidden size {n}")

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str, heads: int) -> "AttentionParams":
        return cls(params[f"{prefix}.w_q"], params[f"{prefix}.w_k"], params[f"{prefix}.w_v"], heads)


@dataclass(frozen=True)
class PatchCausalMask:
    allowed: Tensor  # (T, T) bool
    block_sizes: tuple[int, ...]
    # per query block: (first row, rows, key columns in use, every used pair allowed)
    spans: tuple[tuple[int, int, int, bool], ...] = ()

    @property
    def size(self) -> int:
        return self.allowed.shape[0]


@lru_cache(maxsize=64)
def _mask_cached(block_sizes: tuple[int, ...]) -> PatchCausalMask:
    step = torch.repeat_interleave(torch.arange(len(block_sizes)), torch.tensor(block_sizes))
    allowed = step[None, :] <= step[:, None]
    spans, start = [], 0
    for n in block_sizes:
        rows = allowed[start:start + n]
        cols = int(rows.any(dim=0).nonzero().max()) + 1
        spans.append((start, n, cols, bool(rows[:, :cols].all())))
        start += n
    return PatchCausalMask(allowed, block_sizes, tuple(spans))


def build_patch_causal_mask(block_sizes: Sequence[int]) -> PatchCausalMask:
    """``allowed[i, j]`` is True iff token ``j`` belongs to the same or an earlier map than token ``i``."""
    block_sizes = tuple(int(n) for n in block_sizes)
    if not block_sizes:
        raise ValueError("patch causal mask needs at least one block")
    if min(block_sizes) < 1:
        raise ValueError(f"block sizes must be positive, got {block_sizes}")
    return _mask_cached(block_sizes)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    return x.reshape(b, t, heads, c // heads).transpose(1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return x.transpose(1, 2).reshape(b, t, h * d)


# "fused" runs torch's scaled_dot_product_attention kernel; "explicit" materialises
# the logits and goes through numerics.softmax.  Both give the same function.
KERNEL = "fused"


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None,
            need_weights: bool = False) -> tuple[Tensor, Tensor | None]:
    if KERNEL == "fused" and not need_weights:
        return F.scaled_dot_product_attention(q, k, v, attn_mask=mask), None
    logits = matmul(q * (1.0 / math.sqrt(q.shape[-1])), k.transpose(-1, -2))
    weights = softmax(logits, axis=-1, mask=mask)
    return matmul(weights, v), weights


def msa_masked(tokens: Tensor, params: AttentionParams, mask: PatchCausalMask,
               return_weights: bool = False):
    """Multi-head self-attention over ``(B, T, C)`` tokens under ``mask``.

    Query rows are processed one block at a time; columns past the block's
    last allowed key are all masked, so they are never materialised.
    """
    if tokens.dim() != 3 or tokens.shape[1] != mask.size:
        raise ShapeError(f"msa_masked: sequence shape {tuple(tokens.shape)} vs mask size {mask.size}")
    q = _split_heads(matmul(tokens, params.w_q), params.heads)
    k = _split_heads(matmul(tokens, params.w_k), params.heads)
    v = _split_heads(matmul(tokens, params.w_v), params.heads)
    outs, weights = [], []
    for start, n, cols, dense in mask.spans:
        rows = None if dense else mask.allowed[start:start + n, :cols]
        out, w = _attend(q[:, :, start:start + n], k[:, :, :cols], v[:, :, :cols], rows, return_weights)
        outs.append(out)
        if return_weights:
            weights.append(F.pad(w, (0, mask.size - cols)))
    out = _merge_heads(torch.cat(outs, dim=2))
    if return_weights:
        return out, torch.cat(weights, dim=2)
    return out


def mca_condition(tokens: Tensor, image: Tensor, params: AttentionParams) -> Tensor:
    """Unmasked cross-attention: queries from ``tokens`` (B, T, C), keys/values from ``image`` (B, S, C)."""
    if tokens.dim() != 3 or image.dim() != 3:
        raise ShapeError(f"mca_condition: expected (B, T, C) inputs, got {tuple(tokens.shape)}, {tuple(image.shape)}")
    c = params.w_q.shape[0]
    if tokens.shape[-1] != c or image.shape[-1] != c:
        raise ShapeError(f"mca_condition: channels {tokens.shape[-1]}/{image.shape[-1]} vs projection size {c}")
    if tokens.shape[0] != image.shape[0]:
        raise ShapeError("mca_condition: batch sizes differ")
    q = _split_heads(matmul(tokens, params.w_q), params.heads)
    k = _split_heads(matmul(image, params.w_k), params.heads)
    v = _split_heads(matmul(image, params.w_v), params.heads)
    out, _ = _attend(q, k, v, None)
    return _merge_heads(out)


def _flatten(x: Tensor) -> Tensor:
    return x.flatten(2).transpose(1, 2)


def block_prefix(cfg: ModelConfig, k: int) -> str:
    return "blocks" if cfg.share_blocks else f"blocks.step{k}"


def step_inputs(prefix: Sequence[TokenMap], params: Mapping[str, Tensor], cfg: ModelConfig,
                batch: int) -> list[Tensor]:
    """Input maps ``y_1..y_k``: the learned start map, then each ``r_{j-1}`` upsampled to step j."""
    steps = cfg.schedule.steps
    k = len(prefix) + 1
    if k > len(steps):
        raise ShapeError(f"schedule has {len(steps)} steps, asked for step {k}")
    start = params["start"][None].expand(batch, -1, -1, -1)
    ys = [start + params["pos.1"]]
    for j, r in enumerate(prefix, start=2):
        if r.resolution != steps[j - 2]:
            raise ShapeError(f"token map {r.step} has resolution {r.resolution}, schedule says {steps[j - 2]}")
        ys.append(resize_to(r.features, steps[j - 1]) + params[f"pos.{j}"])
    return ys


def dar_block_forward(prefix: Sequence[TokenMap], image: ImageTokens, params: Mapping[str, Tensor],
                      cfg: ModelConfig, inputs: Sequence[Tensor] | None = None) -> TokenMap:
    """Logits token map ``y_out^k`` for step ``k = len(prefix) + 1``.

    ``inputs`` bypasses the construction of ``y_1..y_k`` from ``prefix`` and
    may hold more maps than ``k`` (later ones are ignored by the mask); tests
    use this to perturb hypothetical future maps.
    """
    b = image.features.shape[0]
    k = len(prefix) + 1
    ys = list(inputs) if inputs is not None else step_inputs(prefix, params, cfg, b)
    h_k, w_k = ys[k - 1].shape[-2:]
    if (h_k, w_k) != cfg.schedule.steps[k - 1]:
        raise ShapeError(f"step {k} input has resolution {(h_k, w_k)}, schedule says {cfg.schedule.steps[k - 1]}")
    sizes = [y.shape[-2] * y.shape[-1] for y in ys]
    mask = build_patch_causal_mask(sizes)
    x = torch.cat([_flatten(y) for y in ys], dim=1)
    img = _flatten(image.features + params["image_pos"])

    pre = block_prefix(cfg, k)
    eps = cfg.ln_eps
    for layer in range(cfg.layers):
        p = f"{pre}.{layer}"
        msa = AttentionParams.from_params(params, f"{p}.msa", cfg.heads)
        mca = AttentionParams.from_params(params, f"{p}.mca", cfg.heads)
        x = x + msa_masked(layer_norm(x, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"], eps), msa, mask)
        x = x + mca_condition(layer_norm(x, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"], eps), img, mca)
    x = layer_norm(x, params[f"{pre}.ln_out.gamma"], params[f"{pre}.ln_out.beta"], eps)

    start = sum(sizes[:k - 1])
    out = x[:, start:start + sizes[k - 1]]
    return TokenMap(out.transpose(1, 2).reshape(b, cfg.hidden, h_k, w_k), step=k)
