"""End-to-end model: encoder, K-step resolution/granularity loop, loss and training."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .attention import ImageTokens, TokenMap, block_prefix, dar_block_forward
from .config import LossConfig, ModelConfig, TrainConfig
from .evalio import MetricReport, compute_metrics
from .injection import ConvGruParams, conv_gru_step, project_bins
from .mtbin import (BinState, DepthMap, DepthRangeConfig, bin_centers, compose_depth, init_bins,
                    locate_bin, refine_bins, transport_bins)
from .numerics import (NonFiniteError, ShapeError, backward, conv2d_1x1, conv2d_3x3, get_dtype,
                       resize_to, softmax)

Tensor = torch.Tensor
Params = dict[str, Tensor]


# ---------------------------------------------------------------------------
# parameters


def _sincos(channels: int, h: int, w: int) -> Tensor:
    # 2-D sinusoidal pattern on normalised pixel centres, shared by all grids
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    quarter = max(channels // 4, 1)
    freqs = math.pi * torch.arange(1, quarter + 1, dtype=torch.float64)
    parts = [
        torch.sin(freqs[:, None, None] * ys[None, :, None]).expand(-1, h, w),
        torch.cos(freqs[:, None, None] * ys[None, :, None]).expand(-1, h, w),
        torch.sin(freqs[:, None, None] * xs[None, None, :]).expand(-1, h, w),
        torch.cos(freqs[:, None, None] * xs[None, None, :]).expand(-1, h, w),
    ]
    pe = torch.cat(parts, dim=0)[:channels]
    if pe.shape[0] < channels:
        pe = torch.cat([pe, torch.zeros(channels - pe.shape[0], h, w, dtype=torch.float64)])
    return 0.5 * pe


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Seeded parameter dictionary; every tensor is a leaf with ``requires_grad``."""
    gen = torch.Generator().manual_seed(seed)
    c, n = cfg.hidden, cfg.n_bins
    c1, c2 = max(c // 4, 4), max(c // 2, 4)
    p: dict[str, Tensor] = {}

    def normal(name, *shape, fan_in=None, std=None):
        std = std if std is not None else 1.0 / math.sqrt(fan_in)
        p[name] = torch.randn(*shape, generator=gen, dtype=torch.float64) * std

    def zeros(name, *shape):
        p[name] = torch.zeros(*shape, dtype=torch.float64)

    def ones(name, *shape):
        p[name] = torch.ones(*shape, dtype=torch.float64)

    normal("enc.c1.w", c1, 3, 3, 3, fan_in=27)
    zeros("enc.c1.b", c1)
    normal("enc.c2.w", c2, c1, 3, 3, fan_in=9 * c1)
    zeros("enc.c2.b", c2)
    normal("enc.c3.w", c, c2, 3, 3, fan_in=9 * c2)
    zeros("enc.c3.b", c)
    normal("enc.agg1.w", c, c1, fan_in=4 * c1)
    normal("enc.agg2.w", c, c2, fan_in=4 * c2)
    normal("enc.agg3.w", c, c, fan_in=4 * c)
    normal("enc.patch.w", c, 3 * 64, fan_in=4 * 3 * 64)
    zeros("enc.agg.b", c)

    th, tw = cfg.token_size
    p["image_pos"] = _sincos(c, th, tw)
    h1, w1 = cfg.schedule.steps[0]
    normal("start", c, h1, w1, std=0.02)
    for k, (h, w) in enumerate(cfg.schedule.steps, start=1):
        p[f"pos.{k}"] = _sincos(c, h, w)

    stacks = [block_prefix(cfg, k) for k in range(1, cfg.schedule.K + 1)]
    for pre in dict.fromkeys(stacks):
        for layer in range(cfg.layers):
            b = f"{pre}.{layer}"
            for ln in ("ln1", "ln2"):
                ones(f"{b}.{ln}.gamma", c)
                zeros(f"{b}.{ln}.beta", c)
            for att in ("msa", "mca"):
                for m in ("w_q", "w_k", "w_v"):
                    normal(f"{b}.{att}.{m}", c, c, fan_in=c * (2 if m == "w_v" else 1))
        ones(f"{pre}.ln_out.gamma", c)
        zeros(f"{pre}.ln_out.beta", c)

    normal("inject.proj.w1", c, n, 3, 3, fan_in=9 * n)
    zeros("inject.proj.b1", c)
    normal("inject.proj.w2", c, c, 3, 3, fan_in=9 * c)
    zeros("inject.proj.b2", c)
    for g in ("z", "r", "q"):
        normal(f"inject.gru.w_{g}", c, 2 * c, 3, 3, fan_in=18 * c)
        zeros(f"inject.gru.b_{g}", c)

    normal("head.w", n, c, fan_in=c)
    zeros("head.b", n)

    dtype = get_dtype()
    return {k: v.to(dtype).requires_grad_(True) for k, v in p.items()}


def param_groups(params: Mapping[str, Tensor]) -> list[str]:
    return list(params)


# ---------------------------------------------------------------------------
# forward


def encode_image(image: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> ImageTokens:
    """Toy strided-convolution encoder producing ``(B, hidden, H/8, W/8)`` image tokens.

    Features of the three stride-2 stages and an 8x8 patch embedding are each
    brought to 1/8 resolution and summed.
    """
    if image.dim() != 4 or image.shape[1] != 3:
        raise ShapeError(f"encode_image: expected (B, 3, H, W), got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % 8 or w % 8:
        raise ShapeError(f"encode_image: image extent {(h, w)} not divisible by 8")
    x = image.to(get_dtype())
    f1 = F.gelu(conv2d_3x3(x, params["enc.c1.w"], params["enc.c1.b"], stride=2))
    f2 = F.gelu(conv2d_3x3(f1, params["enc.c2.w"], params["enc.c2.b"], stride=2))
    f3 = F.gelu(conv2d_3x3(f2, params["enc.c3.w"], params["enc.c3.b"], stride=2))
    tokens = (conv2d_1x1(F.avg_pool2d(f1, 4), params["enc.agg1.w"])
              + conv2d_1x1(F.avg_pool2d(f2, 2), params["enc.agg2.w"])
              + conv2d_1x1(f3, params["enc.agg3.w"])
              + conv2d_1x1(F.pixel_unshuffle(x, 8), params["enc.patch.w"], params["enc.agg.b"]))
    return ImageTokens(tokens)


@dataclass
class StepOutput:
    token_map: TokenMap  # r_k
    bins: BinState
    depth: Tensor  # (B, h_k, w_k), composed depth at step k
    located: Tensor | None  # (B, h_k, w_k) 1-based bin of the previous step that seeded these bins

    @property
    def step(self) -> int:
        return self.token_map.step


def next_bins(prev: StepOutput | None, size: Sequence[int], batch: int, depth_range: DepthRangeConfig):
    """Bins for a step at resolution ``size``: uniform at step 1, else refined around the previous depth."""
    if prev is None:
        return init_bins(depth_range, (batch, *size)), None
    carried = transport_bins(prev.bins, size)
    d = resize_to(prev.depth.detach().to(torch.float64), size)
    t = locate_bin(carried, d)
    return refine_bins(carried, t), t


def autoregressive_step(prefix: Sequence[StepOutput], image: ImageTokens, params: Mapping[str, Tensor],
                        cfg: ModelConfig) -> StepOutput:
    """Run step ``k = len(prefix) + 1`` given the outputs of all earlier steps."""
    k = len(prefix) + 1
    if k > cfg.schedule.K:
        raise ShapeError(f"schedule exhausted: {cfg.schedule.K} steps")
    b = image.features.shape[0]
    size = cfg.schedule.steps[k - 1]
    y_out = dar_block_forward([s.token_map for s in prefix], image, params, cfg)

    bins, t = next_bins(prefix[-1] if prefix else None, size, b, cfg.depth_range)
    bins = BinState(bins.boundaries, step=k)
    centers = bin_centers(bins)
    f_bin = project_bins(centers, params, cfg.depth_range)

    hidden, context = y_out.features, f_bin
    if cfg.carry_state and prefix:
        hidden = resize_to(prefix[-1].token_map.features, size)
        context = f_bin + y_out.features
    r = conv_gru_step(hidden, context, ConvGruParams.from_params(params))

    logits = conv2d_1x1(r, params["head.w"], params["head.b"])
    probs = softmax(logits, axis=1).permute(0, 2, 3, 1)
    depth = compose_depth(centers, probs)
    return StepOutput(TokenMap(r, k), bins, depth, t)


def forward_all_steps(image: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig,
                      n_steps: int | None = None) -> list[StepOutput]:
    """Encode ``image`` (B, 3, H, W) and run the schedule; the last output is the final prediction."""
    tokens = encode_image(image, params, cfg)
    outputs: list[StepOutput] = []
    for _ in range(n_steps or cfg.schedule.K):
        outputs.append(autoregressive_step(outputs, tokens, params, cfg))
    return outputs


def predict(image: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Final depth upsampled to the image resolution, ``(B, H, W)``."""
    with torch.no_grad():
        out = forward_all_steps(image, params, cfg)
    return resize_to(out[-1].depth, image.shape[-2:])


# ---------------------------------------------------------------------------
# loss


def valid_gt_mask(gt: DepthMap, depth_range: DepthRangeConfig) -> Tensor:
    return gt.valid & (gt.depth > 0) & (gt.depth <= depth_range.d_max)


def si_log_loss(preds: Sequence[Tensor], gt: DepthMap, cfg: LossConfig = LossConfig(),
                depth_range: DepthRangeConfig = DepthRangeConfig()) -> Tensor:
    """Scaled scale-invariant log loss summed over the step predictions.

    Each prediction ``(B, h, w)`` is upsampled to the ground-truth size and
    clamped into the depth range before the log.
    """
    mask = valid_gt_mask(gt, depth_range)
    if not bool(mask.any()):
        raise ValueError("si_log_loss: ground truth has no valid pixel")
    size = gt.depth.shape[-2:]
    log_gt = torch.log(gt.depth[mask].to(get_dtype()))
    total = 0.0
    for k, pred in enumerate(preds, start=1):
        up = resize_to(pred, size)[mask]
        if bool((up.detach() <= 0).any()):
            raise ValueError(f"si_log_loss: non-positive predicted depth at step {k}")
        g = torch.log(up.clamp(depth_range.d_min, depth_range.d_max)) - log_gt
        d = (g * g).mean() - cfg.beta * g.mean() ** 2
        total = total + cfg.alpha * torch.sqrt(torch.clamp(d, min=0.0))
    return total


def model_loss(image: Tensor, gt: DepthMap, params: Mapping[str, Tensor], cfg: ModelConfig,
               loss_cfg: LossConfig = LossConfig()) -> Tensor:
    outs = forward_all_steps(image, params, cfg)
    return si_log_loss([o.depth for o in outs], gt, loss_cfg, cfg.depth_range)


# ---------------------------------------------------------------------------
# training


def lr_factor(it: int, tcfg: TrainConfig) -> float:
    """Learning-rate multiplier of ``lr_peak``: linear warmup from ``lr_init``, then linear decay to 0."""
    warm = max(1, round(tcfg.warmup_frac * tcfg.iters))
    start = tcfg.lr_init / tcfg.lr_peak if tcfg.lr_peak else 0.0
    if it < warm:
        return start + (1 - start) * it / warm
    return max(0.0, (tcfg.iters - it) / max(1, tcfg.iters - warm))


def make_optimizer(params: Mapping[str, Tensor], tcfg: TrainConfig):
    decay = [p for n, p in params.items() if p.dim() >= 2 and not n.startswith(("pos.", "start", "image_pos"))]
    no_decay = [p for n, p in params.items() if not any(p is q for q in decay)]
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": tcfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=tcfg.lr_peak, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda it: lr_factor(it, tcfg))
    return opt, sched


def train_step(batch: tuple[Tensor, DepthMap], params: Mapping[str, Tensor], opt, sched,
               cfg: ModelConfig, loss_cfg: LossConfig = LossConfig(), grad_clip: float | None = None) -> float:
    """One optimizer step on ``batch = (images, gt)``; returns the loss before the update."""
    images, gt = batch
    if images.shape[0] == 0:
        raise ValueError("train_step: empty batch")
    for p in params.values():
        p.grad = None
    loss = model_loss(images, gt, params, cfg, loss_cfg)
    if not math.isfinite(loss.item()):
        raise NonFiniteError(f"train_step: loss is {loss.item()} (lr {sched.get_last_lr()[0]:.3g})")
    backward(loss)
    for name, p in params.items():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteError(f"train_step: non-finite gradient in {name}")
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(list(params.values()), grad_clip)
    opt.step()
    sched.step()
    return loss.item()


def fit(params: Mapping[str, Tensor], cfg: ModelConfig, tcfg: TrainConfig, images: Tensor, gt: DepthMap,
        loss_cfg: LossConfig = LossConfig(), log=None) -> list[float]:
    """Train on ``images``/``gt`` for ``tcfg.iters`` steps with seeded reshuffling every epoch.

    ``log(it, loss, lr)`` is called after each step.
    """
    opt, sched = make_optimizer(params, tcfg)
    gen = torch.Generator().manual_seed(tcfg.seed)
    n, bs = images.shape[0], min(tcfg.batch_size, images.shape[0])
    order: list[int] = []
    losses = []
    for it in range(tcfg.iters):
        if len(order) < bs:
            order += torch.randperm(n, generator=gen).tolist()
        idx, order = order[:bs], order[bs:]
        lr = sched.get_last_lr()[0]
        batch = (images[idx], DepthMap(gt.depth[idx], gt.valid[idx]))
        losses.append(train_step(batch, params, opt, sched, cfg, loss_cfg, tcfg.grad_clip))
        if log is not None:
            log(it, losses[-1], lr)
    return losses


def evaluate(params: Mapping[str, Tensor], cfg: ModelConfig, images: Tensor, gt: DepthMap,
             batch_size: int = 8) -> list[list[MetricReport]]:
    """Per-scene, per-step metric reports; every step's map is upsampled to the ground-truth size."""
    reports = []
    with torch.no_grad():
        for s in range(0, images.shape[0], batch_size):
            outs = forward_all_steps(images[s:s + batch_size], params, cfg)
            for b in range(outs[0].depth.shape[0]):
                g = DepthMap(gt.depth[s + b], gt.valid[s + b])
                reports.append([
                    compute_metrics(DepthMap(resize_to(o.depth[b], g.depth.shape).to(torch.float64), g.valid), g)
                    for o in outs])
    return reports


# ---------------------------------------------------------------------------
# checkpoint file
#
#   magic b"DARCKPT\0" | version u32 | config digest (32 bytes) | count u32
#   per blob: name length u32 | utf-8 name | rank u32 | extents u32 * rank | float32 LE data
# all integers little-endian.

CKPT_MAGIC = b"DARCKPT\0"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, Tensor], cfg: ModelConfig) -> None:
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), cfg.digest(), struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode()
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[Params, bytes]:
    """Read a checkpoint; returns ``(params, digest)``.

    With ``cfg`` given, the stored digest must match ``cfg.digest()``.
    Tensors come back as float32 leaves with ``requires_grad``.
    """
    data = Path(path).read_bytes()
    if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:len(CKPT_MAGIC)]!r}")
    pos = len(CKPT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    version = u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = take(32)
    if cfg is not None and digest != cfg.digest():
        raise CheckpointError(f"{path}: config digest {digest.hex()[:16]} does not match {cfg.digest().hex()[:16]}")
    params: Params = {}
    for _ in range(u32()):
        name = take(u32()).decode()
        shape = [u32() for _ in range(u32())]
        count = math.prod(shape)
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        params[name] = torch.from_numpy(arr.astype(np.float32)).requires_grad_(True)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return params, digest
