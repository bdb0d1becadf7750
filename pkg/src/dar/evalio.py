"""Depth metrics, 16-bit depth image IO and a seeded synthetic scene generator."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .mtbin import DepthMap, DepthRangeConfig

METRIC_FIELDS = ("abs_rel", "rmse", "sq_rel", "log10", "rmse_log", "delta1", "delta2", "delta3", "n_valid")


@dataclass(frozen=True)
class MetricReport:
    abs_rel: float
    rmse: float
    sq_rel: float
    log10: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int

    def as_row(self) -> list[str]:
        return [f"{v:.9g}" if isinstance(v, float) else str(v) for v in astuple(self)]


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def compute_metrics(pred: DepthMap, gt: DepthMap) -> MetricReport:
    """Standard depth metrics over pixels valid in both maps.

    The delta accuracies count pixels with ``max(p/g, g/p) < 1.25**i`` (strict).
    """
    p, g = _np(pred.depth).astype(np.float64), _np(gt.depth).astype(np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    mask = _np(pred.valid).astype(bool) & _np(gt.valid).astype(bool)
    if not mask.any():
        raise ValueError("compute_metrics: no jointly valid pixel")
    p, g = p[mask], g[mask]
    if (p <= 0).any() or (g <= 0).any():
        raise ValueError("compute_metrics: depths must be positive on valid pixels")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        sq_rel=float(np.mean(diff ** 2 / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_valid=int(mask.sum()),
    )


def write_metrics_csv(path, reports: Iterable[MetricReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in reports:
            w.writerow(r.as_row())


def read_metrics_csv(path) -> list[MetricReport]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for row in rows:
        vals = {k.name: (int(row[k.name]) if k.name == "n_valid" else float(row[k.name])) for k in fields(MetricReport)}
        out.append(MetricReport(**vals))
    return out


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    """Pixel-weighted average of per-image reports (the RMSE terms are pooled before the root)."""
    n = np.array([r.n_valid for r in reports], dtype=np.float64)
    w = n / n.sum()

    def avg(name):
        return float(np.sum(w * np.array([getattr(r, name) for r in reports])))

    return MetricReport(
        abs_rel=avg("abs_rel"),
        rmse=float(np.sqrt(np.sum(w * np.array([r.rmse ** 2 for r in reports])))),
        sq_rel=avg("sq_rel"),
        log10=avg("log10"),
        rmse_log=float(np.sqrt(np.sum(w * np.array([r.rmse_log ** 2 for r in reports])))),
        delta1=avg("delta1"),
        delta2=avg("delta2"),
        delta3=avg("delta3"),
        n_valid=int(n.sum()),
    )


# ---------------------------------------------------------------------------
# 16-bit depth images


def write_depth_image(depth_map: DepthMap, path, scale: float = 256.0) -> None:
    """Store ``round(depth * scale)`` as a 16-bit grayscale PNG; invalid pixels become 0."""
    d = _np(depth_map.depth).astype(np.float64)
    valid = _np(depth_map.valid).astype(bool)
    if d.ndim != 2:
        raise ValueError(f"write_depth_image: expected a 2-D map, got shape {d.shape}")
    stored = np.where(valid, np.rint(d * scale), 0.0)
    if (stored < 0).any():
        raise ValueError("write_depth_image: negative depth on a valid pixel")
    if (stored > 65535).any():
        raise OverflowError(
            f"write_depth_image: depth {d[valid].max():g} m exceeds the maximum representable "
            f"{65535 / scale:g} m at scale {scale:g}")
    Image.fromarray(stored.astype(np.uint16)).save(path, format="PNG")


def read_depth_raw(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L"):
            raise ValueError(f"read_depth_image: {path} is mode {im.mode!r}, expected 16-bit single channel")
        return np.array(im, dtype=np.uint16)


def read_depth_image(path, scale: float = 256.0) -> DepthMap:
    """Inverse of ``write_depth_image``: ``depth = stored / scale``, stored 0 marks an invalid pixel."""
    raw = read_depth_raw(path)
    valid = raw != 0
    depth = raw.astype(np.float64) / scale
    return DepthMap(torch.from_numpy(depth), torch.from_numpy(valid))


def read_rgb_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def write_rgb_image(image: torch.Tensor, path) -> None:
    arr = (_np(image).transpose(1, 2, 0).clip(0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: tuple[int, int] = (64, 64)
    range: DepthRangeConfig = field(default_factory=DepthRangeConfig)
    n_primitives: int = 4
    invalid_frac: float = 0.02


def gen_synth_scene(spec: SceneSpec) -> tuple[torch.Tensor, DepthMap]:
    """Render a seeded scene: RGB ``(3, H, W)`` in [0, 1] and its depth map.

    A tilted background plane carries spheres resting on it and raised slabs,
    composited near-over-far.  Spheres meet the plane continuously; slabs
    stand off it by a few percent of the local depth.  Luminance encodes depth
    (nearer is brighter) and per-primitive hue plus seeded noise add texture
    without changing the luminance signal.  A seeded fraction of pixels is
    marked invalid.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    lo, hi = spec.range.d_min, spec.range.d_max
    span = hi - lo
    ys = (np.arange(h) + 0.5)[:, None] / h
    xs = (np.arange(w) + 0.5)[None, :] / w

    far = lo + span * rng.uniform(0.6, 0.92)
    near = lo + span * rng.uniform(0.2, 0.45)
    tilt = span * rng.uniform(-0.08, 0.08)
    depth = far + (near - far) * ys + tilt * (xs - 0.5)
    depth = np.broadcast_to(depth, (h, w)).copy()
    label = np.zeros((h, w), dtype=np.int64)

    for i in range(1, spec.n_primitives + 1):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        if rng.uniform() < 0.6:
            radius = rng.uniform(0.1, 0.22)
            rise = rng.uniform(0.15, 0.3)
            r2 = ((ys - cy) ** 2 + (xs - cx) ** 2) / radius ** 2
            inside = r2 < 1
            surf = depth * (1 - rise * np.sqrt(np.clip(1 - r2, 0, None)))
        else:
            hy, hx = rng.uniform(0.08, 0.2, size=2)
            inside = (np.abs(ys - cy) < hy) & (np.abs(xs - cx) < hx)
            surf = depth * (1 - rng.uniform(0.04, 0.1))
        closer = inside & (surf < depth)
        depth = np.where(closer, surf, depth)
        label = np.where(closer, i, label)
    depth = np.clip(depth, lo, hi)

    lum = 0.15 + 0.8 * (hi - depth) / span
    hues = rng.uniform(-1, 1, size=(spec.n_primitives + 1, 3))
    hues -= hues.mean(axis=1, keepdims=True)
    tint = hues[label].transpose(2, 0, 1)  # zero-mean over channels
    noise = rng.normal(0.0, 0.02, size=(3, h, w))
    rgb = np.clip(lum[None] * (1 + 0.25 * tint) + noise, 0.0, 1.0)

    valid = rng.uniform(size=(h, w)) >= spec.invalid_frac
    depth = np.where(valid, depth, 0.0)
    return (torch.from_numpy(rgb.astype(np.float32)),
            DepthMap(torch.from_numpy(depth), torch.from_numpy(valid)))


def scene_digest(image: torch.Tensor, depth_map: DepthMap) -> str:
    h = hashlib.sha256()
    for arr in (_np(image), _np(depth_map.depth), _np(depth_map.valid)):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def scene_batch(seeds: Sequence[int], size: tuple[int, int] = (64, 64),
                depth_range: DepthRangeConfig = DepthRangeConfig()) -> tuple[torch.Tensor, DepthMap]:
    """Stack scenes into ``(B, 3, H, W)`` images and a ``(B, H, W)`` depth map."""
    scenes = [gen_synth_scene(SceneSpec(int(s), tuple(size), depth_range)) for s in seeds]
    images = torch.stack([img for img, _ in scenes])
    depth = torch.stack([d.depth for _, d in scenes])
    valid = torch.stack([d.valid for _, d in scenes])
    return images, DepthMap(depth, valid)


def read_scene_dir(directory: Path) -> list[tuple[torch.Tensor, DepthMap]]:
    """Pairs ``<name>.png`` / ``<name>_depth.png`` from a directory, sorted by name."""
    directory = Path(directory)
    pairs = []
    for rgb_path in sorted(directory.glob("*.png")):
        if rgb_path.stem.endswith("_depth"):
            continue
        pairs.append((read_rgb_image(rgb_path), read_depth_image(directory / f"{rgb_path.stem}_depth.png")))
    return pairs
