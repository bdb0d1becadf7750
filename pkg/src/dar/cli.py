"""Command-line entry point: ``python -m dar {train,eval,infer,gradcheck,bins-trace}``.

Settings come from an optional YAML file (``--config``) followed by
``--key value`` overrides; the resolved ``RunConfig`` is written to the run
directory.  Exit codes: 0 success, 1 invalid input or configuration, 2
runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import typing
from dataclasses import dataclass, fields
from pathlib import Path

import torch
import yaml

from .config import ModelConfig, StepSchedule, TrainConfig, preset
from .evalio import (MetricReport, mean_report, read_rgb_image, read_scene_dir,
                     scene_batch, write_depth_image, write_metrics_csv)
from .experiments import HELD_OUT_BASE
from .mtbin import DepthMap, DepthRangeConfig, expanded_range, format_trace_line, transport_bins
from .numerics import NonFiniteError, finite_diff_check_params, set_precision
from .pipeline import (CheckpointError, evaluate, fit, forward_all_steps, init_params, load_checkpoint,
                       model_loss, predict, save_checkpoint)

COMMANDS = ("train", "eval", "infer", "gradcheck", "bins-trace")


class UsageError(ValueError):
    """Invalid configuration or input; maps to exit code 1."""


@dataclass
class RunConfig:
    # model
    preset: str = "test"
    hidden: int | None = None
    heads: int | None = None
    layers: int | None = None
    image_size: list[int] = dataclasses.field(default_factory=lambda: [64, 64])
    schedule: list[list[int]] | None = None  # default: 4x4 doubling up to the image size
    n_bins: int = 16
    d_min: float = 0.1
    d_max: float = 10.0
    share_blocks: bool = True
    carry_state: bool = False
    precision: str = "float32"
    # training
    seed: int = 0
    iters: int = 500
    batch_size: int = 1
    lr_init: float = 3e-5
    lr_peak: float = 5e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    # data: synthetic seeds unless scene_dir is set
    n_train: int = 16
    n_test: int = 8
    train_seeds: list[int] | None = None
    eval_seeds: list[int] | None = None
    scene_dir: str | None = None
    # paths
    out_dir: str = "runs/latest"
    checkpoint: str | None = None  # default: <out_dir>/checkpoint.bin
    image: str | None = None
    output: str | None = None
    pixel: list[int] | None = None
    # gradcheck
    grad_size: int = 16
    grad_steps: int = 3
    tol: float = 1e-4
    corrupt: float = 1.0

    def model_config(self) -> ModelConfig:
        h, w = self.image_size
        if self.schedule is None:
            first = 4
            steps = []
            while first <= min(h, w) and len(steps) < 5:
                steps.append((first, first))
                first *= 2
        else:
            steps = [tuple(s) for s in self.schedule]
        overrides = {k: getattr(self, k) for k in ("hidden", "heads", "layers") if getattr(self, k) is not None}
        return preset(
            self.preset, image_size=(h, w), schedule=StepSchedule(tuple(steps), self.n_bins),
            depth_range=DepthRangeConfig(self.d_min, self.d_max, self.n_bins),
            share_blocks=self.share_blocks, carry_state=self.carry_state, **overrides)

    def train_config(self) -> TrainConfig:
        return TrainConfig(iters=self.iters, batch_size=self.batch_size, lr_init=self.lr_init,
                           lr_peak=self.lr_peak, warmup_frac=self.warmup_frac,
                           weight_decay=self.weight_decay, grad_clip=self.grad_clip, seed=self.seed)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "checkpoint.bin"

    def to_yaml(self) -> str:
        return yaml.safe_dump(dataclasses.asdict(self), sort_keys=True)


_HINTS = typing.get_type_hints(RunConfig)


def _coerce(name: str, value):
    # YAML 1.1 reads "1e-3" as a string; numbers follow the field's declared type
    hint = _HINTS[name]
    if value is None or not isinstance(value, (str, int)) or isinstance(value, bool):
        return value
    if float in typing.get_args(hint) or hint is float:
        return float(value)
    if hint is int and isinstance(value, str):
        return int(value)
    return value


def resolve_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    """Merge the YAML file and ``--key value`` pairs into a validated ``RunConfig``."""
    known = {f.name for f in fields(RunConfig)}
    values: dict = {}
    if config_path:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise UsageError(f"cannot read config {config_path}: {e}") from e
        if not isinstance(loaded, dict):
            raise UsageError(f"config {config_path} must be a mapping")
        values.update(loaded)
    if len(overrides) % 2:
        raise UsageError(f"override {overrides[-1]!r} has no value")
    for flag, raw in zip(overrides[::2], overrides[1::2]):
        if not flag.startswith("--"):
            raise UsageError(f"expected --key, got {flag!r}")
        values[flag[2:].replace("-", "_")] = yaml.safe_load(raw)
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
        cfg.model_config()
        cfg.train_config()
        set_precision(cfg.precision)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid configuration: {e}") from e
    return cfg


# ---------------------------------------------------------------------------
# data


def _synthetic(seeds, cfg: RunConfig, mcfg: ModelConfig):
    return scene_batch(list(seeds), tuple(cfg.image_size), mcfg.depth_range)


def _train_data(cfg: RunConfig, mcfg: ModelConfig):
    seeds = cfg.train_seeds if cfg.train_seeds is not None else range(cfg.n_train)
    return _synthetic(seeds, cfg, mcfg)


def _eval_data(cfg: RunConfig, mcfg: ModelConfig):
    if cfg.scene_dir:
        pairs = read_scene_dir(Path(cfg.scene_dir))
        if not pairs:
            raise UsageError(f"no scenes in {cfg.scene_dir}")
        try:
            return (torch.stack([img for img, _ in pairs]),
                    DepthMap(torch.stack([d.depth for _, d in pairs]), torch.stack([d.valid for _, d in pairs])))
        except RuntimeError as e:
            raise UsageError(f"scenes in {cfg.scene_dir} differ in size: {e}") from e
    seeds = cfg.eval_seeds if cfg.eval_seeds is not None else range(HELD_OUT_BASE, HELD_OUT_BASE + cfg.n_test)
    return _synthetic(seeds, cfg, mcfg)


def _load_model(cfg: RunConfig, mcfg: ModelConfig):
    path = cfg.checkpoint_path
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    try:
        params, _ = load_checkpoint(path, mcfg)
    except CheckpointError as e:
        raise UsageError(str(e)) from e
    expected = set(init_params(mcfg))
    if set(params) != expected:
        raise UsageError(f"checkpoint {path} parameters do not match the model configuration")
    return params


def _load_image(cfg: RunConfig) -> torch.Tensor:
    if not cfg.image:
        raise UsageError("--image is required")
    try:
        img = read_rgb_image(cfg.image)
    except OSError as e:
        raise UsageError(f"cannot read image {cfg.image}: {e}") from e
    if list(img.shape[-2:]) != list(cfg.image_size):
        raise UsageError(f"image {cfg.image} is {tuple(img.shape[-2:])}, model expects {tuple(cfg.image_size)}")
    return img[None]


def _write_step_metrics(out: Path, prefix: str, reports: list[list[MetricReport]]) -> MetricReport:
    steps = [mean_report([r[k] for r in reports]) for k in range(len(reports[0]))]
    write_metrics_csv(out / f"{prefix}_per_step.csv", steps)
    write_metrics_csv(out / f"{prefix}_final.csv", [steps[-1]])
    return steps[-1]


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> int:
    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    out = Path(cfg.out_dir)
    cfg = dataclasses.replace(cfg, checkpoint=str(cfg.checkpoint_path))
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfg.to_yaml())
    except OSError as e:
        raise UsageError(f"cannot write to {out}: {e}") from e
    torch.manual_seed(cfg.seed)
    images, gt = _train_data(cfg, mcfg)
    params = init_params(mcfg, seed=cfg.seed)
    with open(out / "loss.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("iter", "loss", "lr"))

        def log(it, loss, lr):
            w.writerow((it, f"{loss:.9g}", f"{lr:.9g}"))
            f.flush()

        try:
            fit(params, mcfg, tcfg, images, gt, log=log)
        except (FloatingPointError, RuntimeError) as e:
            (out / "error.log").write_text(f"{type(e).__name__}: {e}\n")
            raise
    save_checkpoint(cfg.checkpoint_path, params, mcfg)
    test_images, test_gt = _eval_data(cfg, mcfg)
    final = _write_step_metrics(out, "metrics", evaluate(params, mcfg, test_images, test_gt))
    print(f"trained {tcfg.iters} iterations; held-out rmse {final.rmse:.4f} delta1 {final.delta1:.4f}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    params = _load_model(cfg, mcfg)
    images, gt = _eval_data(cfg, mcfg)
    if list(images.shape[-2:]) != list(cfg.image_size):
        raise UsageError(f"scenes are {tuple(images.shape[-2:])}, model expects {tuple(cfg.image_size)}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = evaluate(params, mcfg, images, gt)
    final = _write_step_metrics(out, "eval", reports)
    for k in range(mcfg.schedule.K):
        r = mean_report([rs[k] for rs in reports])
        print(f"step {k + 1}: rmse {r.rmse:.4f} abs_rel {r.abs_rel:.4f} delta1 {r.delta1:.4f}")
    print(f"final: rmse {final.rmse:.4f} delta1 {final.delta1:.4f}")
    return 0


def cmd_infer(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    params = _load_model(cfg, mcfg)
    image = _load_image(cfg)
    depth = predict(image, params, mcfg)[0].to(torch.float64)
    target = Path(cfg.output) if cfg.output else Path(cfg.out_dir) / "depth.png"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_depth_image(DepthMap(depth, torch.ones_like(depth, dtype=torch.bool)), target)
    print(f"wrote {target}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    set_precision("float64")
    size = cfg.grad_size
    mcfg = dataclasses.replace(
        cfg.model_config(), image_size=(size, size),
        schedule=StepSchedule.doubling(max(size >> (cfg.grad_steps - 1), 1), cfg.grad_steps, cfg.n_bins))
    params = init_params(mcfg, seed=cfg.seed)
    image, gt = scene_batch([cfg.seed], (size, size), mcfg.depth_range)
    report = finite_diff_check_params(lambda: model_loss(image, gt, params, mcfg), params,
                                      tol=cfg.tol, seed=cfg.seed, corrupt=cfg.corrupt)
    print(report)
    return 0 if report.passed else 2


def cmd_bins_trace(cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    if not cfg.pixel or len(cfg.pixel) != 2:
        raise UsageError("--pixel must be given as [row, col]")
    row, col = cfg.pixel
    h, w = cfg.image_size
    if not (0 <= row < h and 0 <= col < w):
        raise UsageError(f"pixel {(row, col)} outside the {h}x{w} image")
    params = _load_model(cfg, mcfg)
    image = _load_image(cfg)
    with torch.no_grad():
        outs = forward_all_steps(image, params, mcfg)
    for k, o in enumerate(outs, start=1):
        gh, gw = mcfg.schedule.steps[k - 1]
        i, j = row * gh // h, col * gw // w
        if o.located is None:
            t, rng = 0, (mcfg.depth_range.d_min, mcfg.depth_range.d_max)
        else:
            carried = transport_bins(outs[k - 2].bins, (gh, gw))
            lo, hi = expanded_range(carried, o.located)
            t, rng = int(o.located[0, i, j]), (float(lo[0, i, j]), float(hi[0, i, j]))
        print(format_trace_line(k, t, o.bins.boundaries[0, i, j].tolist(), float(o.depth[0, i, j]), rng))
    return 0


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "gradcheck": cmd_gradcheck, "bins-trace": cmd_bins_trace}


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="dar", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="YAML file with RunConfig fields")
    args, rest = ap.parse_known_args(argv)
    try:
        cfg = resolve_config(args.config, rest)
        return HANDLERS[args.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NonFiniteError, FloatingPointError, RuntimeError) as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    finally:
        set_precision("float32")


if __name__ == "__main__":
    sys.exit(main())
