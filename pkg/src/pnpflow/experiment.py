"""Config-driven restoration experiments, manifests and hyper-parameter search."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import resource
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .domain import (
    DirichletUniformLatent,
    EmpiricalTarget,
    GaussianMixtureTarget,
    IsotropicGaussianLatent,
    IsotropicGaussianTarget,
    RngState,
    sample_target,
)
from .flows import GaussIndepField, GaussOtField, GmmIndepField, VelocityField
from .inverse import (
    ConvBlur,
    Downsample,
    GaussianL2,
    GaussianNoise,
    Identity,
    LaplaceL1,
    LaplaceNoise,
    MaskBox,
    MaskRandom,
    degrade,
    gaussian_kernel,
)
from .metrics import mse, psnr, ssim
from .solver import (
    GeometricSchedule,
    SolveConfig,
    UniformSchedule,
    blind_deblur_solve,
    pnp_flow_solve,
)
from .training import load_params

log = logging.getLogger(__name__)

TASKS = ("denoise", "deblur", "superres", "inpaint_box", "inpaint_random", "blind_deblur")
ALPHA_GRID = (0.01, 0.1, 0.3, 0.5, 0.8, 1.0)
STEPS_GRID = (100, 200, 500)


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


@dataclass
class DataConfig:
    kind: str = "gaussian"  # gaussian | gmm_images | directory
    mean: list = field(default_factory=lambda: [7.0, 7.0])
    scale: float = 0.5
    n_points: int = 1000
    image_size: int = 16
    channels: int = 1
    n_templates: int = 4
    template_scale: float = 0.05
    data_seed: int = 1234
    directory: str = ""


@dataclass
class OperatorConfig:
    noise: str = "gaussian"  # gaussian | laplace
    sigma: float = 1.5
    laplace_scale: float = 0.1
    kernel_size: int = 5
    blur_sigma: float = 1.0
    mask_size: int = 6
    mask_rate: float = 0.7
    mask_seed: int = 0
    factor: int = 2
    fidelity: str = "l2"  # l2 | l1
    weighted: bool = False


@dataclass
class ModelConfig:
    kind: str = "gauss_indep"  # gauss_indep | gauss_ot | gmm_indep | mlp
    path: str = ""
    latent: str = "gaussian"  # gaussian | dirichlet


@dataclass
class SolverSettings:
    schedule: str = "uniform"  # uniform | geometric
    steps: int = 100
    include_endpoint: bool = False
    q: float = 0.9
    alpha: float = 0.5
    n_avg: int = 5
    gamma: Optional[float] = None
    init: str = "adjoint"
    clip_noise: Optional[float] = None
    kernel_lr: float = 0.01


@dataclass
class TrainSettings:
    batch_size: int = 128
    steps: int = 2000
    steps_per_epoch: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    coupling: str = "independent"  # independent | minibatch_ot
    hidden: list = field(default_factory=lambda: [256.0, 256.0])


@dataclass
class ExperimentConfig:
    task: str = "denoise"
    seed: int = 0
    n_items: int = 1
    n_validation: int = 1
    out: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    solver: SolverSettings = field(default_factory=SolverSettings)
    train: TrainSettings = field(default_factory=TrainSettings)

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.n_items < 1:
            raise ConfigError("n_items must be >= 1")
        if self.data.kind not in ("gaussian", "gmm_images", "directory"):
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        if self.data.kind == "gaussian" and self.task != "denoise":
            raise ConfigError("point datasets only support the denoise task")
        if self.data.kind == "directory" and not Path(self.data.directory).is_dir():
            raise ConfigError(f"data directory {self.data.directory!r} does not exist")
        if self.model.kind == "mlp" and not Path(self.model.path).is_file():
            raise ConfigError(f"model file {self.model.path!r} does not exist")
        if self.model.kind not in ("gauss_indep", "gauss_ot", "gmm_indep", "mlp"):
            raise ConfigError(f"unknown model kind {self.model.kind!r}")
        op = self.operator
        if op.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if op.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.task == "superres" and self.data.image_size % op.factor:
            raise ConfigError("factor must divide the image size")
        if self.task == "inpaint_box" and op.mask_size > self.data.image_size:
            raise ConfigError("mask_size exceeds the image size")
        s = self.solver
        if s.schedule not in ("uniform", "geometric"):
            raise ConfigError(f"unknown schedule {s.schedule!r}")
        if not 0 < s.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if s.n_avg < 1 or s.steps < 1:
            raise ConfigError("steps and n_avg must be >= 1")


SECTIONS = ("data", "operator", "model", "solver", "train")


def _convert(value: str, hint):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        if value.strip().lower() in ("", "none"):
            return None
        inner = [a for a in typing.get_args(hint) if a is not type(None)][0]
        return _convert(value, inner)
    if hint is bool:
        low = value.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    if hint is list or origin is list:
        return [float(v) for v in value.split(",") if v.strip()]
    try:
        return hint(value.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r} as {hint.__name__}") from exc


def _apply(obj, key: str, value: str):
    hints = typing.get_type_hints(type(obj))
    if key not in hints or key in SECTIONS:
        raise ConfigError(f"unknown config key {key!r} for [{type(obj).__name__}]")
    setattr(obj, key, _convert(value, hints[key]))


def set_option(config: ExperimentConfig, dotted: str, value: str):
    """Apply an override such as ``operator.sigma=0.2`` or ``seed=3``."""
    section, _, key = dotted.rpartition(".")
    if section in ("", "experiment"):
        _apply(config, key, value)
    elif section in SECTIONS:
        _apply(getattr(config, section), key, value)
    else:
        raise ConfigError(f"unknown config section {section!r}")


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    config = ExperimentConfig()
    for section in parser.sections():
        if section != "experiment" and section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            set_option(config, f"{section}.{key}", value)
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text())


def _fmt(value) -> str:
    if isinstance(value, list):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "none" if value is None else str(value)


def config_to_text(config: ExperimentConfig) -> str:
    """Canonical INI text; equal configs give equal text."""
    lines = ["[experiment]"]
    for f in dataclasses.fields(config):
        if f.name not in SECTIONS:
            lines.append(f"{f.name} = {_fmt(getattr(config, f.name))}")
    for section in SECTIONS:
        lines += ["", f"[{section}]"]
        sub = getattr(config, section)
        lines += [f"{f.name} = {_fmt(getattr(sub, f.name))}" for f in dataclasses.fields(sub)]
    return "\n".join(lines) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_text(config).encode()).hexdigest()


# --------------------------------------------------------------------------
# Datasets, operators, models
# --------------------------------------------------------------------------


def synthetic_templates(cfg: DataConfig) -> np.ndarray:
    """Smooth blob images in roughly [-0.8, 0.8], fixed by ``data_seed``."""
    rng = RngState(cfg.data_seed)
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    out = np.empty((cfg.n_templates, cfg.channels, n, n))
    for k in range(cfg.n_templates):
        r = rng.fork(k)
        img = np.zeros((cfg.channels, n, n))
        for _ in range(4):
            cy, cx = r.uniform(2)
            width = 0.08 + 0.2 * r.uniform()
            amp = r.uniform(cfg.channels, -1.0, 1.0)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            img += amp[:, None, None] * blob
        out[k] = 0.8 * img / max(np.abs(img).max(), 1e-12)
    return out


def load_directory(directory) -> np.ndarray:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix in (".pgm", ".ppm"))
    if not files:
        raise ConfigError(f"no .pgm/.ppm images in {directory}")
    imgs = [io.read_netpbm(p) for p in files]
    imgs = [im[None] if im.ndim == 2 else im for im in imgs]
    if len({im.shape for im in imgs}) != 1:
        raise ConfigError("all images in the dataset directory must share one shape")
    return np.stack(imgs)


def build_target(cfg: DataConfig):
    if cfg.kind == "gaussian":
        return IsotropicGaussianTarget(np.array(cfg.mean), cfg.scale)
    if cfg.kind == "gmm_images":
        t = synthetic_templates(cfg)
        k = t.shape[0]
        return GaussianMixtureTarget(np.full(k, 1.0 / k), t.reshape(k, -1),
                                     np.full(k, cfg.template_scale))
    return EmpiricalTarget(load_directory(cfg.directory))


def item_shape(cfg: DataConfig, target) -> tuple:
    if cfg.kind == "gaussian":
        return (cfg.n_points, target.dim)
    if cfg.kind == "gmm_images":
        return (cfg.channels, cfg.image_size, cfg.image_size)
    return load_directory(cfg.directory).shape[1:]


def draw_items(config: ExperimentConfig, target, split: str, n: int) -> list[np.ndarray]:
    """Clean test (or validation) items; each item has its own stream."""
    shape = item_shape(config.data, target)
    if config.data.kind == "directory":
        data = target.data.reshape((-1,) + tuple(shape))
        start = 0 if split == "test" else data.shape[0] - n
        if start < 0 or n > data.shape[0]:
            raise ConfigError("not enough images in the dataset directory")
        return [data[start + i].copy() for i in range(n)]
    base = RngState(config.seed).fork(0 if split == "test" else 1)
    count = shape[0] if config.data.kind == "gaussian" else 1
    return [sample_target(target, count, base.fork(i)).reshape(shape) for i in range(n)]


def build_operator(config: ExperimentConfig, shape):
    op = config.operator
    hw = tuple(shape[-2:])
    if config.task == "denoise":
        return Identity()
    if config.task in ("deblur", "blind_deblur"):
        return ConvBlur(gaussian_kernel(op.kernel_size, op.blur_sigma))
    if config.task == "superres":
        return Downsample(op.factor)
    if config.task == "inpaint_box":
        return MaskBox.centered(hw, op.mask_size)
    return MaskRandom(hw, op.mask_rate, op.mask_seed)


def build_noise(config: ExperimentConfig):
    op = config.operator
    if op.noise == "gaussian":
        return GaussianNoise(op.sigma)
    if op.noise == "laplace":
        return LaplaceNoise(op.laplace_scale)
    raise ConfigError(f"unknown noise model {op.noise!r}")


def build_model(config: ExperimentConfig, target) -> VelocityField:
    kind = config.model.kind
    if kind == "mlp":
        return load_params(config.model.path)
    if kind == "gmm_indep":
        if isinstance(target, GaussianMixtureTarget):
            return GmmIndepField.from_target(target)
        if isinstance(target, IsotropicGaussianTarget):
            return GmmIndepField([1.0], target.mean[None], [target.scale])
        k = target.data.shape[0]
        return GmmIndepField(np.full(k, 1.0 / k), target.data,
                             np.full(k, config.data.template_scale))
    if isinstance(target, IsotropicGaussianTarget):
        mean, scale = target.mean, target.scale
    elif isinstance(target, GaussianMixtureTarget):
        mean = target.weights @ target.means
        scale = float(np.sqrt(np.mean((target.means - mean) ** 2) + np.mean(target.scales**2)))
    else:
        mean = target.data.mean(axis=0)
        scale = float(target.data.std())
    cls = GaussIndepField if kind == "gauss_indep" else GaussOtField
    return cls(mean, scale)


def build_latent(config: ExperimentConfig, dim: int):
    if config.model.latent == "gaussian":
        return IsotropicGaussianLatent(dim)
    if config.model.latent == "dirichlet":
        return DirichletUniformLatent(dim)
    raise ConfigError(f"unknown latent {config.model.latent!r}")


def solve_config(config: ExperimentConfig, item_seed: int) -> SolveConfig:
    s = config.solver
    if s.schedule == "uniform":
        schedule = UniformSchedule(s.steps, s.include_endpoint)
    else:
        schedule = GeometricSchedule(s.q, s.steps)
    return SolveConfig(schedule=schedule, alpha=s.alpha, n_avg=s.n_avg, seed=item_seed,
                       gamma=s.gamma, init=s.init, clip_noise=s.clip_noise)


def _degraded_view(y, x_shape, op):
    if y.shape == tuple(x_shape):
        return y
    k = op.factor
    return np.repeat(np.repeat(y, k, axis=-2), k, axis=-1)


def _item_metrics(est, ref, is_image: bool) -> dict:
    out = {"psnr": psnr(est, ref), "mse": mse(est, ref), "ssim": None}
    if is_image and min(ref.shape[-2:]) >= 11:
        out["ssim"] = ssim(est, ref)
    return out


def restore_item(config: ExperimentConfig, target, field: VelocityField, x: np.ndarray,
                 index: int, split: str = "test") -> tuple[np.ndarray, np.ndarray]:
    """Degrade one clean item and restore it; returns ``(y, x_hat)``."""
    base = RngState(config.seed).fork(2 if split == "test" else 3).fork(index)
    op = build_operator(config, x.shape)
    y = degrade(x, op, build_noise(config), base.fork(0))
    item_seed = int(base.fork(1).integers(2**63))
    scfg = solve_config(config, item_seed)
    latent = build_latent(config, field.dim)
    if config.task == "blind_deblur":
        res = blind_deblur_solve(y, field, latent, scfg, config.operator.kernel_size,
                                 config.solver.kernel_lr)
        return y, res.x
    if config.operator.fidelity == "l1":
        fid = LaplaceL1(op, y)
    else:
        fid = GaussianL2(op, y, sigma=config.operator.sigma, weighted=config.operator.weighted)
    x_hat, _ = pnp_flow_solve(scfg, fid, field, latent)
    return y, x_hat


@dataclass
class Manifest:
    config_hash: str
    seed: int
    config: dict
    items: list
    aggregate: dict
    artifacts: list

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def _aggregate(items: list) -> dict:
    agg = {}
    ok = [it for it in items if it["status"] == "ok"]
    for key in ("psnr", "ssim", "mse", "degraded_psnr", "degraded_mse"):
        vals = [it[key] for it in ok if it.get(key) is not None]
        agg[key] = float(np.mean(vals)) if vals else None
    agg["n_ok"] = len(ok)
    agg["n_failed"] = len(items) - len(ok)
    return agg


def run_experiment(config: ExperimentConfig, write: bool = True) -> Manifest:
    """Degrade, restore and score every test item; write outputs and the manifest.

    Wall-clock time and peak memory go to ``timing.json`` so that the
    manifest itself is a pure function of the configuration.
    """
    config.validate()
    started = time.perf_counter()
    target = build_target(config.data)
    field_ = build_model(config, target)
    clean = draw_items(config, target, "test", config.n_items)
    is_image = config.data.kind != "gaussian"
    out = Path(config.out)
    artifacts: list[str] = []
    if write:
        out.mkdir(parents=True, exist_ok=True)
    items = []
    for i, x in enumerate(clean):
        record = {"index": i, "status": "ok", "error": None}
        try:
            y, x_hat = restore_item(config, target, field_, x, i)
            y_view = _degraded_view(y, x.shape, build_operator(config, x.shape))
            record.update(_item_metrics(x_hat, x, is_image))
            deg = _item_metrics(y_view, x, is_image)
            record["degraded_psnr"] = deg["psnr"]
            record["degraded_mse"] = deg["mse"]
            if write:
                artifacts += _write_item(out, i, x_hat, y, is_image)
        except Exception as exc:  # one bad item must not end the run
            log.warning("item %d failed: %s", i, exc)
            record.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        items.append(record)
    manifest = Manifest(config_hash(config), config.seed, dataclasses.asdict(config),
                        items, _aggregate(items), artifacts)
    if write:
        _write_metrics_csv(out / "metrics.csv", items)
        (out / "config.ini").write_text(config_to_text(config))
        manifest.artifacts += ["metrics.csv", "config.ini", "timing.json"]
        (out / "manifest.json").write_text(manifest.to_json())
        timing = {"wall_clock_s": time.perf_counter() - started,
                  "peak_rss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss}
        (out / "timing.json").write_text(json.dumps(timing, indent=2))
    return manifest


def _write_item(out: Path, i: int, x_hat, y, is_image: bool) -> list[str]:
    if not is_image:
        names = [f"restored_{i:03d}.csv", f"degraded_{i:03d}.csv"]
        io.write_points_csv(out / names[0], x_hat)
        io.write_points_csv(out / names[1], y)
        return names
    ext = "ppm" if x_hat.shape[0] == 3 else "pgm"
    names = [f"restored_{i:03d}.{ext}", f"degraded_{i:03d}.{ext}"]
    io.write_netpbm(out / names[0], np.clip(x_hat, -1, 1))
    io.write_netpbm(out / names[1], np.clip(y, -1, 1))
    return names


def _write_metrics_csv(path: Path, items: list):
    keys = ["index", "status", "psnr", "ssim", "mse", "degraded_psnr", "degraded_mse", "error"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for it in items:
            w.writerow(["" if it.get(k) is None else it.get(k) for k in keys])


# --------------------------------------------------------------------------
# Grid search
# --------------------------------------------------------------------------


def validation_score(config: ExperimentConfig, target=None, field_=None) -> float:
    """Mean PSNR over the validation items."""
    target = target if target is not None else build_target(config.data)
    field_ = field_ if field_ is not None else build_model(config, target)
    clean = draw_items(config, target, "validation", config.n_validation)
    scores = []
    for i, x in enumerate(clean):
        _, x_hat = restore_item(config, target, field_, x, i, split="validation")
        scores.append(psnr(x_hat, x))
    return float(np.mean(scores))


def grid_search(base: ExperimentConfig, alphas=ALPHA_GRID, steps_grid=STEPS_GRID,
                ) -> tuple[ExperimentConfig, list[dict]]:
    """Score every ``(alpha, N)`` cell on the validation set; best PSNR wins.

    Ties go to the smaller N, then the smaller alpha. Failed cells score -inf.
    """
    if not alphas or not steps_grid:
        raise ConfigError("alpha and step grids must be non-empty")
    base.validate()
    if base.n_validation < 1:
        raise ConfigError("validation set must be non-empty")
    target = build_target(base.data)
    field_ = build_model(base, target)
    table = []
    for n_steps in steps_grid:
        for alpha in alphas:
            cfg = dataclasses.replace(base, solver=dataclasses.replace(
                base.solver, alpha=float(alpha), steps=int(n_steps)))
            try:
                cfg.validate()
                score = validation_score(cfg, target, field_)
                if not np.isfinite(score):
                    score = float("-inf")
                error = None
            except Exception as exc:
                score, error = float("-inf"), f"{type(exc).__name__}: {exc}"
            table.append({"alpha": float(alpha), "steps": int(n_steps), "psnr": score,
                          "error": error})
    best = min(table, key=lambda r: (-r["psnr"], r["steps"], r["alpha"]))
    best_cfg = dataclasses.replace(base, solver=dataclasses.replace(
        base.solver, alpha=best["alpha"], steps=best["steps"]))
    return best_cfg, table


def write_score_table(path, table: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "steps", "psnr", "error"])
        for row in table:
            w.writerow([row["alpha"], row["steps"], repr(row["psnr"]), row["error"] or ""])
