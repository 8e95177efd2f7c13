"""Desk-scale experiments: image reconstruction, teacher-student recovery,
blob classification, and the sweep driver."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import io, linalg
from .adapt import METHODS, make_adapter, trainable_count
from .errors import ConfigError, NonFiniteActivation, RankOutOfRange
from .io import GrayImage
from .model import build_stack, pretrained_blocks, random_weights, stack_backward, stack_forward
from .optim import KINDS, OptimState, apply_step, schedule_lr

TASKS = ("teacher_student", "blobs", "reconstruct")
TEST_IMAGE = "test_image.pgm"


# -- images -------------------------------------------------------------------

def make_test_image(size: int = 256, seed: int = 2024) -> GrayImage:
    """Procedural stand-in for a natural photo: smooth shading, a five-armed
    star, a fine periodic texture and mild noise, quantized to 8 bits."""
    rng = np.random.default_rng(seed)
    t = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(t, t, indexing="ij")
    img = 0.35 + 0.25 * y + 0.1 * np.sin(2 * np.pi * (1.5 * x + 0.5 * y))
    theta = np.arctan2(y - 0.55, x - 0.5)
    rad = np.hypot(x - 0.5, y - 0.55)
    star = rad < 0.22 + 0.07 * np.cos(5 * theta)
    img = np.where(star, 0.85 - 0.6 * rad, img)
    img += 0.04 * np.sin(2 * np.pi * 19 * x) * np.sin(2 * np.pi * 13 * y)
    img += 0.015 * rng.standard_normal(img.shape)
    return GrayImage(np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0)


def load_test_image() -> GrayImage:
    """The bundled 256 x 256 test image (``make_test_image()`` written as PGM)."""
    data = resources.files("svfit.data").joinpath(TEST_IMAGE).read_bytes()
    return io.decode_pgm(data)


def psnr(reference: np.ndarray, estimate: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(reference) - np.asarray(estimate)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class Reconstruction:
    image: GrayImage
    rank: int
    order: str
    psnr: float
    mse: float
    nuclear_ratio: float
    frobenius_ratio: float


def reconstruct_image(img: GrayImage, r: int, order: str = "top",
                      factors: linalg.SvdFactors | None = None) -> Reconstruction:
    """Rebuild ``img`` from its ``r`` largest (``top``) or smallest (``bottom``)
    singular triples.

    Energy ratios give the share of the spectrum the chosen triples hold.
    Pixels are left unclamped so the error matches the discarded spectrum.
    """
    if order not in ("top", "bottom"):
        raise ConfigError(f"order must be 'top' or 'bottom', got {order!r}")
    f = factors if factors is not None else linalg.svd(img.pixels)
    d = f.sigma.size
    r = linalg._check_rank(r, d)
    keep = slice(0, r) if order == "top" else slice(d - r, d)
    approx = (f.u[:, keep] * f.sigma[keep]) @ f.vt[keep]
    if order == "top":
        nuclear, frob = linalg.energy_ratio(f.sigma, r)
    elif r == d:
        nuclear, frob = 1.0, 1.0
    else:
        n_rest, f_rest = linalg.energy_ratio(f.sigma, d - r)
        nuclear, frob = 1.0 - n_rest, 1.0 - f_rest
    mse = float(np.mean((img.pixels - approx) ** 2))
    return Reconstruction(GrayImage(approx), r, order, psnr(img.pixels, approx), mse,
                          nuclear, frob)


# -- synthetic data -----------------------------------------------------------

@dataclass
class TeacherStudent:
    w0: np.ndarray
    w_star: np.ndarray
    x: np.ndarray
    y: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    target_sigma: np.ndarray | None = None


def gen_teacher_student(seed, d1: int, d2: int, r: int, perturb: str = "sigma_only",
                        scale: float = 0.5, n_samples: int = 256, n_eval: int = 128
                        ) -> TeacherStudent:
    """Regression pairs ``y = w_star x`` around a starting matrix ``w0``.

    ``sigma_only`` rescales the top ``r`` singular values of ``w0`` by
    ``1 + scale * xi`` with ``xi ~ U[-1, 1]``, keeping its singular vectors;
    ``general`` adds a dense Gaussian perturbation of relative size ``scale``.
    """
    if not 1 <= r <= min(d1, d2):
        raise RankOutOfRange(f"perturbation rank {r} outside [1, {min(d1, d2)}]")
    if scale < 0:
        raise ConfigError("perturbation scale must be non-negative")
    rng = np.random.default_rng([seed, 0x7EAC])
    w0 = rng.standard_normal((d1, d2)) / np.sqrt(d2)
    target_sigma = None
    if perturb == "sigma_only":
        f = linalg.svd(w0)
        target_sigma = f.sigma.copy()
        target_sigma[:r] *= 1.0 + scale * rng.uniform(-1.0, 1.0, r)
        w_star = w0 - f.reconstruct() + (f.u[:, :f.sigma.size] * target_sigma) @ f.vt[:f.sigma.size]
    elif perturb == "general":
        w_star = w0 + scale * rng.standard_normal((d1, d2)) / np.sqrt(d2)
    else:
        raise ConfigError(f"perturb must be 'sigma_only' or 'general', got {perturb!r}")
    x = rng.standard_normal((d2, n_samples))
    x_eval = rng.standard_normal((d2, n_eval))
    return TeacherStudent(w0, w_star, x, w_star @ x, x_eval, w_star @ x_eval, target_sigma)


def gen_blobs(seed, n: int, tokens: int, d: int, classes: int = 4, spread: float = 0.6
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Token sequences drawn around one Gaussian centre per class.

    Returns ``(x_train, y_train, x_eval, y_eval)``; ``x`` is (n, tokens, d).
    Training and eval sets share centres and use disjoint noise.
    """
    rng = np.random.default_rng([seed, 0xB10B])
    centres = rng.standard_normal((classes, d))

    def draw(count):
        labels = rng.integers(0, classes, count)
        x = centres[labels][:, None, :] + spread * rng.standard_normal((count, tokens, d))
        return x, labels

    x_tr, y_tr = draw(n)
    x_ev, y_ev = draw(max(n // 2, classes))
    return x_tr, y_tr, x_ev, y_ev


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def pretrain_stack(seed, n_blocks: int, d_model: int, *, classes: int = 8, steps: int = 300,
                   lr: float = 3e-3, tokens: int = 4, mlp: bool = False) -> dict[str, np.ndarray]:
    """Pre-train every projection and the head on a seeded source blob task.

    Returns dense weights in checkpoint layout (``blocks.<i>.<w_*>``, ``head``).
    """
    weights = random_weights([seed, 0x5EED], n_blocks, d_model, mlp=mlp)
    stack = build_stack(weights, "full", 0, [seed, 1], classes, other_method="full")
    x, labels, _, _ = gen_blobs([seed, 0x50C], 256, tokens, d_model, classes)
    state = OptimState("adamw", lr_base=lr)
    rng = np.random.default_rng([seed, 0xBA7C])
    batch = 32
    for step in range(steps):
        idx = rng.choice(x.shape[0], batch, replace=False)
        logits, trace = stack_forward(stack, x[idx])
        _, g = _cross_entropy(logits, labels[idx])
        grads, _ = stack_backward(stack, trace, g)
        apply_step(state, stack.trainable_buffers(), grads, schedule_lr(step, steps, 0.06, lr))
        stack.touch()
    out = {}
    for prefix, layer in stack.layers().items():
        out[prefix] = layer.merge()
    out["head"] = stack.head.copy()
    return out


# -- run configuration --------------------------------------------------------

@dataclass
class RunConfig:
    """Everything needed to reproduce one training run.

    ``rank`` may be ``"full"`` (min of the adapted matrix's dimensions).
    Relative paths are resolved against the current directory.
    """

    seed: int
    task: str = "teacher_student"
    method: str = "svfit"
    rank: Any = 8
    lr_base: float = 0.01
    lr_multiplier: float = 1.0
    lr_multiplier_sweep: list[float] = field(default_factory=lambda: [0.5, 1, 5, 10, 50, 100, 150])
    optimizer: str = "adamw"
    epochs: int = 10
    batch_size: int = 32
    warmup_ratio: float = 0.06
    weight_decay: float = 0.0
    decay_sigma: bool = True
    clip_norm: float | None = None
    n_blocks: int = 2
    d_model: int = 64
    classes: int = 4
    tokens: int = 4
    mlp: bool = False
    adapt_mlp: bool = False
    train_head: bool = True
    n_train: int = 256
    n_eval: int = 128
    perturb: str = "sigma_only"
    perturb_scale: float = 0.5
    perturb_rank: Any = "full"
    pretrained: str | None = None
    pretrain_steps: int = 300
    image: str | None = None
    ranks: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128, 256])
    order: str = "top"
    log_every: int = 50
    record_wall_time: bool = False
    out_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "seed" not in data:
            raise ConfigError("config must set 'seed'")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    @property
    def lr(self) -> float:
        return self.lr_base * self.lr_multiplier

    def resolved_rank(self) -> int:
        return self.d_model if self.rank == "full" else self.rank

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(isinstance(self.seed, int) and not isinstance(self.seed, bool),
             "seed must be an integer")
        need(self.task in TASKS, f"task must be one of {TASKS}")
        need(self.method in METHODS, f"method must be one of {METHODS}")
        need(self.optimizer in KINDS, f"optimizer must be one of {KINDS}")
        for name in ("epochs", "batch_size", "n_blocks", "d_model", "classes", "tokens",
                     "n_train", "n_eval", "log_every"):
            value = getattr(self, name)
            need(isinstance(value, int) and not isinstance(value, bool) and value >= 1,
                 f"{name} must be a positive integer")
        need(self.pretrain_steps >= 0, "pretrain_steps must be non-negative")
        need(0.0 <= self.warmup_ratio < 1.0, "warmup_ratio must lie in [0, 1)")
        need(self.lr_base > 0 and self.lr_multiplier > 0, "learning rates must be positive")
        need(self.weight_decay >= 0, "weight_decay must be non-negative")
        for name in ("rank", "perturb_rank"):
            value = getattr(self, name)
            need(value == "full" or (isinstance(value, int) and not isinstance(value, bool)),
                 f"{name} must be an integer or 'full'")
            if value != "full":
                need(1 <= value <= self.d_model, f"{name} must lie in [1, d_model]")
        need(self.perturb in ("sigma_only", "general"), "perturb must be sigma_only or general")
        need(self.order in ("top", "bottom"), "order must be top or bottom")
        need(all(isinstance(r, int) and r >= 1 for r in self.ranks), "ranks must be positive")
        need(self.adapt_mlp is False or self.mlp, "adapt_mlp requires mlp")
        need(isinstance(self.out_dir, str) and self.out_dir, "out_dir must be a path")


def adapted_matrix_count(cfg: RunConfig) -> int:
    if cfg.task == "teacher_student":
        return 1
    return cfg.n_blocks * (4 if cfg.adapt_mlp else 2)


def count_adapter_params(cfg: RunConfig) -> dict[str, int]:
    """Per-matrix trainable counts for ``cfg`` by arithmetic alone (no SVD)."""
    r = cfg.resolved_rank()
    d = cfg.d_model
    if cfg.task == "teacher_student":
        names = ["layer"]
    elif cfg.task == "blobs":
        slots = ("w_q", "w_v") + (("w_up", "w_down") if cfg.adapt_mlp else ())
        names = [f"blocks.{i}.{s}" for i in range(cfg.n_blocks) for s in slots]
    else:
        names = []
    return {name: trainable_count(cfg.method, d, d, r) for name in names}


# -- training -----------------------------------------------------------------

@dataclass
class MetricsRecord:
    step: int
    lr: float
    train_loss: float
    eval_metric: float
    sigma_snapshot: list[float] | None = None
    wall_ms: float | None = None

    def to_json(self) -> str:
        data = dataclasses.asdict(self)
        for key in ("lr", "train_loss", "eval_metric"):
            data[key] = _json_float(data[key])
        return json.dumps(data, allow_nan=False)


@dataclass
class RunResult:
    final: MetricsRecord
    records: list[MetricsRecord]
    metrics_path: Path
    checkpoint_path: Path
    trainable_params: int


def _prepare_out(cfg: RunConfig, overwrite: bool) -> tuple[Path, Path]:
    out = Path(cfg.out_dir)
    metrics, ckpt = out / "metrics.jsonl", out / "final.svfc"
    if not overwrite:
        for p in (metrics, ckpt):
            if p.exists():
                raise ConfigError(f"{p} already exists (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return metrics, ckpt


def _json_float(x: float) -> float | None:
    return None if not math.isfinite(x) else float(x)


class _Logger:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.records: list[MetricsRecord] = []
        self.t0 = time.perf_counter()

    def log(self, step, lr, train_loss, eval_metric, sigma=None):
        wall = None
        if self.cfg.record_wall_time:
            wall = round((time.perf_counter() - self.t0) * 1000.0, 3)
        snap = None if sigma is None else [float(s) for s in sigma[:8]]
        rec = MetricsRecord(step, float(lr), float(train_loss), float(eval_metric), snap, wall)
        self.records.append(rec)
        return rec

    def write(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")


def _steps(cfg: RunConfig, n: int) -> tuple[int, int]:
    per_epoch = math.ceil(n / cfg.batch_size)
    return per_epoch, per_epoch * cfg.epochs


def _optimizer(cfg: RunConfig) -> OptimState:
    exempt = frozenset() if cfg.decay_sigma else frozenset({"sigma_r"})
    return OptimState(cfg.optimizer, lr_base=cfg.lr, weight_decay=cfg.weight_decay,
                      clip_norm=cfg.clip_norm, decay_exempt=exempt)


def _batches(cfg: RunConfig, n: int):
    """Yield (global_step, index batch) over seeded per-epoch permutations."""
    rng = np.random.default_rng([cfg.seed, 0xDA7A])
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            yield step, perm[start:start + cfg.batch_size]
            step += 1


def _train_teacher_student(cfg: RunConfig, log: _Logger):
    d = cfg.d_model
    pr = d if cfg.perturb_rank == "full" else cfg.perturb_rank
    data = gen_teacher_student(cfg.seed, d, d, pr, cfg.perturb, cfg.perturb_scale,
                               cfg.n_train, cfg.n_eval)
    layer = make_adapter(cfg.method, data.w0, cfg.resolved_rank(), seed=[cfg.seed, 0xADA])
    buffers = {f"layer.{k}": v for k, v in layer.trainable.items()}
    state = _optimizer(cfg)
    _, total = _steps(cfg, cfg.n_train)

    def mse(x, y):
        value = float(np.mean((layer.forward(x) - y) ** 2))
        if not math.isfinite(value):
            raise NonFiniteActivation("teacher-student loss is not finite")
        return value

    def record(step, lr):
        sigma = layer.trainable.get("sigma_r") if layer.method == "svfit" else None
        return log.log(step, lr, mse(data.x, data.y), mse(data.x_eval, data.y_eval), sigma)

    record(0, schedule_lr(0, total, cfg.warmup_ratio, cfg.lr))
    for step, idx in _batches(cfg, cfg.n_train):
        lr = schedule_lr(step, total, cfg.warmup_ratio, cfg.lr)
        xb, yb = data.x[:, idx], data.y[:, idx]
        pred = layer.forward(xb)
        g = 2.0 * (pred - yb) / pred.size
        grads = layer.backward(xb, g).params
        apply_step(state, buffers, {f"layer.{k}": v for k, v in grads.items()}, lr)
        done = step + 1
        if done % cfg.log_every == 0 and done < total:
            record(done, schedule_lr(done, total, cfg.warmup_ratio, cfg.lr))
    final = record(total, 0.0)
    return final, layer.to_tensors("layer"), layer.param_count()


def _load_pretrained(cfg: RunConfig) -> dict[str, np.ndarray]:
    if cfg.pretrained:
        weights = io.read_checkpoint(cfg.pretrained)
        pretrained_blocks(weights)
        return weights
    return pretrain_stack(cfg.seed, cfg.n_blocks, cfg.d_model, steps=cfg.pretrain_steps,
                          tokens=cfg.tokens, mlp=cfg.mlp)


def _train_blobs(cfg: RunConfig, log: _Logger):
    weights = _load_pretrained(cfg)
    stack = build_stack(weights, cfg.method, cfg.resolved_rank(), cfg.seed, cfg.classes,
                        adapt_mlp=cfg.adapt_mlp, train_head=cfg.train_head)
    x, labels, x_ev, labels_ev = gen_blobs(cfg.seed, cfg.n_train, cfg.tokens, cfg.d_model,
                                           cfg.classes)
    state = _optimizer(cfg)
    _, total = _steps(cfg, cfg.n_train)
    first = next(iter(stack.adapters().values()))

    def record(step, lr):
        train_logits, _ = stack_forward(stack, x)
        eval_logits, _ = stack_forward(stack, x_ev)
        loss, _ = _cross_entropy(train_logits, labels)
        sigma = first.trainable.get("sigma_r") if first.method == "svfit" else None
        return log.log(step, lr, loss, _accuracy(eval_logits, labels_ev), sigma)

    record(0, schedule_lr(0, total, cfg.warmup_ratio, cfg.lr))
    for step, idx in _batches(cfg, cfg.n_train):
        lr = schedule_lr(step, total, cfg.warmup_ratio, cfg.lr)
        logits, trace = stack_forward(stack, x[idx])
        _, g = _cross_entropy(logits, labels[idx])
        grads, _ = stack_backward(stack, trace, g)
        apply_step(state, stack.trainable_buffers(), grads, lr)
        stack.touch()
        done = step + 1
        if done % cfg.log_every == 0 and done < total:
            record(done, schedule_lr(done, total, cfg.warmup_ratio, cfg.lr))
    final = record(total, 0.0)
    return final, stack.to_tensors(), stack.adapter_param_count()


def _run_reconstruct(cfg: RunConfig, log: _Logger):
    img = io.read_pgm(cfg.image) if cfg.image else load_test_image()
    f = linalg.svd(img.pixels)
    tensors = {}
    for r in cfg.ranks:
        rec = reconstruct_image(img, r, cfg.order, factors=f)
        last = log.log(r, 0.0, rec.mse, rec.psnr)
        tensors[f"{cfg.order}_{r}"] = rec.image.pixels
    return last, tensors, 0


def run_training(cfg: RunConfig, overwrite: bool = False) -> RunResult:
    """Run ``cfg`` and write ``metrics.jsonl`` plus ``final.svfc`` into ``cfg.out_dir``.

    Identical configs produce byte-identical files (wall time is only logged
    when ``record_wall_time`` is set).  On divergence the records gathered
    so far are written before :class:`NonFiniteActivation` propagates.
    """
    cfg.validate()
    metrics_path, ckpt_path = _prepare_out(cfg, overwrite)
    log = _Logger(cfg)
    runner = {"teacher_student": _train_teacher_student, "blobs": _train_blobs,
              "reconstruct": _run_reconstruct}[cfg.task]
    try:
        final, tensors, params = runner(cfg, log)
    except NonFiniteActivation:
        log.write(metrics_path)
        raise
    log.write(metrics_path)
    io.write_checkpoint(ckpt_path, tensors)
    return RunResult(final, log.records, metrics_path, ckpt_path, params)


# -- sweeps -------------------------------------------------------------------

SWEEP_AXES = ("rank", "lr_multiplier")
SWEEP_HEADER = ("value", "trainable_params", "final_loss", "final_metric")


def sweep(cfg: RunConfig, axis: str, values, overwrite: bool = False,
          dry_run: bool = False) -> list[dict]:
    """One run per value along ``axis`` (shared seed), summarized to
    ``sweep.csv`` and ``sweep.json`` in ``cfg.out_dir``.

    ``dry_run`` fills in parameter counts only and leaves losses empty.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(cfg.out_dir)
    csv_path, json_path = out / "sweep.csv", out / "sweep.json"
    if not overwrite:
        for p in (csv_path, json_path):
            if p.exists():
                raise ConfigError(f"{p} already exists (use --force to overwrite)")
    rows = []
    for value in values:
        run_cfg = cfg.replace(**{axis: value, "out_dir": str(out / f"{axis}_{value}")})
        params = sum(count_adapter_params(run_cfg).values())
        row = {"value": value, "trainable_params": params,
               "final_loss": None, "final_metric": None}
        if not dry_run:
            res = run_training(run_cfg, overwrite=overwrite)
            row["final_loss"] = res.final.train_loss
            row["final_metric"] = res.final.eval_metric
        rows.append(row)
    out.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in SWEEP_HEADER})
    json_path.write_text(json.dumps({"axis": axis, "rows": rows}, indent=2) + "\n")
    return rows
