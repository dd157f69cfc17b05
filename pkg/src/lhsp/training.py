"""SGD training of the full network, checkpointing and the training log."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import imaging, metrics, network, serialization
from .data import Dataset, batch_stream
from .hsp import multitask_loss
from .network import Model, NetConfig
from .tensor import sgd_step

PAPER_LEARNING_RATE = 1e-12  # as published; assumes an unknown pixel scaling
BOUNDARY_HEAD = ("hsp.conv.kernel", "hsp.conv.bias")


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: Optional[int] = None, log=None):
        super().__init__(message)
        self.iteration = iteration
        self.log = log


@dataclass
class TrainConfig:
    scale: int = 2
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_iterations: int = 1000
    alpha: float = 0.1
    lam: float = 0.3
    max_disp: Optional[float] = None
    disp_sigma: float = 1.0
    eval_every: int = 0
    seed: int = 0
    checkpoint: Optional[str] = None
    checkpoint_every: int = 1000
    init: str = "interpolation-identity"
    freeze_boundary: bool = False
    single_task: bool = False
    reduction: str = "mean"
    features: int = 32
    conv1_size: int = 5
    deconv_size: Optional[int] = None
    hsp_size: int = 5
    use_conv1: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.max_iterations < 0:
            raise ValueError("max iterations must be >= 0")
        if self.single_task and self.alpha != 0:
            raise ValueError("single-task training has no boundary target; set alpha to 0")

    def net_config(self) -> NetConfig:
        return NetConfig(
            scale=self.scale, features=self.features, conv1_size=self.conv1_size,
            deconv_size=self.deconv_size, hsp_size=self.hsp_size, use_conv1=self.use_conv1,
            boundary_head=not self.single_task, lam=self.lam, max_disp=self.max_disp,
            disp_sigma=self.disp_sigma,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LogRow:
    iteration: int
    loss: float
    val_psnr: Optional[float] = None
    val_ssim: Optional[float] = None
    wall_ms: float = 0.0


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, row: LogRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError(f"log iteration {row.iteration} does not follow {self.rows[-1].iteration}")
        self.rows.append(row)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rows])

    def smoothed(self, beta: float = 0.9) -> np.ndarray:
        """Bias-corrected exponential moving average of the loss."""
        out, avg = [], 0.0
        for i, v in enumerate(self.losses, start=1):
            avg = beta * avg + (1 - beta) * v
            out.append(avg / (1 - beta**i))
        return np.array(out)

    def validation(self) -> list[tuple[int, float, float]]:
        return [(r.iteration, r.val_psnr, r.val_ssim) for r in self.rows if r.val_psnr is not None]

    def without_timing(self) -> list[tuple]:
        return [(r.iteration, r.loss, r.val_psnr, r.val_ssim) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "val_psnr", "val_ssim", "wall_ms"])
        opt = lambda v: "" if v is None else repr(v)  # noqa: E731
        for r in self.rows:
            w.writerow([r.iteration, repr(r.loss), opt(r.val_psnr), opt(r.val_ssim), f"{r.wall_ms:.1f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        opt = lambda v: None if v == "" else float(v)  # noqa: E731
        log = cls()
        for r in csv.DictReader(io.StringIO(text)):
            log.append(LogRow(int(r["iteration"]), float(r["loss"]), opt(r["val_psnr"]),
                              opt(r["val_ssim"]), float(r["wall_ms"])))
        return log

    def to_rows(self) -> list:
        return [asdict(r) for r in self.rows]

    @classmethod
    def from_rows(cls, rows) -> "TrainLog":
        log = cls()
        for r in rows:
            log.append(LogRow(**r))
        return log


def init_params(config: TrainConfig, mode: Optional[str] = None) -> Model:
    model = network.init_model(config.net_config(), mode or config.init, config.seed)
    if config.freeze_boundary and model.hsp.has_boundary_head:
        for name in BOUNDARY_HEAD:
            model.named_tensors()[name][1] = 0.0
    return model


def validation_pairs(images: Sequence, scale: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Quantized (LR, HR) luma pairs for the held-out images, as the metrics see them."""
    pairs = []
    for p in images:
        hr = imaging.quantize(imaging.modcrop(imaging.load_image(p).y, scale))
        pairs.append((imaging.quantize(imaging.degrade(hr, scale)), hr))
    return pairs


def evaluate_pairs(model: Model, pairs) -> tuple[float, float]:
    """Mean PSNR / SSIM of the model's quantized predictions (border = scale)."""
    s = model.config.scale
    ps, ss = [], []
    for lr, hr in pairs:
        out = imaging.quantize(network.predict(model, lr)[0])
        ps.append(metrics.psnr(out, hr, s))
        ss.append(metrics.ssim(out, hr, s))
    return math.fsum(ps) / len(ps), math.fsum(ss) / len(ss)


def _step(model: Model, dataset: Dataset, disp: np.ndarray, idx, config: TrainConfig):
    lr, hr, bnd = dataset.batch(idx)
    y_hat, b_hat, mask, state = network.forward(model, lr, disp[idx])
    loss, g_y, g_b = multitask_loss(y_hat, b_hat, hr, bnd, config.alpha, mask, config.reduction)
    if not math.isfinite(loss):
        return loss, None
    grads = network.backward(model, state, g_y, g_b)
    if config.freeze_boundary and b_hat is not None:
        for name in BOUNDARY_HEAD:
            grads[name][1] = 0.0
    return loss, grads


def _apply(model: Model, grads: dict, lr: float) -> None:
    named = model.named_tensors()
    keys = list(named)
    sgd_step([named[k] for k in keys], [grads[k] for k in keys], lr)


def dataset_displacements(dataset: Dataset, config: TrainConfig) -> np.ndarray:
    """Placement displacement of every training sample, computed once."""
    net = config.net_config()
    lr = dataset.records["lr"]
    if config.lam == 0:
        return np.zeros((len(lr), 2) + lr.shape[1:])
    out = np.empty((len(lr), 2) + lr.shape[1:])
    for i in range(len(lr)):
        out[i] = network.lsp.compute_displacement(lr[i].astype(np.float64), net.scale, net.lam,
                                                  net.max_disp, net.disp_sigma)
    return out


def _checkpoint(path, model: Model, config: TrainConfig, iteration: int, log: TrainLog,
                dataset: Dataset) -> None:
    serialization.save_model(path, model, {
        "train_config": config.to_dict(),
        "iteration": iteration,
        "rng": {"seed": config.seed, "iteration": iteration},
        "dataset_sha256": dataset.digest,
        "log": log.to_rows(),
    })


def train(dataset: Dataset, config: TrainConfig, validation=None, model: Optional[Model] = None,
          start_iteration: int = 0, log: Optional[TrainLog] = None, progress=None,
          time_budget: Optional[float] = None, displacements: Optional[np.ndarray] = None):
    """Minimize the multi-task loss by plain SGD; returns ``(model, log)``.

    ``validation`` is a list of (lr, hr) planes scored every ``eval_every``
    iterations and at the end. Batch order depends only on ``(seed,
    iteration)``, so a run resumed from a checkpoint continues exactly.
    ``time_budget`` (seconds) stops early, after a complete step.
    """
    if dataset.scale != config.scale:
        raise ValueError(f"dataset scale {dataset.scale} != config scale {config.scale}")
    if model is None:
        model = init_params(config)
    log = TrainLog() if log is None else log
    disp = dataset_displacements(dataset, config) if displacements is None else displacements
    stream = batch_stream(len(dataset), config.batch_size, config.seed, start_iteration)
    t0 = time.perf_counter()
    it = start_iteration

    def record(iteration, loss, evaluate):
        vp = vs = None
        if evaluate and validation:
            vp, vs = evaluate_pairs(model, validation)
        row = LogRow(iteration, loss, vp, vs, (time.perf_counter() - t0) * 1000.0)
        log.append(row)
        if progress:
            progress(row)

    while it < config.max_iterations:
        idx = next(stream)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = _step(model, dataset, disp, idx, config)
        it += 1
        if grads is None:
            log.append(LogRow(it, loss, None, None, (time.perf_counter() - t0) * 1000.0))
            raise TrainingError(f"non-finite loss {loss} at iteration {it}", it, log)
        _apply(model, grads, config.learning_rate)
        last = it == config.max_iterations or (
            time_budget is not None and time.perf_counter() - t0 > time_budget)
        record(it, loss, last or (config.eval_every and it % config.eval_every == 0))
        if config.checkpoint and (last or it % config.checkpoint_every == 0):
            _checkpoint(config.checkpoint, model, config, it, log, dataset)
        if last:
            break
    return model, log


def resume(path, dataset: Dataset, validation=None, max_iterations: Optional[int] = None,
           progress=None, checkpoint: Optional[str] = None):
    """Continue a run from its checkpoint file (written back to ``checkpoint``,
    default the file it came from)."""
    model, extra = serialization.load_model(path)
    if "train_config" not in extra:
        raise serialization.BlobError(f"{path}: not a training checkpoint")
    config = TrainConfig.from_dict(extra["train_config"])
    if max_iterations is not None:
        config.max_iterations = max_iterations
    config.checkpoint = os.fspath(checkpoint or path)
    if extra.get("dataset_sha256") and dataset.digest and extra["dataset_sha256"] != dataset.digest:
        raise ValueError(f"{path}: checkpoint was trained on a different dataset")
    log = TrainLog.from_rows(extra.get("log", []))
    return train(dataset, config, validation, model, int(extra["iteration"]), log, progress)


@dataclass
class RangeTest:
    rates: list
    losses: list
    suggested: float
    threshold: float

    def report(self) -> str:
        lines = ["learning rate    loss after steps"]
        for r, l in zip(self.rates, self.losses):
            lines.append(f"{r:13.3g}    {l:.6g}")
        lines.append(f"suggested {self.suggested:.3g} (largest stable {self.threshold:.3g})")
        return "\n".join(lines)


def lr_range_test(dataset: Dataset, config: TrainConfig, rates: Optional[Sequence[float]] = None,
                  steps: int = 30) -> RangeTest:
    """Train ``steps`` iterations from the same start at each learning rate.

    A rate is stable when its loss stays finite and ends below the starting
    loss. The suggestion is the stable rate with the lowest final loss,
    halved for margin.
    """
    rates = list(np.logspace(-4, 1, 11) if rates is None else rates)
    disp = dataset_displacements(dataset, config)
    start = init_params(config)
    first = None
    finals = []
    for r in rates:
        cfg = TrainConfig.from_dict({**config.to_dict(), "learning_rate": float(r),
                                     "max_iterations": steps, "checkpoint": None, "eval_every": 0})
        try:
            _, log = train(dataset, cfg, model=start.copy(), displacements=disp)
            first = log.rows[0].loss if first is None else first
            tail = float(np.mean(log.losses[-5:]))
            finals.append(tail if math.isfinite(tail) else math.inf)
        except TrainingError:
            finals.append(math.inf)
    stable = [(l, r) for r, l in zip(rates, finals) if first is not None and l < first]
    if not stable:
        raise TrainingError("no learning rate in the range reduced the loss")
    best = min(stable)[1]
    return RangeTest([float(r) for r in rates], finals, float(best) / 2, float(max(r for _, r in stable)))


@dataclass
class Ablation:
    with_hsp: TrainLog
    without_hsp: TrainLog

    def report(self) -> str:
        """Side-by-side validation curves and a note on convergence speed."""
        a, b = self.with_hsp.validation(), self.without_hsp.validation()
        lines = ["iteration  psnr(hsp)  ssim(hsp)  psnr(single)  ssim(single)"]
        for (i, p1, s1), (_, p2, s2) in zip(a, b):
            lines.append(f"{i:9d}  {p1:9.3f}  {s1:9.4f}  {p2:12.3f}  {s2:12.4f}")
        if a and b:
            ahead = sum(1 for x, y in zip(a, b) if x[1] > y[1])
            lines.append(f"boundary objective ahead at {ahead} of {len(a)} checkpoints")
        return "\n".join(lines)


def ablate_hsp(dataset: Dataset, config: TrainConfig, validation=None, progress=None) -> Ablation:
    """Train with the configured alpha and again with alpha 0 and a frozen
    zero boundary head; same seed, same iteration grid."""
    with_hsp = TrainConfig.from_dict({**config.to_dict(), "checkpoint": None})
    without = TrainConfig.from_dict({**with_hsp.to_dict(), "alpha": 0.0, "freeze_boundary": True})
    disp = dataset_displacements(dataset, config)
    _, log_a = train(dataset, with_hsp, validation, progress=progress, displacements=disp)
    _, log_b = train(dataset, without, validation, progress=progress, displacements=disp)
    return Ablation(log_a, log_b)
