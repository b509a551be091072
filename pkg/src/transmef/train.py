"""Multi-task training loop: corrupt, reconstruct, optimize.

Every step draws a batch of images; each image is independently corrupted
once per enabled task (fresh subregions per task), every corrupted variant
is reconstructed by the shared encoder-decoder, and the summed task losses
(averaged over the batch) are minimized with Adam plus a cosine-annealed
learning rate.  Gradients are accumulated per (image, task) pair in a fixed
order, which is numerically identical to backpropagating the batch mean and
keeps the weight trajectory fully determined by (config, seed, dataset).

Weight decay is decoupled: p <- p - lr*wd*p is applied before the Adam
delta, outside the moment estimates.

Corruption substreams: derive(seed, STREAM_CORRUPT, step, slot, task_index)
with task_index the position of the task in TASKS, so disabling one task
never changes the inputs generated for the others.
"""

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, NonFiniteError, backward
from .corruption import TASKS, corrupt
from .loss import LossWeights, LossReport, TaskTerms, task_loss_terms
from .model import ModelConfig, TransMEF, save_weights
from .rng import SplitMix64, derive, STREAM_DATA, STREAM_CORRUPT

LOG_HEADER = ["step", "lr", "mse_g", "ssim_g", "tv_g",
              "mse_f", "ssim_f", "tv_f", "mse_s", "ssim_s", "tv_s", "total"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr0: float = 1e-4
    weight_decay: float = 5e-4
    lambda_ssim: float = 20.0
    lambda_tv: float = 20.0
    seed: int = 0
    dataset_dir: str = ""
    image_size: int = 64
    checkpoint_every: int = 0          # steps; 0 keeps only the final checkpoint
    out_dir: str = "runs"
    crop: str = "center"               # center | random | resize
    max_steps: int = 0                 # 0 derives the step count from epochs
    tasks: tuple = TASKS               # empty tuple = plain reconstruction
    use_transformer: bool = True

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.crop not in ("center", "random", "resize"):
            raise ValueError(f"unknown crop mode {self.crop!r}")
        for t in self.tasks:
            if t not in TASKS:
                raise ValueError(f"unknown task {t!r}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_ssim, self.lambda_tv)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 (step 0) to 0 (step == total_steps)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


# -- Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict) -> AdamState:
    state = AdamState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam update with decoupled weight decay."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g.sum()):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- one optimization step -----------------------------------------------------------


def train_step(model: TransMEF, images, cfg: TrainConfig, state: AdamState,
               lr: float, step_index: int) -> LossReport:
    """Corrupt, reconstruct and optimize one batch; returns the loss record.

    ``images`` is a list of (H,W) float arrays in [0,1].  With no enabled
    tasks the step degenerates to plain reconstruction of the originals
    (per-task report columns stay zero, the total records the identity
    reconstruction loss).
    """
    if not images:
        raise ValueError("train_step needs a nonempty batch")
    weights = cfg.loss_weights
    params = model.parameters()
    model.zero_grads()
    scale = 1.0 / len(images)
    sums = {t: np.zeros(3) for t in cfg.tasks} if cfg.tasks else {None: np.zeros(3)}

    for slot, image in enumerate(images):
        target = Tensor(image[None, :, :].astype(np.float32))
        if cfg.tasks:
            variants = [
                (t, corrupt(image, t, derive(cfg.seed, STREAM_CORRUPT, step_index,
                                             slot, TASKS.index(t))))
                for t in cfg.tasks
            ]
        else:
            variants = [(None, image)]
        for task, corrupted in variants:
            out = model.forward(Tensor(corrupted[None, :, :].astype(np.float32)))
            m, s, t, total = task_loss_terms(out, target, weights)
            sums[task] += (m.item(), s.item(), t.item())
            backward(total * scale)

    terms = {t: tuple(v * scale) for t, v in sums.items()}
    if cfg.tasks:
        report = LossReport.from_terms(
            weights,
            gamma=terms.get("gamma"),
            fourier=terms.get("fourier"),
            shuffle=terms.get("shuffle"),
        )
    else:
        m, s, t = terms[None]
        identity_total = m + weights.lambda_ssim * s + weights.lambda_tv * t
        report = LossReport(TaskTerms(), TaskTerms(), TaskTerms(), identity_total)
    adam_step(params, state, lr, cfg.weight_decay)
    return report


# -- full run ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TransMEF
    checkpoint_path: str
    log_path: str
    reports: list


def _format(v: float) -> str:
    return f"{v:.9g}"


def run_training(cfg: TrainConfig, model_cfg: ModelConfig = None, images=None) -> TrainResult:
    """Train a model over a directory (or in-memory list) of images.

    Writes a CSV training log and checkpoints under ``cfg.out_dir``; the
    rolling checkpoint survives a numeric abort, so the last good weights
    are always on disk when NonFiniteError propagates.
    """
    from . import imio  # deferred: imio pulls in the png codec

    if model_cfg is None:
        model_cfg = ModelConfig(image_size=cfg.image_size, seed=cfg.seed,
                                use_transformer=cfg.use_transformer)
    elif model_cfg.use_transformer != cfg.use_transformer:
        model_cfg = replace(model_cfg, use_transformer=cfg.use_transformer)
    model = TransMEF(model_cfg)
    params = model.parameters()
    state = init_adam(params)

    if images is None:
        images = imio.ingest_dataset(cfg.dataset_dir, cfg.image_size, cfg.seed,
                                     mode=cfg.crop)
    else:
        images = [np.asarray(im, dtype=np.float32) for im in images]
    n = len(images)
    if n == 0:
        raise ValueError("dataset is empty")

    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.max_steps if cfg.max_steps > 0 else cfg.epochs * steps_per_epoch

    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, "train_log.csv")
    ckpt_path = os.path.join(cfg.out_dir, "model.tmef")
    rolling_path = os.path.join(cfg.out_dir, "checkpoint.tmef")

    reports = []
    step = 0
    with open(log_path, "w", newline="") as logf:
        writer = csv.writer(logf)
        writer.writerow(LOG_HEADER)
        epoch = 0
        while step < total_steps:
            order = np.arange(n)
            SplitMix64(derive(cfg.seed, STREAM_DATA, epoch)).shuffle(order)
            for start in range(0, n, cfg.batch_size):
                if step >= total_steps:
                    break
                batch = [images[i] for i in order[start:start + cfg.batch_size]]
                lr = cosine_lr(step, total_steps, cfg.lr0)
                report = train_step(model, batch, cfg, state, lr, step)
                reports.append(report)
                writer.writerow([step, _format(lr)] + [
                    _format(v) for v in (
                        report.gamma.mse, report.gamma.ssim_term, report.gamma.tv,
                        report.fourier.mse, report.fourier.ssim_term, report.fourier.tv,
                        report.shuffle.mse, report.shuffle.ssim_term, report.shuffle.tv,
                        report.total)])
                step += 1
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_weights(model, rolling_path)
            epoch += 1
    save_weights(model, ckpt_path)
    return TrainResult(model=model, checkpoint_path=ckpt_path,
                       log_path=log_path, reports=reports)
