"""Training the toy denoiser on the standard noise-prediction loss."""

import copy
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import polars as pl
import torch
import torch.nn.functional as F

from ..errors import FormatError, ParameterError, TrainingError
from ..schedule import NoiseSchedule
from ..tensor import LatentTensor, load_latent, save_latent
from .toy import ToyDenoiser

logger = logging.getLogger(__name__)

LABELS_FILE = "labels.csv"


@dataclass(frozen=True)
class TrainingExample:
    """One clean latent and its prompt id."""

    x_0: LatentTensor
    label: int


@dataclass(frozen=True)
class TrainingReport:
    """Per-step losses of a training run, in a ``(step, loss)`` DataFrame."""

    losses: pl.DataFrame

    @property
    def initial_loss(self) -> float:
        return float(self.losses.get_column("loss")[0])

    @property
    def final_loss(self) -> float:
        return float(self.losses.get_column("loss")[-1])

    def window_mean(self, start: int, length: int) -> float:
        """Mean loss over `length` steps from `start` (negative counts from the end)."""
        return float(self.losses.get_column("loss").slice(start, length).mean())

    def write_csv(self, path: str | os.PathLike[str]) -> None:
        self.losses.write_csv(path)


def make_blob_dataset(
    n: int,
    shape: tuple[int, int, int],
    seed: int,
    n_labels: int = 2,
) -> list[TrainingExample]:
    """Images of one Gaussian blob each, with the prompt id selecting the blob's sign.

    Blob centres and widths are random; label ``k`` scales the blob by
    ``1 - 2 * (k % 2)`` and shifts it by ``k // 2`` channels.
    """
    if n < 1:
        raise ParameterError(f"dataset size must be positive, got {n}")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    examples = []
    for i in range(n):
        label = i % n_labels
        cy, cx = rng.uniform(0.25, 0.75, size=2) * (h, w)
        width = rng.uniform(0.1, 0.2) * min(h, w)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        x0 = np.zeros(shape, dtype=np.float32)
        x0[(label // 2) % c] = (1 - 2 * (label % 2)) * blob
        examples.append(TrainingExample(LatentTensor(x0), label))
    return examples


def save_dataset(examples: list[TrainingExample], directory: str | os.PathLike[str]) -> None:
    """Write a dataset directory: one PNPL file per example plus ``labels.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i, ex in enumerate(examples):
        name = f"x{i:04d}.pnpl"
        save_latent(ex.x_0, d / name)
        files.append(name)
    pl.DataFrame({"file": files, "label": [ex.label for ex in examples]}).write_csv(
        d / LABELS_FILE
    )


def load_dataset(directory: str | os.PathLike[str]) -> list[TrainingExample]:
    """Read a dataset directory written by :func:`save_dataset`.

    Raises
    ------
    FileNotFoundError
        The directory or its ``labels.csv`` is missing.
    FormatError
        ``labels.csv`` is empty or lacks the ``file`` and ``label`` columns.
    """
    d = Path(directory)
    labels_path = d / LABELS_FILE
    if not labels_path.exists():
        raise FileNotFoundError(f"file not found: {labels_path}")
    try:
        labels = pl.read_csv(labels_path)
    except (pl.exceptions.NoDataError, pl.exceptions.ComputeError) as e:
        raise FormatError(f"{labels_path}: unreadable labels table: {e}") from e
    if not {"file", "label"} <= set(labels.columns):
        raise FormatError(f"{labels_path} must have 'file' and 'label' columns")
    return [
        TrainingExample(load_latent(d / row["file"]), int(row["label"]))
        for row in labels.iter_rows(named=True)
    ]


def _batch_tensors(
    model: ToyDenoiser, dataset: list[TrainingExample]
) -> tuple[torch.Tensor, torch.Tensor]:
    if not dataset:
        raise TrainingError("empty dataset")
    shapes = {ex.x_0.shape for ex in dataset}
    if len(shapes) != 1:
        raise TrainingError(f"examples differ in shape: {sorted(shapes)}")
    (shape,) = shapes
    if shape != model.config.shape:
        raise TrainingError(f"examples have shape {shape}, model expects {model.config.shape}")
    dim = model.config.cond_dim
    if bad := [ex.label for ex in dataset if not 0 <= ex.label < dim]:
        raise TrainingError(f"labels {sorted(set(bad))} outside 0..{dim - 1}")
    x0 = torch.from_numpy(np.stack([ex.x_0.to_numpy() for ex in dataset]))
    cond = F.one_hot(torch.tensor([ex.label for ex in dataset]), dim).to(torch.float32)
    return x0, cond


def _noised_batch(
    x0: torch.Tensor,
    cond: torch.Tensor,
    alpha_bar: torch.Tensor,
    T: int,
    batch_size: int,
    gen: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    idx = torch.randint(len(x0), (batch_size,), generator=gen)
    t = torch.randint(1, T + 1, (batch_size,), generator=gen)
    eps = torch.randn((batch_size, *x0.shape[1:]), generator=gen, dtype=x0.dtype)
    ab = alpha_bar[t].to(x0.dtype).view(-1, 1, 1, 1)
    x_t = ab.sqrt() * x0[idx] + (1 - ab).sqrt() * eps
    return x_t, t, cond[idx], eps


def train_toy(
    model: ToyDenoiser,
    dataset: list[TrainingExample],
    sched: NoiseSchedule,
    steps: int,
    lr: float,
    seed: int,
    *,
    batch_size: int = 16,
    log_every: int = 100,
) -> TrainingReport:
    """Train `model` in place with plain SGD on ``E || eps - eps_theta(x_t, t, c) ||^2``.

    Each step samples a batch of examples, timesteps uniform in ``1..T`` and Gaussian
    noise from a generator seeded with `seed`, so equal arguments give bit-identical runs.

    Parameters
    ----------
    model : ToyDenoiser
        Network to train.
    dataset : list[TrainingExample]
        Clean latents with prompt ids; all of the model's shape.
    sched : NoiseSchedule
        Schedule used to noise the examples.
    steps, lr, seed : int, float, int
        Number of SGD steps, learning rate, and RNG seed.
    batch_size : int, optional
        Examples per step, by default 16.
    log_every : int, optional
        Log progress every this many steps, by default 100.

    Returns
    -------
    TrainingReport
        The loss at every step, measured before that step's update.

    Raises
    ------
    TrainingError
        Empty or inconsistent dataset, or a non-finite loss (with the step index).
    """
    if steps < 1 or not lr > 0 or batch_size < 1:
        raise ParameterError(f"need steps >= 1, lr > 0, batch_size >= 1; got {steps}, {lr}, {batch_size}")
    x0, cond = _batch_tensors(model, dataset)
    alpha_bar = torch.from_numpy(np.array(sched.alpha_bar))
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.SGD(model.parameters(), lr=lr)

    model.train()
    losses = []
    for step in range(steps):
        x_t, t, c, eps = _noised_batch(x0, cond, alpha_bar, sched.T, batch_size, gen)
        loss = F.mse_loss(model(x_t, t, c), eps)
        if not torch.isfinite(loss):
            raise TrainingError("non-finite loss", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and (step % log_every == 0 or step == steps - 1):
            logger.info("step %d/%d loss %.5f", step + 1, steps, losses[-1])
    model.eval()

    return TrainingReport(
        pl.DataFrame({"step": np.arange(steps), "loss": np.array(losses, dtype=np.float64)})
    )


def gradient_check(
    model: ToyDenoiser,
    dataset: list[TrainingExample],
    sched: NoiseSchedule,
    *,
    n_params: int = 5,
    seed: int = 0,
    batch_size: int = 4,
    h: float = 1e-6,
) -> pl.DataFrame:
    """Compare autograd gradients of the training loss with central differences.

    The check runs on a float64 copy of `model` with one fixed noised batch, at
    `n_params` scalar parameters chosen at random.

    Returns
    -------
    pl.DataFrame
        Columns ``parameter``, ``index``, ``analytic``, ``numeric``, ``rel_error``.
    """
    x0, cond = _batch_tensors(model, dataset)
    model64 = copy.deepcopy(model).double().train()
    gen = torch.Generator().manual_seed(seed)
    alpha_bar = torch.from_numpy(np.array(sched.alpha_bar))
    x_t, t, c, eps = _noised_batch(x0.double(), cond.double(), alpha_bar, sched.T, batch_size, gen)

    def loss_fn() -> torch.Tensor:
        return F.mse_loss(model64(x_t, t, c), eps)

    model64.zero_grad()
    loss_fn().backward()

    params = dict(model64.named_parameters())
    names = sorted(params)
    sizes = np.array([params[n].numel() for n in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    rows = []
    with torch.no_grad():
        for f in sorted(flat):
            which = int(np.searchsorted(offsets, f, side="right") - 1)
            name = names[which]
            index = int(f - offsets[which])
            p = params[name].view(-1)
            analytic = float(params[name].grad.view(-1)[index])
            orig = float(p[index])
            p[index] = orig + h
            up = float(loss_fn())
            p[index] = orig - h
            down = float(loss_fn())
            p[index] = orig
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric), 1e-6)
            rows.append(
                {
                    "parameter": name,
                    "index": index,
                    "analytic": analytic,
                    "numeric": numeric,
                    "rel_error": abs(analytic - numeric) / scale,
                }
            )
    return pl.DataFrame(rows)
