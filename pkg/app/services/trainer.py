"""
Toy training loop: SGD with momentum over the joint detection loss.

One seeded generator drives the run in a fixed order per iteration: image
choice, then AQM pooling samples, then the anchor minibatch. Its state is
stored in every checkpoint, so a resumed run continues bit-exactly.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from io import StringIO
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch

from app.core.errors import ConfigurationError, DataError, NumericError
from app.core.storage import atomic_write_text
from app.kernels.tensor import make_generator, save_tensor
from app.models.detector import LffnDetector
from app.schemas.config import OptimizerConfig, RunConfig
from app.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.services.dataset import SyntheticDataset

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["iteration", "classification", "localization", "total", "smoothed_total"]
TRAIN_SEED_OFFSET = 1


class SgdMomentum:
    """
    v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v

    Parameters are updated in place. A parameter without a gradient in a
    step is treated as having a zero gradient.
    """

    def __init__(
        self,
        params: Dict[str, torch.Tensor],
        config: OptimizerConfig,
        velocities: Optional[Dict[str, torch.Tensor]] = None,
    ):
        self.params = params
        self.config = config
        self.velocities = {name: torch.zeros_like(p) for name, p in params.items()}
        for name, v in (velocities or {}).items():
            if name not in self.velocities or self.velocities[name].shape != v.shape:
                raise ConfigurationError(f"optimizer state for '{name}' does not match the model")
            self.velocities[name].copy_(v)

    def step(self, grads: Dict[str, torch.Tensor]) -> None:
        lr, momentum, decay = self.config.learning_rate, self.config.momentum, self.config.weight_decay
        for name, p in self.params.items():
            g = grads.get(name)
            g = torch.zeros_like(p) if g is None else g
            if decay:
                g = g + decay * p
            v = self.velocities[name]
            v.mul_(momentum).add_(g)
            if lr:
                p.sub_(lr * v)


@dataclass
class TrainResult:
    detector: LffnDetector
    checkpoint_path: Path
    log_path: Path
    history: List[List[float]] = field(default_factory=list)

    def smoothed(self, window: int) -> List[float]:
        return smoothed_totals([row[3] for row in self.history], window)


def smoothed_totals(totals: List[float], window: int) -> List[float]:
    """Trailing mean over at most ``window`` values."""
    out = []
    for i in range(len(totals)):
        chunk = totals[max(0, i + 1 - window):i + 1]
        out.append(sum(chunk) / len(chunk))
    return out


def write_loss_log(history: List[List[float]], window: int, path: Union[str, Path]) -> Path:
    smoothed = smoothed_totals([row[3] for row in history], window)
    buffer = StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row, smooth in zip(history, smoothed):
        writer.writerow([int(row[0])] + [f"{v:.8f}" for v in row[1:4]] + [f"{smooth:.8f}"])
    return atomic_write_text(path, buffer.getvalue())


def _dump_diagnostic(output_dir: Path, iteration: int, image_id: int, image: torch.Tensor, error: Exception) -> Path:
    target = output_dir / f"diagnostic_iter{iteration}"
    save_tensor(target / "image.lfft", image)
    atomic_write_text(
        target / "report.json",
        json.dumps({"iteration": iteration, "image_id": image_id, "error": str(error)}, indent=2) + "\n",
    )
    return target


def train_toy(
    config: RunConfig,
    dataset: SyntheticDataset,
    output_dir: Union[str, Path],
    iterations: Optional[int] = None,
    resume: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Train the toy detector with batch size 1.

    Args:
        config: Run configuration
        dataset: Training split
        output_dir: Receives checkpoints, ``final.ckpt`` and ``loss_log.csv``
        iterations: Overrides config.training.iterations
        resume: Checkpoint to continue from

    Raises:
        NumericError: Non-finite loss (a diagnostic dump is written first)
    """
    if len(dataset) == 0:
        raise DataError("training split is empty")
    output_dir = Path(output_dir)
    total_iterations = iterations if iterations is not None else config.training.iterations

    if resume is not None:
        checkpoint = load_checkpoint(resume)
        detector = checkpoint.to_detector(config)
        generator = checkpoint.generator() or make_generator(config.seed + TRAIN_SEED_OFFSET)
        velocities = checkpoint.velocities()
        history = [list(row) for row in checkpoint.history]
        start = checkpoint.iteration
        logger.info(f"Resuming from {resume} at iteration {start}")
    else:
        detector = LffnDetector.initialize(config, make_generator(config.seed))
        generator = make_generator(config.seed + TRAIN_SEED_OFFSET)
        velocities, history, start = None, [], 0

    optimizer = SgdMomentum(detector.named_tensors(), config.optimizer, velocities)
    window = config.training.smoothing_window
    checkpoint_path = output_dir / "final.ckpt"

    for iteration in range(start + 1, total_iterations + 1):
        image_id = int(torch.randint(0, len(dataset), (1,), generator=generator))
        image = dataset.images[image_id:image_id + 1]
        boxes, classes = dataset.boxes_for(image_id)
        try:
            breakdown, grads = detector.loss_and_grads(image, boxes, classes, generator)
        except NumericError as e:
            where = _dump_diagnostic(output_dir, iteration, image_id, image, e)
            logger.error(f"Non-finite loss at iteration {iteration} (image {image_id}); diagnostic in {where}")
            raise NumericError(f"iteration {iteration}, image {image_id}: {e.message}; diagnostic in {where}") from e
        optimizer.step(grads)
        history.append([iteration, breakdown.classification, breakdown.localization, breakdown.total])

        if iteration % 10 == 0 or iteration == total_iterations:
            smooth = smoothed_totals([row[3] for row in history], window)[-1]
            logger.info(f"iter {iteration}: total {breakdown.total:.4f} (smoothed {smooth:.4f})")
        if iteration % config.training.checkpoint_every == 0 or iteration == total_iterations:
            state = Checkpoint.from_state(detector, iteration, optimizer.velocities, generator, history)
            save_checkpoint(state, output_dir / f"checkpoint_{iteration:06d}.ckpt")
            save_checkpoint(state, checkpoint_path)

    if start >= total_iterations:
        save_checkpoint(Checkpoint.from_state(detector, start, optimizer.velocities, generator, history), checkpoint_path)
    log_path = write_loss_log(history, window, output_dir / "loss_log.csv")
    return TrainResult(detector, checkpoint_path, log_path, history)
