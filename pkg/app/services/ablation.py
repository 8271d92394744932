"""
Ablation runner: trains every architecture mode on the same seeded data
with the same budget and compares them on the held-out split.
"""

import csv
import json
import logging
import time
from io import StringIO
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

from app.core.storage import atomic_write_text
from app.schemas.config import CLASS_NAMES, AblationMode, RunConfig
from app.schemas.reports import AblationRow, AblationSummary
from app.services.dataset import SyntheticDataset, gen_synthetic
from app.services.detection import DetectionService
from app.services.evalkit import evaluate
from app.services.trainer import train_toy

logger = logging.getLogger(__name__)

SMALL_OBJECT_CLASS = 0


def _csv_text(rows: Iterable[AblationRow]) -> str:
    buffer = StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        ["mode", "mean_ap"]
        + [f"ap_{name}" for name in CLASS_NAMES]
        + ["initial_loss", "final_loss", "parameters"]
    )
    for row in rows:
        writer.writerow(
            [row.mode, f"{row.mean_ap:.6f}"]
            + [f"{row.per_class_ap.get(i, 0.0):.6f}" for i in range(len(CLASS_NAMES))]
            + [f"{row.initial_loss:.8f}", f"{row.final_loss:.8f}", row.parameters]
        )
    return buffer.getvalue()


def run_mode(
    config: RunConfig,
    mode: AblationMode,
    train: SyntheticDataset,
    test: SyntheticDataset,
    output_dir: Path,
    iterations: Optional[int] = None,
) -> Tuple[AblationRow, float]:
    """Train, detect and evaluate one mode; returns the row and its wall-clock seconds."""
    mode_config = config.model_copy(update={"mode": mode})
    started = time.perf_counter()
    result = train_toy(mode_config, train, output_dir / mode.value.replace("+", "_"), iterations=iterations)
    dets = DetectionService.detect_in_chunks(result.detector, test.images, mode_config.nms)
    report = evaluate(dets, test.ground_truths, mode_config.eval)
    elapsed = time.perf_counter() - started

    smoothed = result.smoothed(mode_config.training.smoothing_window)
    row = AblationRow(
        mode=mode.value,
        mean_ap=report.mean_ap,
        per_class_ap=report.per_class_ap,
        initial_loss=smoothed[0],
        final_loss=smoothed[-1],
        parameters=sum(t.numel() for t in result.detector.named_tensors().values()),
        loss_curve=smoothed,
    )
    logger.info(f"Ablation {mode.value}: mAP {row.mean_ap:.4f}, loss {row.initial_loss:.4f} -> {row.final_loss:.4f}")
    return row, elapsed


def ablate(
    config: RunConfig,
    output_dir: Union[str, Path],
    iterations: Optional[int] = None,
    modes: Optional[Iterable[AblationMode]] = None,
) -> AblationSummary:
    """
    Run the ablation ladder and write ``ablation.csv`` and ``ablation_summary.json``.

    The CSV holds only seed-determined values; wall-clock timings and the
    small-object comparison go to the JSON summary.
    """
    output_dir = Path(output_dir)
    modes = list(modes or AblationMode)
    train = gen_synthetic(config.dataset, config.seed, "train")
    test = gen_synthetic(config.dataset, config.seed, "test")

    rows, timings = [], {}
    for mode in modes:
        row, elapsed = run_mode(config, mode, train, test, output_dir, iterations)
        rows.append(row)
        timings[mode.value] = round(elapsed, 3)

    by_mode = {row.mode: row for row in rows}
    single = by_mode.get(AblationMode.SINGLE_MAP.value)
    lffn = by_mode.get(AblationMode.LFFN.value)
    summary = AblationSummary(
        seed=config.seed,
        iterations=iterations if iterations is not None else config.training.iterations,
        rows=rows,
        wall_clock_seconds=timings,
        small_object_class=SMALL_OBJECT_CLASS,
    )
    if single is not None and lffn is not None:
        single_ap = single.per_class_ap.get(SMALL_OBJECT_CLASS, 0.0)
        lffn_ap = lffn.per_class_ap.get(SMALL_OBJECT_CLASS, 0.0)
        summary.small_object_single_map_ap = single_ap
        summary.small_object_lffn_ap = lffn_ap
        summary.small_object_lffn_at_least_single_map = lffn_ap >= single_ap

    atomic_write_text(output_dir / "ablation.csv", _csv_text(rows))
    atomic_write_text(
        output_dir / "ablation_summary.json",
        json.dumps(summary.model_dump(mode="json"), indent=2) + "\n",
    )
    return summary
