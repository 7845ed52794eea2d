"""Shared training-loop helpers: checkpoint selection and LR schedules."""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint

SELECTION_TOLERANCE = 0.02  # "within 2% of the minimum validation loss"


class EpochSelector:
    """Selects the last epoch whose validation loss is within 2% of the minimum.

    Snapshots are spilled to a temp directory; anything that could still
    qualify (val <= 1.02 * running minimum) is kept, and the final choice is
    resolved once all epochs are seen.
    """

    def __init__(self):
        self._dir = Path(tempfile.mkdtemp(prefix="ncsel_"))
        self._losses: dict[int, float] = {}
        self._min = math.inf

    def offer(self, epoch: int, val_loss: float, arrays: dict[str, np.ndarray]) -> None:
        if not math.isfinite(val_loss):
            raise RuntimeError(f"non-finite validation loss at epoch {epoch}")
        self._min = min(self._min, val_loss)
        if val_loss <= (1.0 + SELECTION_TOLERANCE) * self._min:
            save_checkpoint(self._dir / f"epoch{epoch}.ckpt", arrays, {"val_loss": val_loss})
            self._losses[epoch] = val_loss

    def resolve(self) -> tuple[int, float, dict[str, np.ndarray]]:
        if not self._losses:
            raise RuntimeError("no epochs were offered to the selector")
        cutoff = (1.0 + SELECTION_TOLERANCE) * self._min
        best = max(e for e, v in self._losses.items() if v <= cutoff)
        arrays, meta = load_checkpoint(self._dir / f"epoch{best}.ckpt")
        for f in self._dir.glob("*.ckpt"):
            f.unlink()
        return best, float(meta["val_loss"]), arrays


def warmup_cosine_lr(
    step: int,
    total_steps: int,
    warmup_steps: int,
    start_lr: float,
    peak_lr: float,
    floor_lr: float,
) -> float:
    """Linear warmup from start_lr to peak_lr, then cosine decay to floor_lr."""
    if warmup_steps > 0 and step < warmup_steps:
        frac = step / warmup_steps
        return start_lr + frac * (peak_lr - start_lr)
    span = max(total_steps - warmup_steps, 1)
    frac = min((step - warmup_steps) / span, 1.0)
    return floor_lr + 0.5 * (peak_lr - floor_lr) * (1.0 + math.cos(math.pi * frac))


def require_finite(terms: dict[str, float], context: str) -> None:
    """Abort with the offending term named when any loss term is non-finite."""
    for name, value in terms.items():
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite loss term {name!r} ({value}) during {context}")
