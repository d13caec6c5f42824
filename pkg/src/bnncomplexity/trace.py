"""Per-run training traces and their CSV serialization.

A trace holds the per-step records (one per optimizer update: batch
loss plus the complexity reading taken right after the update) and the
per-epoch aggregates the analysis consumes.  Epochs are 1-based;
``stop_epoch`` is the number of epochs actually run and ``best_epoch``
the 1-based epoch with the lowest validation loss.

Per-epoch CSV columns: ``epoch,train_loss[,val_loss],bdm,entropy,steps``
— the ``val_loss`` column is present only for runs trained with a
validation set.  Floats are serialized with ``repr`` so a rerun of the
same seeded run is byte-identical.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class RunTrace:
    run_id: str
    arch: tuple
    seed: int
    subset_id: int
    step_loss: np.ndarray      # (T,)
    step_bdm: np.ndarray       # (T,)
    step_entropy: np.ndarray   # (T,)
    step_epoch: np.ndarray     # (T,) 1-based epoch of each step
    epoch_train_loss: np.ndarray
    epoch_val_loss: np.ndarray | None   # None for validation-free runs
    epoch_bdm: np.ndarray
    epoch_entropy: np.ndarray
    epoch_steps: np.ndarray
    stop_epoch: int
    best_epoch: int
    test_accuracy: float | None = None
    per_matrix_last: tuple = field(default=(), repr=False)

    @property
    def has_validation(self) -> bool:
        return self.epoch_val_loss is not None

    def epoch_rows(self):
        for e in range(self.stop_epoch):
            row = {
                "epoch": e + 1,
                "train_loss": float(self.epoch_train_loss[e]),
                "bdm": float(self.epoch_bdm[e]),
                "entropy": float(self.epoch_entropy[e]),
                "steps": int(self.epoch_steps[e]),
            }
            if self.has_validation:
                row["val_loss"] = float(self.epoch_val_loss[e])
            yield row


def write_epoch_csv(trace: RunTrace, path) -> None:
    fields = ["epoch", "train_loss"]
    if trace.has_validation:
        fields.append("val_loss")
    fields += ["bdm", "entropy", "steps"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in trace.epoch_rows():
            writer.writerow(
                {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}
            )


def write_step_csv(trace: RunTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "batch_loss", "bdm", "entropy"])
        for t in range(len(trace.step_loss)):
            writer.writerow(
                [
                    t + 1,
                    int(trace.step_epoch[t]),
                    repr(float(trace.step_loss[t])),
                    repr(float(trace.step_bdm[t])),
                    repr(float(trace.step_entropy[t])),
                ]
            )


@dataclass(frozen=True)
class EpochSeriesRecord:
    """The per-epoch slice of one run, as read back from disk."""

    run_id: str
    train_loss: np.ndarray
    val_loss: np.ndarray | None
    bdm: np.ndarray
    entropy: np.ndarray

    @property
    def stop_epoch(self) -> int:
        return len(self.train_loss)

    @property
    def has_validation(self) -> bool:
        return self.val_loss is not None


def read_epoch_csv(path) -> EpochSeriesRecord:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    has_val = "val_loss" in (reader.fieldnames or [])
    return EpochSeriesRecord(
        run_id=Path(path).stem,
        train_loss=np.array([float(r["train_loss"]) for r in rows]),
        val_loss=np.array([float(r["val_loss"]) for r in rows]) if has_val else None,
        bdm=np.array([float(r["bdm"]) for r in rows]),
        entropy=np.array([float(r["entropy"]) for r in rows]),
    )
