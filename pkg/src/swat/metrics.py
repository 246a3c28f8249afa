"""Per-epoch metrics records and the append-only CSV emitter."""

import os
from dataclasses import dataclass, fields


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    iter: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    avg_weight_sparsity: float
    avg_act_sparsity: float
    fwd_macs: int
    bwd_macs: int
    lr: float
    elapsed_seconds: float

    def validate(self):
        if not (0.0 <= self.avg_weight_sparsity <= 1.0
                and 0.0 <= self.avg_act_sparsity <= 1.0):
            raise ValueError("sparsities must lie in [0, 1]")
        return self


METRICS_COLUMNS = [f.name for f in fields(MetricsRecord)]


class MetricsWriter:
    """Appends one CSV row per record; writes the header exactly once."""

    def __init__(self, path):
        self.path = path
        if not os.path.exists(path):
            with open(path, "w") as f:
                f.write(",".join(METRICS_COLUMNS) + "\n")

    def append(self, record):
        record.validate()
        row = [repr(getattr(record, c)) if isinstance(getattr(record, c), float)
               else str(getattr(record, c)) for c in METRICS_COLUMNS]
        with open(self.path, "a") as f:
            f.write(",".join(row) + "\n")
