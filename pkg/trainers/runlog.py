import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

# Fields that legitimately differ between otherwise identical runs.
VOLATILE_FIELDS = frozenset({"wall_time"})


@dataclass
class RunLog:
    """Append-only per-step training records, mirrored to a JSON-lines file when a path is set."""

    path: Path | None = None
    records: list[dict] = field(default_factory=list)
    snapshot: str | None = None
    _started: float = field(default_factory=time.perf_counter, repr=False)

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    @property
    def step(self) -> int:
        return len(self.records)

    def append(self, **fields) -> dict:
        record = {"step": self.step, **fields}
        record["wall_time"] = round(time.perf_counter() - self._started, 6)
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def stable_records(self) -> list[dict]:
        """Records without timing fields, for comparing runs."""
        return [{k: v for k, v in r.items() if k not in VOLATILE_FIELDS} for r in self.records]

    def epoch_mean(self, key: str, epoch: int) -> float:
        values = [r[key] for r in self.records if r["epoch"] == epoch and r.get(key) is not None]
        if not values:
            raise KeyError(f"no {key!r} values logged in epoch {epoch}")
        return sum(values) / len(values)

    def finish(self, snapshot: str):
        self.snapshot = snapshot
        logger.info("runlog steps=%d snapshot=%s", self.step, snapshot)


def read_runlog(path) -> list[dict]:
    with Path(path).open() as f:
        return [json.loads(line) for line in f if line.strip()]
