import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from django.conf import settings

from attacks.dispatch import run_attack
from attacks.specs import AttackSpec
from eval_suite.exceptions import EvaluationError
from grad_core.nn import Network
from lab.datasets import Dataset
from lib.numeric import make_rng, spawn_streams
from perturb_dist.threat import ThreatModel

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("model", "attack", "accuracy", "n")
ROBUST_ROW = "robust"


def aggregate_robust_accuracy(correct: Sequence[np.ndarray]) -> tuple[float, np.ndarray]:
    """Per-example minimum over attacks: an example is robust iff every attack left it correct."""
    if len(correct) == 0:
        raise EvaluationError("the attack suite is empty")
    worst_case = np.logical_and.reduce([np.asarray(mask, dtype=bool) for mask in correct])
    return float(np.mean(worst_case)), worst_case


@dataclass
class EvalReport:
    model: str
    n: int
    natural_accuracy: float
    correct: dict[str, np.ndarray] = field(default_factory=dict)
    runtimes: dict[str, float] = field(default_factory=dict)

    @property
    def accuracies(self) -> dict[str, float]:
        return {label: float(np.mean(mask)) for label, mask in self.correct.items()}

    @property
    def worst_case(self) -> np.ndarray:
        return aggregate_robust_accuracy(list(self.correct.values()))[1]

    @property
    def robust_accuracy(self) -> float:
        return aggregate_robust_accuracy(list(self.correct.values()))[0]

    def rows(self) -> list[dict]:
        rows = [
            {"model": self.model, "attack": label, "accuracy": accuracy, "n": self.n}
            for label, accuracy in self.accuracies.items()
        ]
        robust = {"model": self.model, "attack": ROBUST_ROW, "accuracy": self.robust_accuracy}
        rows.append({**robust, "n": self.n})
        return rows

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n": self.n,
            "natural_accuracy": self.natural_accuracy,
            "robust_accuracy": self.robust_accuracy,
            "accuracies": self.accuracies,
            "runtime_s": self.runtimes,
            "worst_case": self.worst_case.astype(int).tolist(),
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def write_report_csv(reports: Sequence[EvalReport], path) -> Path:
    """One row per model and attack; accuracies printed with six decimals."""
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for report in reports:
            for row in report.rows():
                writer.writerow(
                    [row["model"], row["attack"], f"{row['accuracy']:.6f}", row["n"]]
                )
    return path


def read_report_csv(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        row["accuracy"] = float(row["accuracy"])
        row["n"] = int(row["n"])
    return rows


def _attack_chunks(spec, net, x, y, tm, stream, pool, generator, workers):
    chunks = [c for c in np.array_split(np.arange(len(y)), workers) if c.size]
    streams = spawn_streams(stream, len(chunks))

    def attack(chunk, chunk_rng):
        result = run_attack(spec, net, x[chunk], y[chunk], tm, chunk_rng, pool, generator)
        return result.success

    if len(chunks) == 1:
        return attack(chunks[0], streams[0])
    with ThreadPoolExecutor(max_workers=len(chunks)) as executor:
        # map keeps chunk order, so the reduction order is fixed by example index
        return np.concatenate(list(executor.map(attack, chunks, streams)))


def robust_accuracy(
    net: Network,
    dataset: Dataset,
    suite: Sequence[AttackSpec],
    tm: ThreatModel,
    rng=None,
    pool: tuple[np.ndarray, np.ndarray] | None = None,
    generator=None,
    workers: int | None = None,
    model: str = "model",
) -> EvalReport:
    """Run every attack of ``suite`` on every example and aggregate per example."""
    if not suite:
        raise EvaluationError("the attack suite is empty")
    if dataset.n == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    workers = max(1, workers if workers is not None else settings.ADTLAB_WORKERS)
    x, y = dataset.features, dataset.labels
    streams = spawn_streams(make_rng(rng), len(suite))
    report = EvalReport(model, dataset.n, float(np.mean(net.classify(x) == y)))
    for spec, stream in zip(suite, streams):
        started = time.perf_counter()
        success = _attack_chunks(spec, net, x, y, tm, stream, pool, generator, workers)
        report.correct[spec.label] = ~success
        report.runtimes[spec.label] = time.perf_counter() - started
        logger.info(
            "model=%s attack=%s accuracy=%.4f runtime_s=%.2f",
            model,
            spec.label,
            float(np.mean(~success)),
            report.runtimes[spec.label],
        )
    return report


def transfer_eval(
    source: Network,
    target: Network,
    dataset: Dataset,
    spec: AttackSpec,
    tm: ThreatModel,
    rng=None,
    pool: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """Accuracy of ``target`` on adversarial examples crafted against ``source``."""
    if source.input_dim != target.input_dim:
        raise EvaluationError(
            f"source takes {source.input_dim} inputs, target takes {target.input_dim}"
        )
    if dataset.n == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    x, y = dataset.features, dataset.labels
    result = run_attack(spec, source, x, y, tm, make_rng(rng), pool)
    return float(np.mean(target.classify(result.adversarial(x)) == y))
