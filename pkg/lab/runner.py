"""Experiment stages: train, attack, eval, landscape and cross-run reports.

Each stage reads what earlier stages left in the run directory, so the stages
can run in one process (:meth:`ExperimentRunner.run`) or as separate commands.
"""

import csv
import logging
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from django.conf import settings

from attacks.dispatch import run_attack
from attacks.distributional import AmortizedGenerator
from eval_suite.exceptions import NonConvergenceWarning
from eval_suite.probes import (
    attack_samples,
    diversity_l2,
    dominant_hessian_eigenvalue,
    loss_surface_grid,
    pca_project,
)
from eval_suite.report import EvalReport, read_report_csv, robust_accuracy, write_report_csv
from grad_core.nn import Network
from lab.config import ExperimentConfig, dump_config
from lab.datasets import Dataset
from lib.numeric import make_rng, spawn_streams
from lib.rundir import RunDirectory
from perturb_dist.explicit import explicit_generator
from perturb_dist.implicit import ImplicitSampler
from trainers.loops import TrainResult, train
from trainers.runlog import RunLog
from trainers.snapshot import load_network, write_snapshot
from trainers.specs import Method

logger = logging.getLogger(__name__)

CLASSIFIER_SNAPSHOT = "classifier.snap"
GENERATOR_SNAPSHOT = "generator.snap"


@dataclass(frozen=True)
class Splits:
    train: Dataset
    test: Dataset


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, out: Path | None = None):
        self.config = config
        self.out = Path(out or config.out or settings.ADTLAB_OUTPUT_DIR)
        self.rundir = RunDirectory(self.out, config.name)
        self._splits = None
        # stage streams are fixed by the seed alone, whichever stages run
        self.attack_rng, self.eval_rng, self.probe_rng = spawn_streams(make_rng(config.seed), 3)

    @property
    def splits(self) -> Splits:
        if self._splits is None:
            dataset = self.config.dataset.load()
            train_set, test_set = dataset.split(
                self.config.dataset.test_fraction, self.config.dataset.split_seed
            )
            logger.info(
                "dataset=%s train=%d test=%d dim=%d classes=%d",
                dataset.name,
                train_set.n,
                test_set.n,
                dataset.dim,
                dataset.num_classes,
            )
            self._splits = Splits(train_set, test_set)
        return self._splits

    @contextmanager
    def stage(self, name: str):
        logger.info("stage=%s run=%s", name, self.rundir.root)
        try:
            yield
        except Exception as e:
            self.rundir.fail_stage(name, e)
            raise
        self.rundir.finish_stage(name)

    @property
    def pool(self) -> tuple[np.ndarray, np.ndarray]:
        return self.splits.train.features, self.splits.train.labels

    def _classifier_template(self) -> Network:
        dataset = self.splits.train
        dims = [dataset.dim, *self.config.train.hidden, dataset.num_classes]
        return Network.zeros(dims)

    def _generator_template(self):
        spec, dim = self.config.train, self.splits.train.dim
        if spec.method is Method.ADT_EXP_AM:
            return explicit_generator(dim, 0, hidden=spec.generator_hidden)
        if spec.method is Method.ADT_IMP_AM:
            return ImplicitSampler.build(dim, 0, z_dim=spec.z_dim, hidden=spec.generator_hidden)
        return None

    def train(self) -> TrainResult:
        with self.stage("train"):
            self.rundir.write_text("config.toml", dump_config(self.config))
            runlog = RunLog(self.rundir.record("runlog.jsonl"))
            result = train(self.config.train_spec(), self.splits.train, runlog)
            for stem, params in result.snapshots().items():
                write_snapshot(self.rundir.record(f"{stem}.snap"), params)
            steps = result.generator.trained_steps if result.generator is not None else 0
            self.rundir.set("generator_steps", steps)
            runlog.finish(CLASSIFIER_SNAPSHOT)
        return result

    def classifier(self) -> Network:
        if not self.rundir.has(CLASSIFIER_SNAPSHOT):
            raise FileNotFoundError(
                f"{self.rundir.path(CLASSIFIER_SNAPSHOT)} is missing; run the train stage first"
            )
        return load_network(self.rundir.path(CLASSIFIER_SNAPSHOT), self._classifier_template())

    def generator(self) -> AmortizedGenerator | None:
        template = self._generator_template()
        if template is None or not self.rundir.has(GENERATOR_SNAPSHOT):
            return None
        path = self.rundir.path(GENERATOR_SNAPSHOT)
        if isinstance(template, ImplicitSampler):
            model = ImplicitSampler(load_network(path, template.generator), template.z_dim)
        else:
            model = load_network(path, template)
        return AmortizedGenerator(model, trained_steps=self.rundir.manifest["generator_steps"])

    def attack(self, name: str) -> dict:
        """Run one configured or preset attack on the test split."""
        with self.stage(f"attack:{name}"):
            spec = self.config.attack(name)
            test = self.splits.test
            result = run_attack(
                spec,
                self.classifier(),
                test.features,
                test.labels,
                self.config.threat_model,
                self.attack_rng,
                self.pool,
                self.generator(),
            )
            outcome = {
                "attack": spec.label,
                "accuracy": result.accuracy,
                "n": test.n,
                "queries": result.queries,
                "max_abs_delta": float(np.max(np.abs(result.delta), initial=0.0)),
            }
            self.rundir.write_json(f"attack_{spec.label}.json", outcome)
        return outcome

    def evaluate(self) -> EvalReport:
        with self.stage("eval"):
            report = robust_accuracy(
                self.classifier(),
                self.splits.test,
                self.config.suite(),
                self.config.threat_model,
                rng=self.eval_rng,
                pool=self.pool,
                generator=self.generator(),
                model=self.config.name,
            )
            write_report_csv([report], self.rundir.record("report.csv"))
            report.write_json(self.rundir.record("report.json"))
            self.rundir.write_text("summary.txt", summary_table(report))
        return report

    def landscape(self) -> dict:
        """Loss surfaces, Hessian curvature, and the diversity/PCA comparison at test points."""
        with self.stage("landscape"), warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NonConvergenceWarning)
            probes = self._probes()
            probes["non_converged"] = sum(
                issubclass(w.category, NonConvergenceWarning) for w in caught
            )
            self.rundir.write_json("probes.json", probes)
        return probes

    def _probes(self) -> dict:
        net, test, tm = self.classifier(), self.splits.test, self.config.threat_model
        options = self.config.eval
        surface_rng, hessian_rng, sample_rng = spawn_streams(self.probe_rng, 3)

        with self.rundir.record("landscape.csv").open("w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["point", "a", "b", "loss"])
            for point in range(min(options.landscape_points, test.n)):
                surface = loss_surface_grid(
                    net,
                    test.features[point],
                    test.labels[point],
                    tm,
                    options.resolution,
                    surface_rng,
                )
                for i, a in enumerate(surface.offsets):
                    for j, b in enumerate(surface.offsets):
                        writer.writerow([point, f"{a:.6f}", f"{b:.6f}", surface.values[i, j]])

        eigenvalues = [
            dominant_hessian_eigenvalue(
                net, test.features[i], test.labels[i], options.hessian_iters, rng=hessian_rng
            )
            for i in range(min(options.probe_points, test.n))
        ]

        distribution, endpoints = attack_samples(
            net,
            test.features[0],
            test.labels[0],
            tm,
            count=options.diversity_samples,
            rng=sample_rng,
            lam=self.config.train.inner.lam,
        )
        projection = pca_project(np.concatenate([distribution, endpoints]))
        with self.rundir.record("pca.csv").open("w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["source", "pc1", "pc2"])
            sources = ["distribution"] * len(distribution) + ["pgd"] * len(endpoints)
            for source, (pc1, pc2) in zip(sources, projection.coordinates):
                writer.writerow([source, pc1, pc2])

        return {
            "hessian_eigenvalues": eigenvalues,
            "hessian_mean": float(np.mean(eigenvalues)),
            "diversity_distribution": diversity_l2(distribution),
            "diversity_pgd": diversity_l2(endpoints),
            "explained_variance": projection.explained_variance.tolist(),
        }

    def run(self) -> EvalReport:
        self.train()
        report = self.evaluate()
        if self.config.eval.probes:
            self.landscape()
        return report


def summary_table(report: EvalReport) -> str:
    width = max(len(label) for label in [*report.accuracies, "natural accuracy"])
    lines = [f"model: {report.model}  n={report.n}", ""]
    lines.append(f"{'natural accuracy':<{width}}  {report.natural_accuracy:.4f}")
    for label, accuracy in report.accuracies.items():
        lines.append(f"{label:<{width}}  {accuracy:.4f}")
    lines.append(f"{'robust':<{width}}  {report.robust_accuracy:.4f}")
    return "\n".join(lines) + "\n"


def compare_runs(run_dirs: Sequence[Path]) -> str:
    """Side-by-side ``attack x model`` accuracy table built from each run's report.csv."""
    columns = {}
    for run_dir in run_dirs:
        path = Path(run_dir) / "report.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path} is missing; run the eval stage first")
        rows = read_report_csv(path)
        model = rows[0]["model"] if rows else Path(run_dir).name
        if model in columns:
            model = str(run_dir)
        columns[model] = {row["attack"]: row["accuracy"] for row in rows}
    attacks = []
    for accuracies in columns.values():
        attacks.extend(a for a in accuracies if a not in attacks)
    # the robust row closes the table
    if "robust" in attacks:
        attacks.remove("robust")
        attacks.append("robust")

    models = list(columns)
    width = max(len(a) for a in ["attack", *attacks])
    cells = [max(len(m), 8) for m in models]
    header = "  ".join([f"{'attack':<{width}}", *(f"{m:>{c}}" for m, c in zip(models, cells))])
    lines = [header]
    for attack in attacks:
        values = []
        for model, cell in zip(models, cells):
            accuracy = columns[model].get(attack)
            text = "-" if accuracy is None else f"{accuracy:.4f}"
            values.append(f"{text:>{cell}}")
        lines.append("  ".join([f"{attack:<{width}}", *values]))
    return "\n".join(lines) + "\n"
