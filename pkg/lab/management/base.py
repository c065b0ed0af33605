from contextlib import contextmanager

import sentry_sdk
from django.core.management.base import BaseCommand, CommandError

from attacks.exceptions import AttackError
from eval_suite.exceptions import EvaluationError
from grad_core.exceptions import GradCoreError
from lab.config import load_config
from lab.exceptions import ConfigError, DatasetFormatError
from lab.runner import ExperimentRunner
from perturb_dist.exceptions import DistributionError
from trainers.exceptions import TrainingError

CONFIG_ERROR = 2
NUMERIC_ERROR = 3
IO_ERROR = 4


@contextmanager
def exit_codes():
    """Translate lab failures into ``CommandError`` with the documented exit codes."""
    try:
        yield
    except ConfigError as e:
        raise CommandError(f"config error: {e}", returncode=CONFIG_ERROR) from e
    except (DatasetFormatError, OSError) as e:
        sentry_sdk.capture_exception(e)
        raise CommandError(f"I/O error: {e}", returncode=IO_ERROR) from e
    except (
        ArithmeticError,
        GradCoreError,
        DistributionError,
        AttackError,
        TrainingError,
        EvaluationError,
        ValueError,
    ) as e:
        sentry_sdk.capture_exception(e)
        raise CommandError(f"numeric failure: {e}", returncode=NUMERIC_ERROR) from e


class ExperimentCommand(BaseCommand):
    """A command driven by an experiment config; subclasses implement :meth:`run_stage`."""

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="experiment TOML file")
        parser.add_argument("--seed", type=int, help="replace the config's global seed")
        parser.add_argument("--out", help="output root; defaults to ADTLAB_OUTPUT_DIR")
        parser.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted-path assignment applied before validation; repeatable",
        )

    def runner(self, options) -> ExperimentRunner:
        overrides = list(options["override"])
        if options["seed"] is not None:
            overrides.append(f"seed={options['seed']}")
        config = load_config(options["config"], overrides)
        return ExperimentRunner(config, out=options["out"])

    def run_stage(self, runner: ExperimentRunner, options):
        raise NotImplementedError

    def handle(self, *args, **options):
        with exit_codes():
            runner = self.runner(options)
            self.run_stage(runner, options)
            self.stdout.write(self.style.SUCCESS(f"Artifacts in {runner.rundir.root}"))
