from lab.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Run attacks against a trained classifier on the test split"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            "--attack",
            action="append",
            dest="attacks",
            help="configured attack or preset name; repeatable, defaults to the eval suite",
        )

    def run_stage(self, runner, options):
        for name in options["attacks"] or runner.config.eval.suite:
            outcome = runner.attack(name)
            self.stdout.write(f"{outcome['attack']}: accuracy {outcome['accuracy']:.4f}")
