from lab.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Evaluate per-example robust accuracy over the configured attack suite"

    def run_stage(self, runner, options):
        report = runner.evaluate()
        self.stdout.write(runner.rundir.path("summary.txt").read_text())
        self.stdout.write(f"robust accuracy {report.robust_accuracy:.4f}")
