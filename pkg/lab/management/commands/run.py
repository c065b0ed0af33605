from lab.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Train, evaluate and (when enabled) probe in one go"

    def run_stage(self, runner, options):
        runner.run()
        self.stdout.write(runner.rundir.path("summary.txt").read_text())
