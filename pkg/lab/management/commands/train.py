from lab.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Train the configured classifier and write its snapshots and run log"

    def run_stage(self, runner, options):
        result = runner.train()
        last = result.runlog.records[-1]
        self.stdout.write(
            f"{result.spec.method}: {result.runlog.step} steps, final loss {last['loss']:.4f}"
        )
