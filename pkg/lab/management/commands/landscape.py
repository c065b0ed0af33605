from lab.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Probe loss surfaces, Hessian curvature and perturbation diversity"

    def run_stage(self, runner, options):
        probes = runner.landscape()
        self.stdout.write(
            f"mean dominant Hessian eigenvalue {probes['hessian_mean']:.4f}; "
            f"diversity {probes['diversity_distribution']:.4f} (distribution) "
            f"vs {probes['diversity_pgd']:.4f} (pgd)"
        )
