from django.apps import AppConfig


class PerturbDistConfig(AppConfig):
    name = "perturb_dist"
    verbose_name = "Adversarial perturbation distributions"
