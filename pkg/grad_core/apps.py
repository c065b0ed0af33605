from django.apps import AppConfig


class GradCoreConfig(AppConfig):
    name = "grad_core"
    verbose_name = "Reverse-mode autodiff, layers and optimizers"
