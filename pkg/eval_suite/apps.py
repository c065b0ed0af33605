from django.apps import AppConfig


class EvalSuiteConfig(AppConfig):
    name = "eval_suite"
    verbose_name = "Robustness evaluation and analysis probes"
