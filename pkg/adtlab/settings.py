from pathlib import Path

import environ

env = environ.Env()

SENTRY_DSN = env("SENTRY_DSN", default=None)

if SENTRY_DSN is not None:
    import sentry_sdk

    sentry_sdk.init(
        dsn=SENTRY_DSN,
        traces_sample_rate=0.0,
        send_default_pii=False,
    )

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

READ_DOT_ENV_FILE = env.bool("DJANGO_READ_DOT_ENV_FILE", default=False)
if READ_DOT_ENV_FILE:
    # OS environment variables take precedence over variables from .env
    env.read_env(BASE_DIR / ".env")

# Only used by Django internals; nothing here is served over HTTP.
SECRET_KEY = env(
    "DJANGO_SECRET_KEY",
    default="django-insecure-adtlab-desk-scale-experiments-only",
)

DEBUG = env.bool("DEBUG", default=False)

INSTALLED_APPS = [
    "grad_core",
    "perturb_dist",
    "attacks",
    "trainers",
    "eval_suite",
    "lab",
]

# Every artifact is a file under ADTLAB_OUTPUT_DIR; there is no database.
DATABASES = {}

USE_TZ = True
TIME_ZONE = "UTC"

# Experiment settings

ADTLAB_OUTPUT_DIR = Path(env("ADTLAB_OUTPUT_DIR", default=str(BASE_DIR / "runs")))
ADTLAB_LOG_LEVEL = env("ADTLAB_LOG_LEVEL", default="INFO")
ADTLAB_FLOAT_DTYPE = env("ADTLAB_FLOAT_DTYPE", default="float64")
ADTLAB_WORKERS = env.int("ADTLAB_WORKERS", default=1)

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "keyvalue": {
            "format": "ts=%(asctime)s level=%(levelname)s logger=%(name)s %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "keyvalue",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": "WARNING",
    },
    "loggers": {
        app: {"handlers": ["console"], "level": ADTLAB_LOG_LEVEL, "propagate": False}
        for app in ("grad_core", "perturb_dist", "attacks", "trainers", "eval_suite", "lab", "lib")
    },
}
