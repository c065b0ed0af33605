import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "adtlab.settings")
django.setup()
