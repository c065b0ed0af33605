from pathlib import Path

from django.core.management.base import BaseCommand

from lab.management.base import exit_codes
from lab.runner import compare_runs


class Command(BaseCommand):
    help = "Side-by-side accuracy table over the report.csv of several run directories"

    def add_arguments(self, parser):
        parser.add_argument("run_dirs", nargs="+", type=Path)
        parser.add_argument("--output", type=Path, help="also write the table to this file")

    def handle(self, *args, **options):
        with exit_codes():
            table = compare_runs(options["run_dirs"])
            if options["output"] is not None:
                options["output"].write_text(table)
        self.stdout.write(table)
