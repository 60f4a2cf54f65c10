from django.core.management.base import CommandError

from simulation.management.base import DuopolyCommand
from simulation.services.verify import verify_run


class Command(DuopolyCommand):
    help = "Re-check a finished run: log shape, demand and profit, and the recorded detector verdicts"

    def add_arguments(self, parser):
        parser.add_argument("path", help="Run directory or its rounds.jsonl")

    def run(self, *args, **options):
        report = verify_run(options["path"])
        self.emit(report.to_dict())
        if not report.passed:
            failed = ", ".join(check.name for check in report.checks if not check.passed)
            raise CommandError(f"Verification failed: {failed}", returncode=1)
        self.stderr.write(self.style.SUCCESS(f"Verified {report.run_dir}"))
