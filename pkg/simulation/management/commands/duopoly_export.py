from simulation.management.base import DuopolyCommand
from simulation.services.export import export_run


class Command(DuopolyCommand):
    help = "Export a run's price series as CSV (round, price1, price2, pB, pM) plus a summary JSON"

    def add_arguments(self, parser):
        parser.add_argument("path", help="Run directory or its rounds.jsonl")
        parser.add_argument("out", help="Output CSV path; the summary is written beside it")

    def run(self, *args, **options):
        csv_path, summary_path = export_run(options["path"], options["out"])
        self.emit({"csv": str(csv_path), "summary": str(summary_path)})
