from simulation.management.base import DuopolyCommand
from simulation.services import engine
from simulation.services.llm_client import IoMode


class Command(DuopolyCommand):
    help = "Continue a run from its checkpoint; only rounds, schedules and io settings may change"

    def add_arguments(self, parser):
        parser.add_argument("checkpoint", help="Path to <run_dir>/checkpoint.json")
        parser.add_argument("--out-dir", dest="out_dir")
        parser.add_argument("--rounds", type=int)
        parser.add_argument("--io", choices=IoMode.values)
        parser.add_argument("--cassette")
        parser.add_argument("--overrides")

    def run(self, *args, **options):
        overrides = {**self.parse_overrides(options.get("overrides")), **self.flag_overrides(options)}
        result = engine.resume(options["checkpoint"], overrides=overrides, out_dir=options.get("out_dir"))
        self.emit(result.to_dict())
