from simulation.management.base import DuopolyCommand
from simulation.services.config import list_presets, load_preset


class Command(DuopolyCommand):
    help = "List the bundled experiment-group presets, or show one resolved row"

    def add_arguments(self, parser):
        parser.add_argument("--show", metavar="NAME[:ROW]", help="Print the validated configuration of one row")

    def run(self, *args, **options):
        if options.get("show"):
            self.emit(load_preset(options["show"]).to_mapping())
            return
        for preset in list_presets():
            self.stdout.write(f"{preset.name}: {preset.title} ({len(preset.rows)} rows)")
