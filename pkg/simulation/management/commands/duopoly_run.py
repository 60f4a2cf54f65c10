from simulation.management.base import DuopolyCommand
from simulation.services import engine
from simulation.services.config import ConfigError, load_config, load_preset
from simulation.services.llm_client import IoMode


class Command(DuopolyCommand):
    help = "Run one duopoly pricing experiment from a YAML config or a bundled preset"

    def add_arguments(self, parser):
        source = parser.add_mutually_exclusive_group()
        source.add_argument("--config", help="Path to a run configuration YAML file")
        source.add_argument("--preset", help="Bundled preset, e.g. group1-basic or group2-asymmetric:3")
        source.add_argument("--resume", metavar="CHECKPOINT", help="Continue from a checkpoint.json")
        parser.add_argument("--out-dir", dest="out_dir", help="Directory that receives <run_id>/")
        parser.add_argument("--rounds", type=int)
        parser.add_argument("--seed", type=int)
        parser.add_argument("--io", choices=IoMode.values)
        parser.add_argument("--cassette")
        parser.add_argument("--overrides", help='Inline YAML mapping, e.g. "{policy1: constant}"')

    def run(self, *args, **options):
        overrides = {**self.parse_overrides(options.get("overrides")), **self.flag_overrides(options)}

        if options.get("resume"):
            result = engine.resume(options["resume"], overrides=overrides, out_dir=options.get("out_dir"))
        else:
            if options.get("config"):
                config = load_config(options["config"], overrides)
            elif options.get("preset"):
                config = load_preset(options["preset"], overrides)
            else:
                raise ConfigError(
                    "give --config, --preset or --resume",
                    {"__all__": ["No configuration source given."]},
                )
            result = engine.run(config, out_dir=options.get("out_dir"))

        self.emit(result.to_dict())
