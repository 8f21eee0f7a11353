from django.core.management.base import BaseCommand, CommandError
from tabulate import tabulate

from common.exceptions import ConfigurationError
from harness.services import ExperimentService
from .train import load_or_exit


class Command(BaseCommand):
    help = "Runs several surrogate modes over shared seeds and writes a merged summary."

    def add_arguments(self, parser):
        parser.add_argument('config', type=str)
        parser.add_argument('--modes', type=str, required=True,
                            help="Comma-separated modes, optionally with a pass count: clip,noclip,pspo,raw:2")
        parser.add_argument('--workers', type=int, default=None)

    def handle(self, *args, **options):
        modes = [mode.strip() for mode in options['modes'].split(',') if mode.strip()]
        if len(modes) < 2:
            raise CommandError("--modes needs at least two modes", returncode=2)

        config = load_or_exit(options['config'])
        service = ExperimentService(config, workers=options['workers'])
        try:
            report = service.run_compare(modes)
        except (FileNotFoundError, ConfigurationError) as e:
            raise CommandError(str(e), returncode=2)
        except Exception as e:
            raise CommandError(f"Comparison failed: {e}", returncode=1)

        self.stdout.write(tabulate(report.per_mode(), headers='keys', tablefmt='github',
                                   floatfmt='.4f', showindex=False))
        incidents = sum(run.summary.nonfinite_incidents for run in report.runs)
        if incidents:
            self.stdout.write(self.style.WARNING(f"{incidents} non-finite incidents recorded."))
        self.stdout.write(self.style.SUCCESS(f"Comparison of {len(report.runs)} runs written to {config.output_dir}"))
