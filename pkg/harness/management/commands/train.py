import json

from django.core.management.base import BaseCommand, CommandError
from rest_framework import serializers

from harness.config import load_experiment_config
from harness.services import ExperimentService


def load_or_exit(path):
    """Config loading with the harness exit codes: 2 for a missing file or invalid config."""
    try:
        return load_experiment_config(path)
    except FileNotFoundError as e:
        raise CommandError(str(e), returncode=2)
    except serializers.ValidationError as e:
        raise CommandError(f"Invalid config {path}: {json.dumps(e.detail, default=str)}", returncode=2)


class Command(BaseCommand):
    help = "Trains one mode over every configured seed and writes records, policies and a summary."

    def add_arguments(self, parser):
        parser.add_argument('config', type=str)
        parser.add_argument('--workers', type=int, default=None)

    def handle(self, *args, **options):
        config = load_or_exit(options['config'])
        service = ExperimentService(config, workers=options['workers'])
        try:
            report = service.run_train()
        except FileNotFoundError as e:
            raise CommandError(str(e), returncode=2)
        except Exception as e:
            raise CommandError(f"Training failed: {e}", returncode=1)

        for row in report.per_mode().to_dict(orient='records'):
            self.stdout.write(
                f"{row['label']}: greedy accuracy {row['mean_accuracy']:.4f} ± {row['ci95']:.4f} "
                f"over {row['runs']} seeds"
            )
        diverged = [run for run in report.runs if run.result.diverged]
        if diverged:
            seeds = ', '.join(str(run.seed) for run in diverged)
            self.stdout.write(self.style.WARNING(f"Non-finite values stopped seeds {seeds}; partial records kept."))
            raise CommandError("Training diverged.", returncode=1)
        self.stdout.write(self.style.SUCCESS(f"Artifacts written to {config.output_dir}"))
