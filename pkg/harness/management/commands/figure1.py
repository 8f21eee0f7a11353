from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from harness.services import surrogate_curves_frame


class Command(BaseCommand):
    help = "Exports clipped vs smoothed surrogate terms and slopes over a ratio grid as CSV."

    def add_arguments(self, parser):
        parser.add_argument('--epsilon', type=float, default=0.2)
        parser.add_argument('--alpha', type=float, default=0.2)
        parser.add_argument('--r-min', type=float, default=0.0)
        parser.add_argument('--r-max', type=float, default=2.0)
        parser.add_argument('--points', type=int, default=201)
        parser.add_argument('--output', type=str, default=None, help="CSV path (stdout when omitted).")

    def handle(self, *args, **options):
        try:
            frame = surrogate_curves_frame(
                epsilon=options['epsilon'], alpha=options['alpha'],
                r_min=options['r_min'], r_max=options['r_max'], points=options['points'],
            )
        except ValueError as e:
            raise CommandError(str(e), returncode=2)

        if options['output']:
            path = Path(options['output'])
            path.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(path, index=False, lineterminator='\n')
            self.stdout.write(self.style.SUCCESS(f"Wrote {len(frame)} rows to {path}"))
        else:
            self.stdout.write(frame.to_csv(index=False, lineterminator='\n'), ending='')
