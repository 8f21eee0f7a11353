from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from tabulate import tabulate

from harness.verification import VerificationService


class Command(BaseCommand):
    help = "Runs every property suite and reports per-property counts and worst residuals."

    def add_arguments(self, parser):
        parser.add_argument('--trials', type=int, default=None,
                            help="Random trials per suite (default: PSPO_VERIFY_TRIALS).")
        parser.add_argument('--seed', type=int, default=0)

    def handle(self, *args, **options):
        trials = options['trials']
        if trials is None:
            trials = settings.PSPO_LAB['VERIFY_TRIALS']
        if trials < 1:
            raise CommandError(f"--trials must be positive, got {trials}", returncode=2)

        self.stdout.write(f"Running property suites ({trials} trials, seed {options['seed']})...")
        try:
            results = VerificationService(trials=trials, seed=options['seed']).run()
        except Exception as e:
            raise CommandError(f"Verification crashed: {e}", returncode=3)

        rows = [result.as_row() for result in results]
        self.stdout.write(tabulate(rows, headers='keys', tablefmt='github', floatfmt='.3g'))

        failed = [result.name for result in results if not result.passed]
        if failed:
            self.stdout.write(self.style.ERROR(f"{len(failed)} properties failed: {', '.join(failed)}"))
            raise CommandError("Property verification failed.", returncode=1)
        self.stdout.write(self.style.SUCCESS(f"All {len(results)} properties hold."))
