from django.core.management.base import BaseCommand, CommandError

from envs.services import make_taskset, write_taskset


class Command(BaseCommand):
    help = "Generates a seeded arithmetic taskset and writes its train/eval split as TSV."

    def add_arguments(self, parser):
        parser.add_argument('--output', type=str, required=True)
        parser.add_argument('--train', type=int, default=200)
        parser.add_argument('--eval', type=int, default=50)
        parser.add_argument('--seed', type=int, default=0)

    def handle(self, *args, **options):
        try:
            train_tasks, eval_tasks = make_taskset(options['train'], options['eval'], seed=options['seed'])
        except ValueError as e:
            raise CommandError(str(e), returncode=2)
        write_taskset(options['output'], train_tasks, eval_tasks)
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {len(train_tasks)} train and {len(eval_tasks)} eval prompts to {options['output']}"
        ))
