# harness/services.py

from dataclasses import replace
import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings
from django.db import DatabaseError, transaction
from django.utils import timezone
from tabulate import tabulate

from envs.services import read_taskset
from policy.services import SurrogateConfig, clipped_term, clipped_term_slope, pspo_term, pspo_term_slope
from trainer.services import ModeSpec, compare_modes
from .models import ExperimentRun, RunStep
from .presets import reference_learning_rate, preset_surrogate_values

logger = logging.getLogger(__name__)

RECORDS_FILE = 'records.jsonl'
POLICY_FILE = 'policy.tsv'
CONFIG_FILE = 'config.json'
SUMMARY_TEXT = 'summary.txt'
SUMMARY_JSONL = 'summary.jsonl'

RUN_COLUMNS = [
    'label', 'mode', 'seed', 'final_greedy_accuracy', 'final_sampled_accuracy', 'mean_max_ratio_dev',
    'later_pass_ratio_dev', 'later_pass_smoothed_dev', 'nonfinite_incidents', 'steps_completed',
]


def jsonable(value):
    """Plain JSON types; non-finite floats become null."""
    if isinstance(value, dict):
        return {key: jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def json_line(data):
    return json.dumps(jsonable(data), allow_nan=False) + '\n'


def run_directory(output_dir, label, seed):
    return Path(output_dir) / label.replace(':', '-') / f"seed_{seed}"


# -- figure data ---------------------------------------------------------------------

def surrogate_curves_frame(epsilon=0.2, alpha=0.2, r_min=0.0, r_max=2.0, points=201):
    """Clipped and smoothed surrogate terms and their slopes over a grid of ratios, for A = +1 and -1."""
    if not 0.0 < epsilon < 1.0 or not 0.0 < alpha < 1.0:
        raise ValueError("epsilon and alpha must lie in (0, 1)")
    if points < 2 or not r_min < r_max or r_min < 0:
        raise ValueError("the ratio grid needs 0 <= r_min < r_max and at least two points")
    r = np.round(np.linspace(r_min, r_max, points), 10)
    columns = {'r': r}
    for sign, suffix in ((1.0, 'pos'), (-1.0, 'neg')):
        columns[f'clip_{suffix}'] = clipped_term(r, sign, epsilon)
        columns[f'pspo_{suffix}'] = pspo_term(r, sign, alpha)
    for sign, suffix in ((1.0, 'pos'), (-1.0, 'neg')):
        columns[f'clip_{suffix}_slope'] = clipped_term_slope(r, sign, epsilon)
        columns[f'pspo_{suffix}_slope'] = pspo_term_slope(r, sign, alpha)
    return pd.DataFrame(columns)


# -- run registry --------------------------------------------------------------------

class RunRegistry:
    """
    Mirrors executed runs into ExperimentRun/RunStep. A missing or unmigrated
    database turns the registry off with a warning instead of failing the run.
    """

    def __init__(self, enabled=None):
        self.enabled = settings.PSPO_LAB['RECORD_RUNS'] if enabled is None else enabled

    def _guard(self, action, *args):
        if not self.enabled:
            return None
        try:
            with transaction.atomic():
                return action(*args)
        except DatabaseError as e:
            logger.warning(f"Run registry unavailable ({e}); continuing without it. Run 'migrate' to enable it.")
            self.enabled = False
            return None

    def start(self, label, mode, seed, config, output_dir):
        return self._guard(lambda: ExperimentRun.objects.create(
            label=label, mode=mode, seed=seed,
            config=jsonable(config.to_dict()),
            status='RUNNING',
            output_dir=str(output_dir),
        ))

    def finish(self, run, comparison_run):
        if run is None:
            return None

        def save():
            result = comparison_run.result
            summary = comparison_run.summary
            RunStep.objects.bulk_create([
                RunStep(run=run, **{key: jsonable(value) for key, value in record.to_dict().items()})
                for record in result.records
            ])
            run.status = 'DIVERGED' if result.diverged else 'COMPLETED'
            run.final_greedy_accuracy = jsonable(summary.final_greedy_accuracy)
            run.mean_max_ratio_dev = jsonable(summary.mean_max_ratio_dev)
            run.nonfinite_incidents = summary.nonfinite_incidents
            run.steps_completed = summary.steps_completed
            run.completed_at = timezone.now()
            run.save()
            return run

        return self._guard(save)

    def fail(self, runs):
        def mark():
            ExperimentRun.objects.filter(
                pk__in=[run.pk for run in runs if run is not None], status='RUNNING'
            ).update(status='FAILED', completed_at=timezone.now())
        return self._guard(mark)


# -- experiments ---------------------------------------------------------------------

class ExperimentService:
    """Runs `train` / `compare` experiments and writes their artifacts."""

    def __init__(self, config, workers=None, registry=None):
        self.config = config
        self.workers = workers or settings.PSPO_LAB['WORKERS']
        self.registry = registry or RunRegistry()
        self.output_dir = Path(config.output_dir)

    def load_tasks(self):
        train_tasks, eval_tasks = read_taskset(self.config.taskset_path)
        if not train_tasks:
            raise ValueError(f"{self.config.taskset_path} has no train split")
        return train_tasks, eval_tasks

    def mode_specs(self, modes):
        """
        ModeSpecs for a comparison. Under a preset every mode takes its own
        table learning rate, clipping range and smoothing strength, except
        where the config sets that field itself.
        """
        cfg = self.config
        base = cfg.train.surrogate
        scale = settings.PSPO_LAB['TABULAR_LR_SCALE']
        specs = []
        seen = {}
        for text in modes:
            spec = ModeSpec.parse(text, base)
            seen[spec.label] = seen.get(spec.label, 0) + 1
            if seen[spec.label] > 1:
                # Repeated modes get their own label and run directories
                spec = ModeSpec(f"{spec.label}-{seen[spec.label]}", spec.surrogate, spec.learning_rate)
            if cfg.preset:
                values = {
                    key: value
                    for key, value in preset_surrogate_values(
                        cfg.preset, spec.surrogate.mode, spec.surrogate.iterations_mu
                    ).items()
                    if f"surrogate.{key}" not in cfg.explicit_fields
                }
                surrogate = SurrogateConfig(**{**spec.surrogate.to_dict(), **values})
                learning_rate = None
                if 'learning_rate' not in cfg.explicit_fields:
                    learning_rate = reference_learning_rate(cfg.preset, spec.surrogate.mode) * scale * cfg.lr_multiplier
                spec = ModeSpec(spec.label, surrogate, learning_rate)
            # Invalid combinations (noclip with sampler log-probs) fail before any output is written
            replace(cfg.train, surrogate=spec.surrogate)
            specs.append(spec)
        return specs

    def _record_writer(self, spec, seed):
        directory = run_directory(self.output_dir, spec.label, seed)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RECORDS_FILE
        path.write_text('', encoding='utf-8')

        def write(record):
            with open(path, 'a', encoding='utf-8', newline='\n') as handle:
                handle.write(json_line(record.to_dict()))
        return write

    def _execute(self, specs):
        cfg = self.config
        train_tasks, eval_tasks = self.load_tasks()
        self.output_dir.mkdir(parents=True, exist_ok=True)
        (self.output_dir / CONFIG_FILE).write_text(cfg.to_json(), encoding='utf-8')

        base_config = cfg.train_config(cfg.seeds[0])
        registry_runs = {}
        for spec in specs:
            for seed in cfg.seeds:
                overrides = {'surrogate': spec.surrogate, 'seed': seed}
                if spec.learning_rate is not None:
                    overrides['learning_rate'] = spec.learning_rate
                run_config = replace(base_config, **overrides)
                registry_runs[(spec.label, seed)] = self.registry.start(
                    spec.label, spec.surrogate.mode, seed, run_config,
                    run_directory(self.output_dir, spec.label, seed),
                )

        try:
            report = compare_modes(
                train_tasks, eval_tasks, base_config, specs, cfg.seeds,
                workers=self.workers, on_record_factory=self._record_writer,
            )
        except Exception as e:
            logger.error(f"Experiment in {self.output_dir} failed: {e}")
            self.registry.fail(list(registry_runs.values()))
            raise

        for run in report.runs:
            run.result.policy.save(run_directory(self.output_dir, run.spec.label, run.seed) / POLICY_FILE)
            self.registry.finish(registry_runs.get((run.spec.label, run.seed)), run)
        return report

    def run_train(self):
        surrogate = self.config.train.surrogate
        spec = ModeSpec(surrogate.mode, surrogate)
        report = self._execute([spec])
        self.write_summary(report)
        return report

    def run_compare(self, modes):
        if len(modes) < 2:
            raise ValueError("compare needs at least two modes")
        report = self._execute(self.mode_specs(modes))
        self.write_summary(report)
        return report

    def write_summary(self, report):
        runs = report.to_frame()[RUN_COLUMNS]
        per_mode = report.per_mode()

        lines = [
            "Per-run results",
            tabulate(runs, headers='keys', tablefmt='github', floatfmt='.4f', showindex=False),
            "",
            "Per-mode summary (mean greedy accuracy with 95% CI, 1.96 * sd / sqrt(n))",
            tabulate(per_mode, headers='keys', tablefmt='github', floatfmt='.4f', showindex=False),
            "",
        ]
        (self.output_dir / SUMMARY_TEXT).write_text('\n'.join(lines), encoding='utf-8')

        with open(self.output_dir / SUMMARY_JSONL, 'w', encoding='utf-8', newline='\n') as handle:
            for row in runs.to_dict(orient='records'):
                handle.write(json_line({'kind': 'run', **row}))
            for row in per_mode.to_dict(orient='records'):
                handle.write(json_line({'kind': 'mode', **row}))
        logger.info(f"Wrote summary for {len(runs)} runs to {self.output_dir}")

