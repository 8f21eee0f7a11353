import json
import math
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.db import DatabaseError
from django.test import SimpleTestCase, TestCase, override_settings
from numpy.testing import assert_allclose
from rest_framework import serializers

from common.exceptions import ConfigurationError
from envs.services import read_taskset
from rewards.services import grade_completion
from trainer.services import TrainConfig
from .config import load_experiment_config, parse_experiment_config
from .models import ExperimentRun, RunStep
from .services import ExperimentService, RunRegistry, jsonable, run_directory, surrogate_curves_frame
from .verification import GOLDEN_COMPLETIONS, PropertyResult, VerificationService

LAB_SETTINGS = {**settings.PSPO_LAB, 'TABULAR_LR_SCALE': 1000.0, 'WORKERS': 1, 'RECORD_RUNS': True}


def base_config(taskset_path, output_dir, **overrides):
    data = {
        'taskset_path': str(taskset_path),
        'output_dir': str(output_dir),
        'seeds': [0, 1],
        'train': {
            'surrogate': {'mode': 'pspo', 'alpha': 0.2},
            'learning_rate': 0.1,
            'batch_prompts': 4,
            'total_steps': 4,
            'eval_every': 2,
        },
    }
    data.update(overrides)
    return data


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)


@override_settings(PSPO_LAB=LAB_SETTINGS)
class ExperimentConfigTests(SimpleTestCase):
    def test_plain_config(self):
        config = parse_experiment_config(base_config('tasks.tsv', 'out'))
        self.assertIsNone(config.preset)
        self.assertEqual(config.seeds, (0, 1))
        self.assertIsInstance(config.train, TrainConfig)
        self.assertEqual(config.train.surrogate.alpha, 0.2)
        self.assertEqual(config.train.surrogate.iterations_mu, 2)
        self.assertEqual(config.train_config(1).seed, 1)

    def test_json_round_trip(self):
        config = parse_experiment_config(base_config('tasks.tsv', 'out', lr_multiplier=2.0))
        again = parse_experiment_config(json.loads(config.to_json()))
        self.assertEqual(again, config)
        self.assertEqual(config.train_config(0).learning_rate, 0.2)

    def test_output_dir_defaults_to_the_output_root(self):
        data = base_config('tasks.tsv', 'out')
        del data['output_dir']
        self.assertEqual(parse_experiment_config(data).output_dir, str(LAB_SETTINGS['OUTPUT_ROOT']))

    def test_small_model_preset(self):
        data = {'preset': 'table1-0.5B', 'taskset_path': 'tasks.tsv', 'seeds': [0]}
        config = parse_experiment_config(data)
        surrogate = config.train.surrogate
        self.assertEqual((surrogate.mode, surrogate.alpha, surrogate.iterations_mu), ('pspo', 0.1, 2))
        self.assertEqual(config.reference_learning_rate, 5e-7)
        self.assertAlmostEqual(config.train.learning_rate, 5e-4, places=15)
        self.assertEqual((config.train.group_size, config.train.temperature, config.train.top_p), (4, 0.8, 0.9))

    def test_larger_model_preset_for_clipping(self):
        data = {'preset': 'table1-1.5B', 'taskset_path': 'tasks.tsv', 'seeds': [0],
                'train': {'surrogate': {'mode': 'clip'}}}
        config = parse_experiment_config(data, lr_scale=10.0)
        self.assertEqual(config.train.surrogate.epsilon, 0.2)
        self.assertEqual(config.reference_learning_rate, 5e-7)
        self.assertAlmostEqual(config.train.learning_rate, 5e-6, places=15)

    def test_explicit_fields_win_over_the_preset(self):
        data = {'preset': 'table1-0.5B', 'taskset_path': 'tasks.tsv', 'seeds': [0],
                'train': {'learning_rate': 0.01, 'surrogate': {'mode': 'pspo', 'alpha': 0.3}}}
        config = parse_experiment_config(data)
        self.assertEqual(config.train.learning_rate, 0.01)
        self.assertEqual(config.train.surrogate.alpha, 0.3)

    def test_errors_name_the_offending_field(self):
        cases = [
            ({'seeds': [1, 1]}, ['seeds']),
            ({'seeds': []}, ['seeds']),
            ({'preset': 'table9'}, ['preset']),
            ({'train': {'surrogate': {'alpha': 1.5}}}, ['train', 'surrogate', 'alpha']),
            ({'train': {'surrogate': {'epsilon': 1.0}}}, ['train', 'surrogate', 'epsilon']),
            ({'train': {'total_steps': 5, 'eval_every': 10}}, ['train', 'eval_every']),
            ({'train': {'learning_rate': -0.1}}, ['train', 'learning_rate']),
            ({'train': {'surrogate': {'mode': 'noclip'}, 'logprob_convention': 'sampler'}},
             ['train', 'logprob_convention']),
            ({'train': {'sampled_eval_temperature': 0.0}}, ['train', 'sampled_eval_temperature']),
        ]
        for overrides, path in cases:
            with self.subTest(overrides=overrides):
                with self.assertRaises(serializers.ValidationError) as ctx:
                    parse_experiment_config(base_config('tasks.tsv', 'out', **overrides))
                detail = ctx.exception.detail
                for key in path:
                    self.assertIn(key, detail)
                    detail = detail[key]

    def test_missing_taskset_path(self):
        data = base_config('tasks.tsv', 'out')
        del data['taskset_path']
        with self.assertRaises(serializers.ValidationError) as ctx:
            parse_experiment_config(data)
        self.assertIn('taskset_path', ctx.exception.detail)

    def test_load_from_disk(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'config.json'
            with self.assertRaises(FileNotFoundError):
                load_experiment_config(path)
            path.write_text("{not json")
            with self.assertRaises(serializers.ValidationError):
                load_experiment_config(path)


class SurrogateCurvesFrameTests(SimpleTestCase):
    def test_clipped_and_smoothed_terms(self):
        frame = surrogate_curves_frame(epsilon=0.2, alpha=0.2)
        self.assertEqual(list(frame.columns), [
            'r', 'clip_pos', 'pspo_pos', 'clip_neg', 'pspo_neg',
            'clip_pos_slope', 'pspo_pos_slope', 'clip_neg_slope', 'pspo_neg_slope',
        ])
        self.assertEqual(len(frame), 201)
        row = frame[frame['r'] == 1.5].iloc[0]
        assert_allclose(row[['clip_pos', 'pspo_pos', 'clip_neg', 'pspo_neg']], [1.2, 1.4, -1.5, -1.4], atol=1e-12)
        assert_allclose(row[['clip_pos_slope', 'pspo_pos_slope', 'clip_neg_slope', 'pspo_neg_slope']],
                        [0.0, 0.8, -1.0, -0.8], atol=1e-12)
        at_one = frame[frame['r'] == 1.0].iloc[0]
        assert_allclose(at_one[['clip_pos', 'pspo_pos', 'clip_neg', 'pspo_neg']], [1.0, 1.0, -1.0, -1.0], atol=1e-12)

    def test_invalid_grid(self):
        for kwargs in ({'alpha': 1.0}, {'epsilon': 0.0}, {'points': 1}, {'r_min': 2.0, 'r_max': 1.0}):
            with self.subTest(**kwargs), self.assertRaises(ValueError):
                surrogate_curves_frame(**kwargs)


class VerificationTests(SimpleTestCase):
    def test_golden_completions(self):
        for text, gold, expected in GOLDEN_COMPLETIONS:
            with self.subTest(text=text):
                self.assertEqual(grade_completion(text, gold).score, expected)

    def test_property_result(self):
        result = PropertyResult('demo', 1e-6)
        self.assertFalse(result.passed)
        result.check(1e-9)
        self.assertTrue(result.passed)
        result.check(math.inf)
        self.assertFalse(result.passed)
        self.assertEqual(result.as_row()['status'], 'FAIL')
        self.assertEqual(result.worst_residual, math.inf)

    def test_suites_pass_on_a_small_budget(self):
        results = VerificationService(trials=300, seed=3).run()
        self.assertEqual(len(results), 16)
        for result in results:
            self.assertTrue(result.passed, result.as_row())

    def test_trials_must_be_positive(self):
        with self.assertRaises(ValueError):
            VerificationService(trials=0)

    def test_jsonable(self):
        self.assertEqual(jsonable({'a': math.nan, 'b': [1.5, math.inf], 'c': True}),
                         {'a': None, 'b': [1.5, None], 'c': True})


@override_settings(PSPO_LAB=LAB_SETTINGS)
class RunRegistryTests(TestCase):
    def test_database_errors_disable_the_registry(self):
        registry = RunRegistry()
        config = TrainConfig(total_steps=1, eval_every=1)
        with mock.patch.object(ExperimentRun.objects, 'create', side_effect=DatabaseError("no such table")):
            self.assertIsNone(registry.start('pspo', 'pspo', 0, config, 'out'))
        self.assertFalse(registry.enabled)
        self.assertIsNone(registry.start('pspo', 'pspo', 0, config, 'out'))
        self.assertEqual(ExperimentRun.objects.count(), 0)

    def test_disabled_registry_writes_nothing(self):
        registry = RunRegistry(enabled=False)
        self.assertIsNone(registry.start('pspo', 'pspo', 0, TrainConfig(total_steps=1, eval_every=1), 'out'))
        self.assertEqual(ExperimentRun.objects.count(), 0)


@override_settings(PSPO_LAB=LAB_SETTINGS)
class ExperimentServiceTests(TempDirMixin, TestCase):
    def setUp(self):
        super().setUp()
        self.taskset = self.tmp / 'tasks.tsv'
        call_command('make_taskset', output=str(self.taskset), train=12, eval=6, seed=0, stdout=StringIO())

    def test_mode_specs_under_a_preset(self):
        data = {'preset': 'table1-0.5B', 'taskset_path': str(self.taskset), 'seeds': [0],
                'output_dir': str(self.tmp / 'out'), 'lr_multiplier': 2.0}
        service = ExperimentService(parse_experiment_config(data))
        specs = service.mode_specs(['clip', 'pspo', 'pspo', 'raw:3'])
        self.assertEqual([spec.label for spec in specs], ['clip', 'pspo', 'pspo-2', 'raw:3'])
        self.assertAlmostEqual(specs[0].learning_rate, 5e-6 * 1000 * 2.0, places=15)
        self.assertEqual(specs[0].surrogate.epsilon, 0.1)
        self.assertAlmostEqual(specs[3].learning_rate, 5e-7 * 1000 * 2.0, places=15)
        self.assertEqual(specs[3].surrogate.iterations_mu, 3)

    def test_preset_keeps_explicit_surrogate_and_learning_rate(self):
        data = {'preset': 'table1-0.5B', 'taskset_path': str(self.taskset), 'seeds': [0],
                'output_dir': str(self.tmp / 'out'),
                'train': {'surrogate': {'alpha': 0.3}, 'learning_rate': 0.01}}
        config = parse_experiment_config(data)
        self.assertEqual(config.explicit_fields, {'surrogate.alpha', 'learning_rate'})
        clip, pspo = ExperimentService(config).mode_specs(['clip', 'pspo'])
        self.assertEqual(pspo.surrogate.alpha, 0.3)
        self.assertEqual(clip.surrogate.epsilon, 0.1)
        # No per-mode override: every mode runs at the configured learning rate
        self.assertIsNone(clip.learning_rate)
        self.assertIsNone(pspo.learning_rate)

    def test_noclip_with_sampler_logprobs_fails_before_any_output(self):
        data = base_config(self.taskset, self.tmp / 'out')
        data['train'] = {**data['train'], 'surrogate': {'mode': 'clip'}, 'logprob_convention': 'sampler'}
        service = ExperimentService(parse_experiment_config(data))
        with self.assertRaises(ConfigurationError):
            service.mode_specs(['clip', 'noclip'])
        self.assertFalse((self.tmp / 'out').exists())

    def test_run_directory_names(self):
        self.assertEqual(run_directory(self.tmp, 'raw:2', 3), self.tmp / 'raw-2' / 'seed_3')

    def test_compare_needs_two_modes(self):
        config = parse_experiment_config(base_config(self.taskset, self.tmp / 'out'))
        with self.assertRaises(ValueError):
            ExperimentService(config).run_compare(['pspo'])


@override_settings(PSPO_LAB=LAB_SETTINGS)
class CommandTests(TempDirMixin, TestCase):
    def setUp(self):
        super().setUp()
        self.taskset = self.tmp / 'tasks.tsv'
        self.output = self.tmp / 'runs'
        call_command('make_taskset', output=str(self.taskset), train=12, eval=6, seed=0, stdout=StringIO())

    def write_config(self, data, name='config.json'):
        path = self.tmp / name
        path.write_text(json.dumps(data))
        return str(path)

    def test_make_taskset(self):
        train_tasks, eval_tasks = read_taskset(self.taskset)
        self.assertEqual((len(train_tasks), len(eval_tasks)), (12, 6))

    def test_train_writes_artifacts_and_registry_rows(self):
        out = StringIO()
        call_command('train', self.write_config(base_config(self.taskset, self.output)), stdout=out)
        self.assertIn("pspo: greedy accuracy", out.getvalue())
        for name in ('config.json', 'summary.txt', 'summary.jsonl'):
            self.assertTrue((self.output / name).exists(), name)
        for seed in (0, 1):
            run_dir = self.output / 'pspo' / f'seed_{seed}'
            records = [json.loads(line) for line in (run_dir / 'records.jsonl').read_text().splitlines()]
            self.assertEqual(len(records), 8)
            self.assertEqual([r['pass_index'] for r in records[:2]], [0, 1])
            self.assertTrue((run_dir / 'policy.tsv').exists())

        runs = ExperimentRun.objects.order_by('seed')
        self.assertEqual([(run.seed, run.status) for run in runs], [(0, 'COMPLETED'), (1, 'COMPLETED')])
        self.assertEqual(RunStep.objects.filter(run=runs[0]).count(), 8)
        self.assertEqual(runs[0].steps_completed, 4)

        kinds = [json.loads(line)['kind'] for line in (self.output / 'summary.jsonl').read_text().splitlines()]
        self.assertEqual(kinds, ['run', 'run', 'mode'])

    def test_rerun_is_byte_identical(self):
        config_path = self.write_config(base_config(self.taskset, self.output))
        files = ['config.json', 'summary.txt', 'summary.jsonl',
                 'pspo/seed_0/records.jsonl', 'pspo/seed_1/policy.tsv']
        call_command('train', config_path, stdout=StringIO())
        first = {name: (self.output / name).read_bytes() for name in files}
        call_command('train', config_path, stdout=StringIO())
        second = {name: (self.output / name).read_bytes() for name in files}
        self.assertEqual(first, second)

    def test_compare_writes_every_mode(self):
        out = StringIO()
        call_command('compare', self.write_config(base_config(self.taskset, self.output)),
                     modes='clip,pspo,raw:2', stdout=out)
        for label in ('clip', 'pspo', 'raw-2'):
            for seed in (0, 1):
                self.assertTrue((self.output / label / f'seed_{seed}' / 'records.jsonl').exists())
        lines = [json.loads(line) for line in (self.output / 'summary.jsonl').read_text().splitlines()]
        self.assertEqual([line['label'] for line in lines if line['kind'] == 'mode'], ['clip', 'pspo', 'raw:2'])
        self.assertEqual(ExperimentRun.objects.count(), 6)

    def test_compare_under_a_preset_records_explicit_values(self):
        data = {
            'preset': 'table1-0.5B', 'taskset_path': str(self.taskset), 'output_dir': str(self.output),
            'seeds': [0],
            'train': {'surrogate': {'alpha': 0.3}, 'learning_rate': 0.01,
                      'batch_prompts': 4, 'total_steps': 2, 'eval_every': 1},
        }
        call_command('compare', self.write_config(data), modes='clip,pspo', stdout=StringIO())
        pspo = ExperimentRun.objects.get(label='pspo', seed=0).config
        clip = ExperimentRun.objects.get(label='clip', seed=0).config
        self.assertEqual(pspo['surrogate']['alpha'], 0.3)
        self.assertEqual(pspo['learning_rate'], 0.01)
        self.assertEqual(clip['surrogate']['epsilon'], 0.1)
        self.assertEqual(clip['learning_rate'], 0.01)

    def test_compare_rejects_a_single_mode(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('compare', self.write_config(base_config(self.taskset, self.output)),
                         modes='pspo', stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)

    def test_usage_errors_exit_with_two(self):
        missing_taskset = self.write_config(base_config(self.tmp / 'missing.tsv', self.output))
        invalid = self.write_config(base_config(self.taskset, self.output, seeds=[]), name='invalid.json')
        for path in (missing_taskset, invalid, str(self.tmp / 'absent.json')):
            with self.subTest(path=path), self.assertRaises(CommandError) as ctx:
                call_command('train', path, stdout=StringIO())
            self.assertEqual(ctx.exception.returncode, 2)

    def test_figure1_command(self):
        out = StringIO()
        call_command('figure1', points=5, stdout=out)
        lines = out.getvalue().splitlines()
        self.assertEqual(lines[0].split(',')[:3], ['r', 'clip_pos', 'pspo_pos'])
        self.assertEqual(len(lines), 6)

        path = self.tmp / 'figure' / 'terms.csv'
        call_command('figure1', output=str(path), stdout=StringIO())
        self.assertEqual(len(path.read_text().splitlines()), 202)

        with self.assertRaises(CommandError) as ctx:
            call_command('figure1', alpha=1.0, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)

    def test_verify_command(self):
        out = StringIO()
        call_command('verify', trials=200, stdout=out)
        self.assertIn("All 16 properties hold.", out.getvalue())

    def test_verify_rejects_zero_trials(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('verify', trials=0, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)
