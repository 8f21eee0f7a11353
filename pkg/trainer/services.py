# trainer/services.py

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import logging
import math
from typing import Optional

import numpy as np
import pandas as pd

from common.exceptions import ConfigurationError
from common.seeding import derive_seed
from divergence.services import state_diagnostics
from envs.services import LOGPROB_CONVENTIONS, evaluate_greedy, evaluate_sampled, sample_group
from policy.services import (
    SurrogateConfig, batch_states, group_objective, merge_gradients,
    objective_gradient, ratio_statistics,
)
from policy.tabular import TabularPolicy
from rewards.services import DEFAULT_TOLERANCE
from .optimizers import OPTIMIZERS, build_optimizer

logger = logging.getLogger(__name__)

FD_STEP_RANGE = (1e-7, 1e-3)
CI_Z = 1.96


@dataclass(frozen=True)
class TrainConfig:
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    learning_rate: float = 0.05
    batch_prompts: int = 8
    group_size: int = 4
    total_steps: int = 500
    eval_every: int = 50
    seed: int = 0
    optimizer: str = 'adam'
    temperature: float = 0.8
    top_p: float = 1.0
    logprob_convention: str = 'policy'
    normalize_advantage: bool = False
    reward_tolerance: float = DEFAULT_TOLERANCE
    select_best_checkpoint: bool = False
    # Also score one sampled completion per eval prompt at this temperature
    sampled_eval_temperature: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.surrogate, dict):
            object.__setattr__(self, 'surrogate', SurrogateConfig(**self.surrogate))
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigurationError(f"learning_rate must be finite and non-negative, got {self.learning_rate}")
        for name in ('batch_prompts', 'group_size', 'total_steps', 'eval_every'):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.eval_every > self.total_steps:
            raise ConfigurationError(
                f"eval_every ({self.eval_every}) must not exceed total_steps ({self.total_steps})"
            )
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.temperature <= 0:
            raise ConfigurationError(f"training temperature must be positive, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigurationError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.logprob_convention not in LOGPROB_CONVENTIONS:
            raise ConfigurationError(
                f"logprob_convention must be one of {LOGPROB_CONVENTIONS}, got {self.logprob_convention!r}"
            )
        if self.reward_tolerance < 0:
            raise ConfigurationError(f"reward_tolerance must be non-negative, got {self.reward_tolerance}")
        if self.sampled_eval_temperature is not None and not self.sampled_eval_temperature > 0:
            raise ConfigurationError(
                f"sampled_eval_temperature must be positive, got {self.sampled_eval_temperature}"
            )
        if not sampler_convention_is_on_policy(
            self.surrogate.mode, self.logprob_convention, self.temperature, self.top_p
        ):
            raise ConfigurationError(
                "noclip assumes a single on-policy pass; with logprob_convention='sampler' "
                "it needs temperature 1 and top_p 1"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**dict(data))


@dataclass(frozen=True)
class RunRecord:
    step: int
    pass_index: int
    mean_reward: float
    objective: float
    max_ratio_dev: float
    smoothed_ratio_dev: float
    clip_fraction: float
    tv_mean: float
    kl_mean: float
    greedy_accuracy: Optional[float] = None
    sampled_accuracy: Optional[float] = None
    nonfinite_flag: bool = False

    SCALARS = (
        'mean_reward', 'objective', 'max_ratio_dev', 'smoothed_ratio_dev',
        'clip_fraction', 'tv_mean', 'kl_mean', 'greedy_accuracy', 'sampled_accuracy',
    )

    def __post_init__(self):
        nonfinite = any(
            value is not None and not math.isfinite(value)
            for value in (getattr(self, name) for name in self.SCALARS)
        )
        # Also set when the gradient (not itself logged) went non-finite
        object.__setattr__(self, 'nonfinite_flag', bool(self.nonfinite_flag or nonfinite))

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    records: list
    policy: TabularPolicy
    diverged: bool = False
    final_greedy_accuracy: Optional[float] = None
    final_sampled_accuracy: Optional[float] = None
    best_accuracy: Optional[float] = None
    best_step: Optional[int] = None

    @property
    def steps_completed(self):
        return len({record.step for record in self.records})


def sampler_convention_is_on_policy(mode, logprob_convention, temperature, top_p):
    """Sampler log-probs only equal the policy's own at temperature 1 without truncation."""
    if mode != 'noclip' or logprob_convention != 'sampler':
        return True
    return temperature == 1.0 and top_p == 1.0


def _gradient_is_finite(gradient):
    return all(np.all(np.isfinite(values)) for values in gradient.values())


class Trainer:
    """
    GRPO-style loop: freeze the behaviour policy, sample a group per prompt,
    then take `iterations_mu` ascent steps on the group objective.
    """

    def __init__(self, train_tasks, config, eval_tasks=None, on_record=None, initial_policy=None):
        if not train_tasks:
            raise ValueError("train needs at least one training task")
        self.train_tasks = list(train_tasks)
        self.eval_tasks = list(eval_tasks) if eval_tasks else self.train_tasks
        self.config = config
        self.on_record = on_record
        vocab_size = self.train_tasks[0].vocab_size
        if initial_policy is not None:
            self.policy = initial_policy.snapshot()
        else:
            self.policy = TabularPolicy(vocab_size)
        self.reference = self.policy.snapshot() if config.surrogate.needs_reference else None
        self.optimizer = build_optimizer(config.optimizer, config.learning_rate)
        self.records = []

    def _emit(self, record):
        self.records.append(record)
        if self.on_record is not None:
            self.on_record(record)

    def _select_prompts(self, step):
        if self.config.batch_prompts >= len(self.train_tasks):
            return self.train_tasks
        rng = np.random.default_rng(derive_seed(self.config.seed, 'prompts', step))
        picks = rng.choice(len(self.train_tasks), size=self.config.batch_prompts, replace=False)
        return [self.train_tasks[i] for i in picks]

    def _sample_batches(self, step, old):
        cfg = self.config
        return [
            sample_group(
                task, old,
                group_size=cfg.group_size,
                temperature=cfg.temperature,
                seed=derive_seed(cfg.seed, step, slot),
                top_p=cfg.top_p,
                logprob_convention=cfg.logprob_convention,
                normalize_advantage=cfg.normalize_advantage,
                tolerance=cfg.reward_tolerance,
            )
            for slot, task in enumerate(self._select_prompts(step))
        ]

    def _eval_due(self, step):
        return (step + 1) % self.config.eval_every == 0 or step == self.config.total_steps - 1

    def run(self):
        cfg = self.config
        surrogate = cfg.surrogate
        best_accuracy, best_step, best_policy = None, None, None
        final_accuracy, final_sampled = None, None

        for step in range(cfg.total_steps):
            old = self.policy.snapshot()
            batches = self._sample_batches(step, old)
            mean_reward = float(np.mean([batch.mean_reward for batch in batches]))
            states = sorted({state for batch in batches for state in batch_states(batch)})

            for pass_index in range(surrogate.iterations_mu):
                objective = float(np.mean([
                    group_objective(batch, self.policy, old, self.reference, surrogate) for batch in batches
                ]))
                gradient = merge_gradients(
                    [objective_gradient(batch, self.policy, old, surrogate, self.reference) for batch in batches],
                    scale=1.0 / len(batches),
                )
                stats = ratio_statistics(batches, self.policy, old, self.reference, surrogate)
                divergence = state_diagnostics(self.policy, old, states)
                metrics = dict(
                    step=step,
                    pass_index=pass_index,
                    mean_reward=mean_reward,
                    objective=objective,
                    max_ratio_dev=stats.max_ratio_dev,
                    smoothed_ratio_dev=stats.smoothed_ratio_dev,
                    clip_fraction=stats.clip_fraction,
                    tv_mean=divergence.tv_mean,
                    kl_mean=divergence.kl_mean,
                )

                pending = RunRecord(**metrics, nonfinite_flag=not _gradient_is_finite(gradient))
                if pending.nonfinite_flag:
                    self._emit(pending)
                    logger.error(
                        f"Run diverged at step {step} pass {pass_index} "
                        f"(mode={surrogate.mode}, seed={cfg.seed}); stopping"
                    )
                    return TrainResult(
                        records=self.records, policy=self.policy, diverged=True,
                        final_greedy_accuracy=final_accuracy, final_sampled_accuracy=final_sampled,
                        best_accuracy=best_accuracy, best_step=best_step,
                    )

                self.optimizer.step(self.policy, gradient)

                greedy_accuracy, sampled_accuracy = None, None
                if pass_index == surrogate.iterations_mu - 1 and self._eval_due(step):
                    greedy_accuracy = evaluate_greedy(self.eval_tasks, self.policy, cfg.reward_tolerance)
                    final_accuracy = greedy_accuracy
                    logger.info(f"step {step}: greedy accuracy {greedy_accuracy:.4f} (mode={surrogate.mode}, seed={cfg.seed})")
                    if best_accuracy is None or greedy_accuracy > best_accuracy:
                        best_accuracy, best_step = greedy_accuracy, step
                        best_policy = self.policy.snapshot()
                    if cfg.sampled_eval_temperature is not None:
                        sampled_accuracy = evaluate_sampled(
                            self.eval_tasks, self.policy, cfg.sampled_eval_temperature,
                            seed=derive_seed(cfg.seed, 'sampled-eval', step),
                            top_p=cfg.top_p, tolerance=cfg.reward_tolerance,
                        )
                        final_sampled = sampled_accuracy

                record = RunRecord(**metrics, greedy_accuracy=greedy_accuracy, sampled_accuracy=sampled_accuracy)
                logger.debug(
                    f"step {step} pass {pass_index}: objective={objective:.6g} "
                    f"max|r-1|={stats.max_ratio_dev:.3g} tv={divergence.tv_mean:.3g}"
                )
                self._emit(record)

        policy = best_policy if cfg.select_best_checkpoint and best_policy is not None else self.policy
        return TrainResult(
            records=self.records,
            policy=policy,
            diverged=False,
            final_greedy_accuracy=best_accuracy if cfg.select_best_checkpoint else final_accuracy,
            final_sampled_accuracy=final_sampled,
            best_accuracy=best_accuracy,
            best_step=best_step,
        )


def train(train_tasks, config, eval_tasks=None, on_record=None, initial_policy=None):
    return Trainer(train_tasks, config, eval_tasks, on_record, initial_policy).run()


def finite_diff_gradient(objective, policy, states, h=1e-5):
    """
    Central differences (J(theta + h e_k) - J(theta - h e_k)) / 2h for every logit
    of every listed state. `objective` is called with a perturbed copy of `policy`.
    """
    if not FD_STEP_RANGE[0] <= h <= FD_STEP_RANGE[1]:
        raise ValueError(f"h must lie in [{FD_STEP_RANGE[0]}, {FD_STEP_RANGE[1]}], got {h}")
    perturbed = policy.snapshot()
    gradient = {}
    for state in states:
        base = np.array(perturbed.logits(state), dtype=np.float64)
        values = np.zeros(perturbed.vocab_size)
        for k in range(perturbed.vocab_size):
            shifted = base.copy()
            shifted[k] = base[k] + h
            perturbed.set_logits(state, shifted)
            upper = objective(perturbed)
            shifted[k] = base[k] - h
            perturbed.set_logits(state, shifted)
            lower = objective(perturbed)
            values[k] = (upper - lower) / (2.0 * h)
        perturbed.set_logits(state, base)
        gradient[state] = values
    return gradient


# -- mode comparison -----------------------------------------------------------------

@dataclass(frozen=True)
class ModeSpec:
    label: str
    surrogate: SurrogateConfig
    learning_rate: Optional[float] = None

    @classmethod
    def parse(cls, text, base=None):
        """'pspo' or 'raw:2' (mode with an explicit pass count) on top of `base`'s alpha/epsilon/beta."""
        mode, _, mu = text.strip().partition(':')
        base = base or SurrogateConfig()
        overrides = {
            'alpha': base.alpha, 'epsilon': base.epsilon, 'beta': base.beta,
            'token_aggregation': base.token_aggregation, 'smoothing_target': base.smoothing_target,
        }
        if mu:
            try:
                overrides['iterations_mu'] = int(mu)
            except ValueError:
                raise ConfigurationError(f"invalid pass count in mode {text!r}") from None
        return cls(label=text.strip(), surrogate=SurrogateConfig.for_mode(mode, **overrides))


@dataclass(frozen=True)
class RunSummary:
    label: str
    mode: str
    seed: int
    final_greedy_accuracy: Optional[float]
    final_sampled_accuracy: Optional[float]
    mean_max_ratio_dev: float
    first_pass_ratio_dev: float
    later_pass_ratio_dev: float
    mean_smoothed_ratio_dev: float
    later_pass_smoothed_dev: float
    nonfinite_incidents: int
    steps_completed: int

    @classmethod
    def from_result(cls, label, mode, seed, result):
        def mean_of(attr, pass_filter):
            values = [getattr(r, attr) for r in result.records if pass_filter(r.pass_index)]
            return float(np.mean(values)) if values else 0.0

        return cls(
            label=label,
            mode=mode,
            seed=seed,
            final_greedy_accuracy=result.final_greedy_accuracy,
            final_sampled_accuracy=result.final_sampled_accuracy,
            mean_max_ratio_dev=mean_of('max_ratio_dev', lambda p: True),
            first_pass_ratio_dev=mean_of('max_ratio_dev', lambda p: p == 0),
            later_pass_ratio_dev=mean_of('max_ratio_dev', lambda p: p > 0),
            mean_smoothed_ratio_dev=mean_of('smoothed_ratio_dev', lambda p: True),
            later_pass_smoothed_dev=mean_of('smoothed_ratio_dev', lambda p: p > 0),
            nonfinite_incidents=sum(1 for r in result.records if r.nonfinite_flag),
            steps_completed=result.steps_completed,
        )

    def to_dict(self):
        return asdict(self)


@dataclass
class ComparisonRun:
    spec: ModeSpec
    seed: int
    config: TrainConfig
    result: TrainResult
    summary: RunSummary


def confidence_halfwidth(values):
    """Normal-approximation 95% half-width, 1.96 * sd / sqrt(n); 0 for a single value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(CI_Z * values.std(ddof=1) / math.sqrt(values.size))


@dataclass
class ComparisonReport:
    runs: list

    def to_frame(self):
        return pd.DataFrame([run.summary.to_dict() for run in self.runs])

    def per_mode(self):
        """One row per mode label, in first-appearance order."""
        frame = self.to_frame()
        rows = []
        for label in dict.fromkeys(frame['label']):
            group = frame[frame['label'] == label]
            accuracies = group['final_greedy_accuracy'].dropna().to_numpy(dtype=np.float64)
            sampled = group['final_sampled_accuracy'].dropna().to_numpy(dtype=np.float64)
            rows.append({
                'label': label,
                'mode': group['mode'].iloc[0],
                'runs': len(group),
                'mean_accuracy': float(accuracies.mean()) if accuracies.size else math.nan,
                'ci95': confidence_halfwidth(accuracies),
                'mean_sampled_accuracy': float(sampled.mean()) if sampled.size else math.nan,
                'mean_max_ratio_dev': float(group['mean_max_ratio_dev'].mean()),
                'later_pass_ratio_dev': float(group['later_pass_ratio_dev'].mean()),
                'later_pass_smoothed_dev': float(group['later_pass_smoothed_dev'].mean()),
                'nonfinite_incidents': int(group['nonfinite_incidents'].sum()),
            })
        return pd.DataFrame(rows)


def _as_spec(mode):
    if isinstance(mode, ModeSpec):
        return mode
    if isinstance(mode, SurrogateConfig):
        return ModeSpec(label=mode.mode, surrogate=mode)
    return ModeSpec.parse(mode)


def run_one(train_tasks, eval_tasks, config, on_record=None):
    return train(train_tasks, config, eval_tasks=eval_tasks, on_record=on_record)


def compare_modes(train_tasks, eval_tasks, base_config, modes, seeds, workers=1, on_record_factory=None):
    """
    Train every (mode, seed) pair from the same seed streams. Runs execute in a
    thread pool; the report keeps submission order (modes outer, seeds inner).

    `on_record_factory(spec, seed)` may return a per-run record callback.
    """
    specs = [_as_spec(mode) for mode in modes]
    if not specs:
        raise ValueError("compare_modes needs at least one mode")
    if not seeds:
        raise ValueError("compare_modes needs at least one seed")

    jobs = []
    for spec in specs:
        for seed in seeds:
            overrides = {'surrogate': spec.surrogate, 'seed': seed}
            if spec.learning_rate is not None:
                overrides['learning_rate'] = spec.learning_rate
            jobs.append((spec, seed, replace(base_config, **overrides)))

    def execute(job):
        spec, seed, config = job
        callback = on_record_factory(spec, seed) if on_record_factory else None
        try:
            result = run_one(train_tasks, eval_tasks, config, on_record=callback)
        except Exception as e:
            logger.error(f"Run {spec.label} seed {seed} failed: {e}")
            raise
        return ComparisonRun(spec, seed, config, result,
                             RunSummary.from_result(spec.label, spec.surrogate.mode, seed, result))

    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as executor:
        runs = list(executor.map(execute, jobs))

    logger.info(f"Compared {len(specs)} modes over {len(seeds)} seeds ({len(runs)} runs)")
    return ComparisonReport(runs)
