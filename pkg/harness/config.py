# harness/config.py

from dataclasses import dataclass, field, replace
import json
import logging
from pathlib import Path
from typing import Optional

from django.conf import settings
from rest_framework import serializers

from trainer.services import TrainConfig
from .presets import expand_preset
from .serializers import ExperimentConfigSerializer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    taskset_path: str = ''
    seeds: tuple = (0,)
    output_dir: str = ''
    preset: Optional[str] = None
    lr_multiplier: float = 1.0
    reference_learning_rate: Optional[float] = None
    # Train fields the raw config set itself; preset values never override these
    explicit_fields: frozenset = field(default=frozenset(), compare=False)

    def train_config(self, seed):
        """The TrainConfig one seed actually runs with."""
        return replace(self.train, seed=seed, learning_rate=self.train.learning_rate * self.lr_multiplier)

    def to_dict(self):
        return {
            'preset': self.preset,
            'taskset_path': self.taskset_path,
            'output_dir': self.output_dir,
            'seeds': list(self.seeds),
            'lr_multiplier': self.lr_multiplier,
            'reference_learning_rate': self.reference_learning_rate,
            'train': self.train.to_dict(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + '\n'


def explicit_train_fields(data):
    """'learning_rate' and 'surrogate.<key>' for every train field written out in `data`."""
    train = data.get('train')
    if not isinstance(train, dict):
        return frozenset()
    names = {'learning_rate'} if 'learning_rate' in train else set()
    surrogate = train.get('surrogate')
    if isinstance(surrogate, dict):
        names.update(f"surrogate.{key}" for key in surrogate)
    return frozenset(names)


def parse_experiment_config(data, lr_scale=None):
    """
    Expand the preset, then validate. Raises serializers.ValidationError whose
    detail is keyed by the offending field.
    """
    if not isinstance(data, dict):
        raise serializers.ValidationError({'non_field_errors': ["The config must be a JSON object."]})
    if lr_scale is None:
        lr_scale = settings.PSPO_LAB['TABULAR_LR_SCALE']
    explicit = explicit_train_fields(data)
    expanded = expand_preset(data, lr_scale)

    serializer = ExperimentConfigSerializer(data=expanded)
    serializer.is_valid(raise_exception=True)
    values = serializer.validated_data

    output_dir = values.get('output_dir') or str(settings.PSPO_LAB['OUTPUT_ROOT'])
    return ExperimentConfig(
        train=values.get('train') or TrainConfig(),
        taskset_path=values['taskset_path'],
        seeds=tuple(values['seeds']),
        output_dir=output_dir,
        preset=values.get('preset'),
        lr_multiplier=values['lr_multiplier'],
        reference_learning_rate=values.get('reference_learning_rate'),
        explicit_fields=explicit,
    )


def load_experiment_config(path, lr_scale=None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise serializers.ValidationError({'non_field_errors': [f"{path} is not valid JSON: {e}"]})
    config = parse_experiment_config(data, lr_scale)
    logger.info(f"Loaded experiment config {path} (preset={config.preset}, seeds={list(config.seeds)})")
    return config
