import math

from rest_framework import serializers

from common.exceptions import ConfigurationError
from envs.services import LOGPROB_CONVENTIONS
from policy.services import MODES, SMOOTHING_TARGETS, TOKEN_AGGREGATIONS, SurrogateConfig
from trainer.optimizers import OPTIMIZERS
from trainer.services import TrainConfig, sampler_convention_is_on_policy
from .presets import PRESET_NAMES


class FiniteFloatField(serializers.FloatField):
    def to_internal_value(self, data):
        value = super().to_internal_value(data)
        if not math.isfinite(value):
            raise serializers.ValidationError("A finite number is required.")
        return value


class SurrogateConfigSerializer(serializers.Serializer):
    mode = serializers.ChoiceField(choices=MODES, default='pspo')
    alpha = FiniteFloatField(min_value=0.0, max_value=1.0, default=0.1)
    epsilon = FiniteFloatField(default=0.1)
    beta = FiniteFloatField(min_value=0.0, default=0.0)
    iterations_mu = serializers.IntegerField(min_value=1, required=False)
    token_aggregation = serializers.ChoiceField(choices=TOKEN_AGGREGATIONS, default='mean')
    smoothing_target = serializers.ChoiceField(choices=SMOOTHING_TARGETS, default='old')

    def validate_epsilon(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("epsilon must lie strictly between 0 and 1.")
        return value

    def validate(self, attrs):
        try:
            return SurrogateConfig.for_mode(**attrs)
        except ConfigurationError as e:
            raise serializers.ValidationError(str(e))


class TrainConfigSerializer(serializers.Serializer):
    surrogate = SurrogateConfigSerializer(required=False)
    learning_rate = FiniteFloatField(min_value=0.0, default=0.05)
    batch_prompts = serializers.IntegerField(min_value=1, default=8)
    group_size = serializers.IntegerField(min_value=1, default=4)
    total_steps = serializers.IntegerField(min_value=1, default=500)
    eval_every = serializers.IntegerField(min_value=1, default=50)
    seed = serializers.IntegerField(default=0)
    optimizer = serializers.ChoiceField(choices=OPTIMIZERS, default='adam')
    temperature = FiniteFloatField(default=0.8)
    top_p = FiniteFloatField(default=1.0)
    logprob_convention = serializers.ChoiceField(choices=LOGPROB_CONVENTIONS, default='policy')
    normalize_advantage = serializers.BooleanField(default=False)
    reward_tolerance = FiniteFloatField(min_value=0.0, default=1e-6)
    select_best_checkpoint = serializers.BooleanField(default=False)
    sampled_eval_temperature = FiniteFloatField(required=False, allow_null=True, default=None)

    def validate_temperature(self, value):
        if value <= 0:
            raise serializers.ValidationError("Training temperature must be positive.")
        return value

    def validate_sampled_eval_temperature(self, value):
        if value is not None and value <= 0:
            raise serializers.ValidationError("Sampled evaluation temperature must be positive.")
        return value

    def validate_top_p(self, value):
        if not 0.0 < value <= 1.0:
            raise serializers.ValidationError("top_p must lie in (0, 1].")
        return value

    def validate(self, attrs):
        if attrs['eval_every'] > attrs['total_steps']:
            raise serializers.ValidationError({'eval_every': "eval_every must not exceed total_steps."})
        attrs.setdefault('surrogate', SurrogateConfig())
        if not sampler_convention_is_on_policy(
            attrs['surrogate'].mode, attrs['logprob_convention'], attrs['temperature'], attrs['top_p']
        ):
            raise serializers.ValidationError({
                'logprob_convention': "noclip needs the 'policy' convention unless temperature and top_p are both 1."
            })
        try:
            return TrainConfig(**attrs)
        except ConfigurationError as e:
            raise serializers.ValidationError(str(e))


class ExperimentConfigSerializer(serializers.Serializer):
    train = TrainConfigSerializer(required=False)
    taskset_path = serializers.CharField()
    seeds = serializers.ListField(child=serializers.IntegerField(), allow_empty=False)
    output_dir = serializers.CharField(required=False, allow_blank=False)
    preset = serializers.ChoiceField(choices=PRESET_NAMES, required=False, allow_null=True, default=None)
    lr_multiplier = FiniteFloatField(min_value=0.0, default=1.0)
    reference_learning_rate = FiniteFloatField(min_value=0.0, required=False, allow_null=True, default=None)

    def validate_seeds(self, value):
        if len(set(value)) != len(value):
            raise serializers.ValidationError("Seeds must be distinct.")
        return value
