# harness/presets.py

import copy

from policy.services import MODE_ITERATIONS

# Learning rates are per mode; epsilon applies to clip, alpha to pspo.
PRESETS = {
    'table1-0.5B': {
        'learning_rate': {'noclip': 1e-6, 'clip': 5e-6, 'pspo': 5e-7},
        'epsilon': 0.1,
        'alpha': 0.1,
    },
    'table1-1.5B': {
        'learning_rate': {'noclip': 1e-6, 'clip': 5e-7, 'pspo': 5e-7},
        'epsilon': 0.2,
        'alpha': 0.1,
    },
}
PRESET_NAMES = tuple(PRESETS)

# Training-time settings shared by every method
SHARED_TRAINING = {
    'group_size': 4,
    'temperature': 0.8,
    'top_p': 0.9,
    'optimizer': 'adam',
}


def reference_learning_rate(preset, mode):
    """Learning rate from the hyperparameter table; the unclipped multi-pass mode borrows pspo's."""
    rates = PRESETS[preset]['learning_rate']
    return rates['pspo' if mode == 'raw' else mode]


def preset_surrogate_values(preset, mode, iterations_mu=None):
    values = PRESETS[preset]
    return {
        'mode': mode,
        'iterations_mu': MODE_ITERATIONS[mode] if iterations_mu is None else iterations_mu,
        'alpha': values['alpha'],
        'epsilon': values['epsilon'],
    }


def expand_preset(data, lr_scale):
    """
    Fill the gaps of a raw experiment config from its named preset. Fields
    present in `data` always win; the preset learning rate is kept alongside
    the scaled tabular one.
    """
    data = copy.deepcopy(data)
    preset = data.get('preset')
    if not preset:
        return data
    if preset not in PRESETS:
        # Left for the serializer to report against the `preset` field
        return data

    train = data.setdefault('train', {})
    surrogate = train.setdefault('surrogate', {})
    mode = surrogate.setdefault('mode', 'pspo')
    if mode not in MODE_ITERATIONS:
        return data

    for key, value in preset_surrogate_values(preset, mode).items():
        surrogate.setdefault(key, value)
    for key, value in SHARED_TRAINING.items():
        train.setdefault(key, value)

    reference_lr = reference_learning_rate(preset, mode)
    data.setdefault('reference_learning_rate', reference_lr)
    train.setdefault('learning_rate', reference_lr * lr_scale)
    return data
