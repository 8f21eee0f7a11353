"""
Django settings for pspo_lab project.

The project has no web surface: everything runs through management
commands (verify, figure1, train, compare, make_taskset) and the test runner.
"""

from pathlib import Path
from decouple import config
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='django-insecure-pspo-lab-local-only')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',

    # Third party apps
    'rest_framework',

    # Local apps
    'common',
    'policy',
    'rewards',
    'divergence',
    'envs',
    'trainer',
    'harness',
]


# Database
# The run registry only; experiment artifacts live on disk.
DATABASES = {
    'default': {
        'ENGINE': config('DB_ENGINE', default='django.db.backends.sqlite3'),
        'NAME': config('DB_NAME', default=BASE_DIR / 'db.sqlite3'),
        'USER': config('DB_USER', default=''),
        'PASSWORD': config('DB_PASSWORD', default=''),
        'HOST': config('DB_HOST', default=''),
        'PORT': config('DB_PORT', default=''),
    }
}


LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Experiment harness settings
PSPO_LAB = {
    # Parallel worker slots for independent runs
    'WORKERS': config('PSPO_WORKERS', default=1, cast=int),
    'OUTPUT_ROOT': Path(config('PSPO_OUTPUT_ROOT', default=str(BASE_DIR / 'runs'))),
    # Preset learning rates are tuned for large models; tabular logits need larger steps
    'TABULAR_LR_SCALE': config('PSPO_TABULAR_LR_SCALE', default=1000.0, cast=float),
    'RECORD_RUNS': config('PSPO_RECORD_RUNS', default=True, cast=bool),
    'VERIFY_TRIALS': config('PSPO_VERIFY_TRIALS', default=10000, cast=int),
}


# Logging configuration
LOG_LEVEL = config('LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': 'DEBUG',
            'class': 'logging.FileHandler',
            'filename': BASE_DIR / 'logs' / 'pspo_lab.log',
            'formatter': 'verbose',
        },
        'console': {
            'level': 'WARNING',
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['file', 'console'],
            'level': 'INFO',
            'propagate': True,
        },
        **{
            app: {
                'handlers': ['file', 'console'],
                'level': LOG_LEVEL,
                'propagate': False,
            }
            for app in ('common', 'policy', 'rewards', 'divergence', 'envs', 'trainer', 'harness')
        },
    },
}

# Create logs directory if it doesn't exist
os.makedirs(BASE_DIR / 'logs', exist_ok=True)
