#!/usr/bin/env python
"""
pspo_lab entry point: `verify`, `figure1`, `train`, `compare`, `make_taskset`,
plus Django's own `migrate` (run registry) and `test`.
"""
import os
import sys


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'pspo_lab.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Install the packages from requirements.txt "
            "into the active environment first."
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
