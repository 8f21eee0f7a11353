from django.apps import AppConfig


class EnvsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'envs'
    verbose_name = 'Toy Environments'
