from django.apps import AppConfig


class DivergenceConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'divergence'
