# Generated by Django 5.2.6 on 2026-10-18 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('label', models.CharField(max_length=50)),
                ('mode', models.CharField(max_length=10)),
                ('seed', models.BigIntegerField()),
                ('config', models.JSONField(default=dict, help_text='Resolved TrainConfig for this run')),
                ('status', models.CharField(choices=[('RUNNING', 'Running'), ('COMPLETED', 'Completed'), ('DIVERGED', 'Diverged'), ('FAILED', 'Failed')], default='RUNNING', max_length=10)),
                ('final_greedy_accuracy', models.FloatField(blank=True, null=True)),
                ('mean_max_ratio_dev', models.FloatField(blank=True, null=True)),
                ('nonfinite_incidents', models.PositiveIntegerField(default=0)),
                ('steps_completed', models.PositiveIntegerField(default=0)),
                ('output_dir', models.CharField(blank=True, max_length=500)),
                ('completed_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'db_table': 'harness_experimentrun',
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='RunStep',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('step', models.PositiveIntegerField()),
                ('pass_index', models.PositiveSmallIntegerField()),
                ('mean_reward', models.FloatField(blank=True, null=True)),
                ('objective', models.FloatField(blank=True, null=True)),
                ('max_ratio_dev', models.FloatField(blank=True, null=True)),
                ('smoothed_ratio_dev', models.FloatField(blank=True, null=True)),
                ('clip_fraction', models.FloatField(blank=True, null=True)),
                ('tv_mean', models.FloatField(blank=True, null=True)),
                ('kl_mean', models.FloatField(blank=True, null=True)),
                ('greedy_accuracy', models.FloatField(blank=True, null=True)),
                ('sampled_accuracy', models.FloatField(blank=True, null=True)),
                ('nonfinite_flag', models.BooleanField(default=False)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='steps', to='harness.experimentrun')),
            ],
            options={
                'db_table': 'harness_runstep',
                'ordering': ['run', 'step', 'pass_index'],
                'unique_together': {('run', 'step', 'pass_index')},
            },
        ),
    ]
