# harness/models.py

from django.db import models
from common.models import BaseModel


class ExperimentRun(BaseModel):
    """
    One training run (a mode/seed pair) launched by the `train` or `compare`
    commands. The on-disk artifacts stay authoritative; this is the index.
    """

    STATUS_CHOICES = [
        ('RUNNING', 'Running'),
        ('COMPLETED', 'Completed'),
        ('DIVERGED', 'Diverged'),
        ('FAILED', 'Failed'),
    ]

    label = models.CharField(max_length=50)
    mode = models.CharField(max_length=10)
    seed = models.BigIntegerField()
    config = models.JSONField(default=dict, help_text="Resolved TrainConfig for this run")
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='RUNNING')
    final_greedy_accuracy = models.FloatField(null=True, blank=True)
    mean_max_ratio_dev = models.FloatField(null=True, blank=True)
    nonfinite_incidents = models.PositiveIntegerField(default=0)
    steps_completed = models.PositiveIntegerField(default=0)
    output_dir = models.CharField(max_length=500, blank=True)
    completed_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        db_table = "harness_experimentrun"
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.label} seed={self.seed} ({self.get_status_display()})"


class RunStep(models.Model):
    """Per-pass metrics of a run, mirroring one line of records.jsonl."""

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='steps')
    step = models.PositiveIntegerField()
    pass_index = models.PositiveSmallIntegerField()
    mean_reward = models.FloatField(null=True, blank=True)
    objective = models.FloatField(null=True, blank=True)
    max_ratio_dev = models.FloatField(null=True, blank=True)
    smoothed_ratio_dev = models.FloatField(null=True, blank=True)
    clip_fraction = models.FloatField(null=True, blank=True)
    tv_mean = models.FloatField(null=True, blank=True)
    kl_mean = models.FloatField(null=True, blank=True)
    greedy_accuracy = models.FloatField(null=True, blank=True)
    sampled_accuracy = models.FloatField(null=True, blank=True)
    nonfinite_flag = models.BooleanField(default=False)

    class Meta:
        db_table = "harness_runstep"
        ordering = ['run', 'step', 'pass_index']
        unique_together = ['run', 'step', 'pass_index']

    def __str__(self):
        return f"{self.run_id}:{self.step}.{self.pass_index}"
