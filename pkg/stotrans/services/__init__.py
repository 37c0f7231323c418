# stotrans/services/__init__.py
"""
Services module for training, uncertainty evaluation, verification and experiment orchestration
"""

from .training_service import TrainConfig, TrainHistory, train, train_ensemble, mc_dropout_model
from .uncertainty_service import RunMatrix, UncertaintyReport, multi_run_predict, summarize, example_report

__all__ = [
    'TrainConfig', 'TrainHistory', 'train', 'train_ensemble', 'mc_dropout_model',
    'RunMatrix', 'UncertaintyReport', 'multi_run_predict', 'summarize', 'example_report',
]
