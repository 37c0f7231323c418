# stotrans/__init__.py
"""Transformer text classifiers with stochastic attention and multi-run uncertainty reports."""

__version__ = "0.1.0"
