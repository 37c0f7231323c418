# stotrans/engine/__init__.py
"""Numeric core: autodiff tensors, noise streams, attention and the classifier."""
