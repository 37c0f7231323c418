# Data module for the run-config schema and presets
