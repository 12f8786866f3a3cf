"""ecgsynth: conditional generative models, fidelity metrics and an
evaluation protocol for multichannel ECG-like time series."""

__version__ = "0.1.0"
