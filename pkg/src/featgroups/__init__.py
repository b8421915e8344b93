"""Learning global feature groups in multivariate time series.

A step-wise embedding classifier whose per-feature embedding weights are
clustered during supervised training, so that feature groups emerge from the
task itself, plus the synthetic Gaussian-process benchmark that checks the
learned groups against a known ground truth.
"""

__version__ = "0.1.0"
