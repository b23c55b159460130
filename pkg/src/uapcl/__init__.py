"""Continual spoofed-speech detection with universal adversarial perturbation rehearsal.

Everything runs on float64 numpy arrays with a small tape-based autodiff
(:mod:`uapcl.autodiff`).  The main pieces:

- :mod:`uapcl.data`: synthetic domains, a frozen framing extractor, feature files
- :mod:`uapcl.classifier`: a small transformer detector
- :mod:`uapcl.uap`: universal perturbation generation and the perturbation pool
- :mod:`uapcl.continual`: stage-wise fine-tuning with pseudo-spoofs and distillation
- :mod:`uapcl.experiment`, :mod:`uapcl.report`, :mod:`uapcl.embedding`, :mod:`uapcl.cli`
"""

__version__ = "0.1.0"
