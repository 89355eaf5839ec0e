"""simtune: learn stochastic-simulator parameters so that models trained on
the generated data do well on a held-out validation set.

Core pieces: a minimal reverse-mode autodiff tape (`diffcore`), dense task
models and the inner trainer (`model`), stochastic simulators with score
machinery (`simgen`, `tasks`), the differentiable-approximation outer
gradient (`hypergrad`), the outer loop (`autosim`), black-box baselines
(`baselines`), and the benchmark harness (`bench`) exposed over a CLI and a
FastAPI service.
"""

__version__ = "0.1.0"
