"""Continual learning with gated integration of expandable low-rank
adapter branches.

Module map:
  numerics   dense float64 linear algebra, deterministic RNG, Jacobi eig
  autodiff   minimal reverse-mode engine over 2-D arrays
  subspace   gradient projection memory (orthonormal input bases)
  gating     per-task gate networks and the orthogonality constraints
  adapter    expandable low-rank branches and update strategies
  model      toy frozen backbone, synthetic tasks, file ingestion
  optim      AdamW with a per-parameter delta transform hook
  continual  per-task orchestration, metrics, parameter accounting
  config     TOML experiment configuration
  checkpoint JSON + base64 array serialization
  reporting  result bundle emission (CSV/JSON)
  cli        command-line front end
"""

__version__ = "0.1.0"
