"""Desk-scale virtual-screening workbench.

Subpackages by concern:

* :mod:`fusionscreen.autodiff`   -- reverse-mode tape over dense float64 arrays
* :mod:`fusionscreen.optim`      -- Adam / AdamW / RMSprop / Adadelta
* :mod:`fusionscreen.checkpoint` -- bit-exact parameter + optimizer snapshots
* :mod:`fusionscreen.complexes`  -- synthetic complexes, voxel/graph features, splits
* :mod:`fusionscreen.models`     -- voxel head, gated graph head, fusion modes
* :mod:`fusionscreen.pb2`        -- population-based bandit hyperparameter search
* :mod:`fusionscreen.harness`    -- fault-tolerant batch scoring at scale
* :mod:`fusionscreen.evaluate`   -- regression metrics, P/R, kappa, aggregation
* :mod:`fusionscreen.cli`        -- gen / train / hpo / screen / eval / report
"""

__version__ = "0.1.0"
