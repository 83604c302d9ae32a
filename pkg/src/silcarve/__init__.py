"""Desk-scale multi-view silhouette prediction pipeline.

A from-scratch stack: reverse-mode autodiff over numpy arrays, a
differentiable voxel min-projection with visual-hull carving, a procedural
metaball dataset generator, an order-agnostic multi-view encoder/decoder
model, and training plus evaluation tooling with a single CLI entry point.
"""

import os as _os


def _apply_thread_cap(environ=_os.environ):
    """Honor SILCARVE_THREADS by seeding the BLAS pool size variables.

    Must run before numpy is first imported — the pools read these once.
    Explicitly set variables win over the cap.
    """
    cap = environ.get("SILCARVE_THREADS", "")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            environ.setdefault(var, cap)


_apply_thread_cap()

from .autodiff import Tensor, backward, bce_loss  # noqa: E402,F401

__version__ = "0.1.0"
