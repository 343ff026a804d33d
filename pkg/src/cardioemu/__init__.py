"""Synthetic heart/brain cohort toolkit.

Generates cohorts with a 0D cardiovascular simulator, trains a conditional
VAE jointly with a Gaussian-process emulator of the simulator parameters,
and explores conditional what-if scenarios as pressure-volume loops.
"""

import os

__version__ = "0.1.0"

# The pipeline is dominated by many small/medium BLAS calls (batch-local
# Cholesky factors, kernel matrices). Multithreaded BLAS adds a thread
# handoff cost that dwarfs the compute at these sizes, so default to one
# BLAS thread; override with CARDIOEMU_BLAS_THREADS.
_blas_threads = int(os.environ.get("CARDIOEMU_BLAS_THREADS", "1"))
try:
    import threadpoolctl

    _thread_limiter = threadpoolctl.threadpool_limits(limits=_blas_threads, user_api="blas")
except ImportError:  # pragma: no cover - threadpoolctl ships with scikit-learn
    _thread_limiter = None
