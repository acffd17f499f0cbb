"""Gridded air-quality estimation and forecasting with a residual CNN + LSTM.

Subpackage map:

- ``deepair.rng``       seeded random number generation
- ``deepair.kernels``   hot numeric kernels (numba-jitted, numpy fallback)
- ``deepair.tensor``    dense float64 tensors with a reverse-mode gradient tape
- ``deepair.layers``    neural-network layers and the SGD update
- ``deepair.grid``      raster grids, two-stage interpolation, patches
- ``deepair.model``     the hybrid CNN-LSTM network and checkpoints
- ``deepair.training``  patch training loop, splits, early stopping
- ``deepair.inference`` city maps, station forecasts, MAPE evaluation
- ``deepair.saliency``  gradient-based input attribution
- ``deepair.synthcity`` synthetic city generator and planted oracle datasets
- ``deepair.cli``       command-line pipeline driver
"""

__version__ = "0.1.0"

FORMAT_VERSIONS = {
    "cube": 1,
    "checkpoint": 1,
    "report": 1,
    "split": 1,
    "table": 1,
    "raster": 1,
}

# Every matmul in this package is tiny (im2col columns, LSTM gates), where
# BLAS thread fan-out costs far more than it buys: capping the pools to one
# thread speeds training several-fold on many-core machines. Kept alive for
# the process lifetime; harmless no-op when threadpoolctl is absent.
try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _BLAS_SINGLE_THREAD = _threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - optional dependency
    _BLAS_SINGLE_THREAD = None
