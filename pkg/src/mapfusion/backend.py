"""Kernel backend selection and process-level performance knobs.

Two implementations exist for the hot kernels (dense 2D convolution and
polygon rasterization): numba ``@njit`` loops and pure-numpy code (the
convolution fallback runs as im2col + BLAS matmul).  ``MAPFUSION_BACKEND``
picks one:

* ``numpy`` - pure numpy/BLAS paths, no numba required
* ``numba`` - jitted loop kernels everywhere they exist
* ``auto``  - per-kernel winner measured by ``benchmarks/bench_kernels.py``:
  BLAS for convolution, numba for rasterization (numpy when numba is
  missing)

All parallel kernels give each worker exclusive ownership of its output
slice, so results are bitwise identical at any thread count.
"""

from __future__ import annotations

import ctypes
import os

# the TBB shipped here is too old for numba; skip straight to OpenMP
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

_VALID = ("auto", "numpy", "numba")


def backend_flag() -> str:
    """Raw MAPFUSION_BACKEND value, validated."""
    flag = os.environ.get("MAPFUSION_BACKEND", "auto").lower()
    if flag not in _VALID:
        raise ValueError(
            f"MAPFUSION_BACKEND must be one of {_VALID}, got {flag!r}"
        )
    return flag


_numba_ok: bool | None = None


def numba_available() -> bool:
    global _numba_ok
    if _numba_ok is None:
        try:
            import numba  # noqa: F401

            _numba_ok = True
        except ImportError:
            _numba_ok = False
    return _numba_ok


def conv_backend() -> str:
    """Backend for convolution kernels: 'numpy' (im2col+BLAS) or 'numba'."""
    flag = backend_flag()
    if flag == "numba":
        if not numba_available():
            raise RuntimeError("MAPFUSION_BACKEND=numba but numba is not importable")
        return "numba"
    # auto: BLAS-backed im2col measured faster than the jitted direct
    # convolution on every layer shape in this model.
    return "numpy"


def raster_backend() -> str:
    """Backend for the polygon scanline kernel."""
    flag = backend_flag()
    if flag == "numpy":
        return "numpy"
    if flag == "numba":
        if not numba_available():
            raise RuntimeError("MAPFUSION_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if numba_available() else "numpy"


def set_threads(n: int | None) -> None:
    """Cap worker threads for jitted kernels; None leaves the default."""
    if n is None:
        env = os.environ.get("MAPFUSION_THREADS")
        if not env:
            return
        n = int(env)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    if numba_available():
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _tune_allocator() -> None:
    # Large scratch arrays (im2col buffers, feature maps) are allocated and
    # freed every training step.  glibc hands such blocks straight to mmap,
    # which costs a page-fault storm per step; raising the mmap/trim
    # thresholds keeps them on the heap free list.  Best effort, Linux only.
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 29)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 29)  # M_TRIM_THRESHOLD
    except Exception:
        pass


_tune_allocator()
set_threads(None)
