"""Hot inner loops over sparse binary batches.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
The public names bind to the numba path unless ``REGCL_DISABLE_NUMBA`` is set
to a truthy value or numba cannot be imported. Both paths compute the same
quantities; only the floating-point summation order differs, so results agree
to rounding but are not bit-identical across backends.

Batches are CSR row blocks: ``indptr`` (int64, length B+1) and ``indices``
(int64, the active feature ids of every row, concatenated).
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _env_disabled():
    return os.environ.get("REGCL_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = _HAVE_NUMBA and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _densify(indptr, indices, n_features):
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    x = np.zeros((len(indptr) - 1, n_features))
    x[rows, indices] = 1.0
    return x


def sparse_affine_numpy(indptr, indices, w1t, b1):
    """``pre[r] = b1 + sum(w1t[f] for f in row r)``; ``w1t`` is input-major (D x H)."""
    x = _densify(indptr, indices, w1t.shape[0])
    return x @ w1t + b1


def sparse_outer_accumulate_numpy(indptr, indices, dpre, dw1t):
    """``dw1t[f] += dpre[r]`` for every active feature f of row r (in place)."""
    x = _densify(indptr, indices, dw1t.shape[0])
    dw1t += x.T @ dpre


def momentum_step_numpy(theta, velocity, grad, lr, momentum):
    velocity *= momentum
    velocity += grad
    theta -= lr * velocity


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

@njit(cache=True)
def sparse_affine_numba(indptr, indices, w1t, b1):
    n_rows = indptr.shape[0] - 1
    hidden = w1t.shape[1]
    out = np.empty((n_rows, hidden))
    for r in range(n_rows):
        for h in range(hidden):
            out[r, h] = b1[h]
        for p in range(indptr[r], indptr[r + 1]):
            f = indices[p]
            for h in range(hidden):
                out[r, h] += w1t[f, h]
    return out


@njit(cache=True)
def sparse_outer_accumulate_numba(indptr, indices, dpre, dw1t):
    n_rows = indptr.shape[0] - 1
    hidden = dw1t.shape[1]
    for r in range(n_rows):
        for p in range(indptr[r], indptr[r + 1]):
            f = indices[p]
            for h in range(hidden):
                dw1t[f, h] += dpre[r, h]


@njit(cache=True)
def momentum_step_numba(theta, velocity, grad, lr, momentum):
    for i in range(theta.shape[0]):
        v = momentum * velocity[i] + grad[i]
        velocity[i] = v
        theta[i] -= lr * v


if USE_NUMBA:
    sparse_affine = sparse_affine_numba
    sparse_outer_accumulate = sparse_outer_accumulate_numba
    momentum_step = momentum_step_numba
else:
    sparse_affine = sparse_affine_numpy
    sparse_outer_accumulate = sparse_outer_accumulate_numpy
    momentum_step = momentum_step_numpy
