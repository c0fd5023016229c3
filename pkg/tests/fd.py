"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from gstran import kernel as K


def numeric_grad(fn, arr, h=1e-6, entries=None):
    """d fn / d arr by central differences, perturbing ``arr.values`` in place.

    ``fn`` takes no arguments and returns a float. ``entries`` restricts the
    probe to a subset of flat indices (others stay NaN).
    """
    flat = arr.values.reshape(-1)
    out = np.full(arr.size, np.nan)
    for i in range(arr.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


ZERO_TOL = 1e-6


def rel_err(analytic, numeric, zero_tol=ZERO_TOL):
    """||a - n|| / max(||a||, ||n||).

    Gradients that vanish by symmetry (both norms below ``zero_tol``) are
    compared absolutely instead, since their ratio is pure rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < zero_tol:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / scale)


def check_grads(loss_fn, arrays, h=1e-6):
    """Return ``{name: rel_err}`` comparing backward against finite differences.

    ``loss_fn`` builds a scalar DiffArray from the current values.
    """
    for a in arrays.values():
        a.grad = None
    with K.Tape():
        loss = loss_fn()
        K.backward(loss)
    analytic = {n: (a.grad.copy() if a.grad is not None else np.zeros(a.shape)) for n, a in arrays.items()}

    def value():
        with K.no_grad():
            return loss_fn().item()

    return {n: rel_err(analytic[n], numeric_grad(value, a, h)) for n, a in arrays.items()}
