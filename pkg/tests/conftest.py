import numpy as np
import pytest


def fd_grad_tree(loss_fn, tree, h=1e-6):
    """Central finite differences of loss_fn() w.r.t. every entry of a
    dict-of-dicts parameter tree, perturbing the arrays in place."""
    grads = {}
    for group, pvals in tree.items():
        grads[group] = {}
        for key, arr in pvals.items():
            g = np.zeros_like(arr)
            flat = arr.ravel()
            gflat = g.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_fn()
                flat[i] = orig - h
                lm = loss_fn()
                flat[i] = orig
                gflat[i] = (lp - lm) / (2.0 * h)
            grads[group][key] = g
    return grads


def fd_grad_array(loss_fn, arr, h=1e-6):
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric):
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
    return float(np.max(np.abs(a - n) / denom))


def max_rel_err_tree(analytic, numeric):
    worst = 0.0
    for group in analytic:
        for key in analytic[group]:
            worst = max(worst, max_rel_err(analytic[group][key], numeric[group][key]))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
