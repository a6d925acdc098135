import numpy as np
from hypothesis import HealthCheck, settings

from flowmix import autodiff as ad
from flowmix.flows import (BatchNormLayer, CouplingLayer, MAFLayer, PLULayer, PReLULayer,
                           build_alternating_masks)

settings.register_profile("flowmix", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("flowmix")


def max_rel_err(analytic, numeric, floor=1e-6):
    """Largest absolute deviation scaled by the larger of the two gradients' max-norms.

    ``floor`` keeps identically-zero gradients (finite differences return
    rounding noise there) from producing noise/noise ratios.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), floor)
    return float(np.abs(analytic - numeric).max(initial=0) / scale)


def param_gradient_errors(loss_fn, params):
    """Compare backward() with finite differences for every Param; returns {name: error}."""
    loss = loss_fn()
    grads = ad.backward(loss, params)
    errors = {}
    for p in params:
        def f(v, p=p):
            old = p.value.copy()
            p.value[...] = v
            try:
                return float(loss_fn().value)
            finally:
                p.value[...] = old
        fd = ad.finite_diff_gradient(f, p.value.copy(), h=1e-5)
        errors[p.name] = max_rel_err(grads[p.name], fd)
    return errors


def perturb(params, rng, scale=0.3):
    for p in params:
        p.value[...] += rng.normal(0.0, scale, p.shape)


LAYER_KINDS = ["plu", "prelu", "batchnorm", "coupling", "maf"]


def make_layer(kind, dim, rng, scale=0.3):
    """A layer of the given kind with random (non-identity) parameters."""
    if kind == "plu":
        layer = PLULayer(dim, rng)
    elif kind == "prelu":
        layer = PReLULayer(dim, alpha=float(rng.uniform(0.3, 2.0)))
    elif kind == "batchnorm":
        layer = BatchNormLayer(dim)
        layer.running_mean = rng.normal(size=dim)
        layer.running_var = rng.uniform(0.3, 3.0, size=dim)
        layer.training = False
    elif kind == "coupling":
        layer = CouplingLayer(dim, build_alternating_masks(dim, 1)[0], [5], rng)
    elif kind == "maf":
        layer = MAFLayer(dim, [6], rng, order=rng.permutation(dim))
    else:
        raise ValueError(kind)
    perturb(layer.params, rng, scale)
    return layer


def numerical_jacobian(fn, z, h=1e-5):
    d = z.shape[0]
    jac = np.zeros((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, j] = (fn(z + e) - fn(z - e)) / (2 * h)
    return jac


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
