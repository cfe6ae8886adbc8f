"""Central finite-difference gradient checking."""

import numpy as np

from .autodiff import Tape


def numeric_grad(fn, params, name, step=1e-5):
    """Central differences of scalar ``fn(params)`` w.r.t. ``params[name]``."""
    p = params[name]
    out = np.zeros_like(p)
    flat = p.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(params)
        flat[i] = orig - step
        lo = fn(params)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return out


def relative_error(analytic, numeric, floor=1e-8):
    """Max-norm relative error, guarded against vanishing gradients."""
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic)) if analytic.size else 0.0,
                np.max(np.abs(numeric)) if numeric.size else 0.0, floor)
    return diff / scale


def check_gradients(build_loss, params, step=1e-5):
    """Compare tape gradients with central differences for every parameter.

    ``build_loss(tape, vars)`` must return a scalar :class:`Var`, where
    ``vars`` maps names to tape parameters. Returns ``{name: rel_error}``.
    """
    tape = Tape()
    vars_ = {k: tape.param(v, name=k) for k, v in params.items()}
    analytic = tape.backward(build_loss(tape, vars_))

    def scalar(ps):
        t = Tape()
        vs = {k: t.param(v, name=k) for k, v in ps.items()}
        return float(build_loss(t, vs).value)

    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    return {
        k: relative_error(analytic[k], numeric_grad(scalar, work, k, step))
        for k in params
    }
