"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from expandpt import numcore as nc


def numeric_grad(f, arrays, h=1e-4):
    """d f() / d a for each array ``a`` in ``arrays`` (mutated in place and restored)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def check_op(build, shapes, rng, h=1e-4, positive=False):
    """Compare the tape gradient of ``build(*tensors)`` (a scalar) against finite differences."""
    with nc.precision("float64"):
        arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
        tensors = [nc.Tensor(a, requires_grad=True) for a in arrays]
        out = build(*tensors)
        out.backward()
        analytic = [t.grad for t in tensors]

        def f():
            with nc.no_grad():
                return build(*[nc.Tensor(a) for a in arrays]).item()

        numeric = numeric_grad(f, arrays, h)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def check_params(loss_fn, named, rng, n_entries=4, h=1e-4):
    """Finite-difference check of ``loss_fn()`` on a random subset of entries of each tensor.

    ``named`` maps names to float64 parameter tensors whose ``.grad`` already
    holds the analytic gradient. Returns the worst relative error and its name.
    Deep parameters of a freshly initialised model see gradients near 1e-7, so
    the step stays at 1e-4 to keep round-off well under the tolerance.
    """
    worst = (0.0, None)
    for name, t in named.items():
        if t.grad is None:
            continue
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
        num, ana = [], []
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            num.append((fp - fm) / (2 * h))
            ana.append(t.grad.reshape(-1)[i])
        err = rel_err(ana, num) if max(map(abs, num + ana)) > 1e-7 else 0.0
        if err > worst[0]:
            worst = (err, name)
    return worst
