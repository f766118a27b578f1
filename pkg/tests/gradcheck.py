"""Central finite-difference gradient checking."""
import numpy as np

# Relative error uses |a| + |n| in the denominator, floored so entries whose
# true gradient is exactly zero (e.g. the key bias, which softmax cancels)
# are judged by absolute error instead.
FLOOR = 1e-4


def rel_err(analytic, numeric, floor=FLOOR):
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)


def probe(f, arrays, grads, n_probes, rng, h=1e-5):
    """Compare ``grads[name][idx]`` with a central difference of ``f()`` at random entries.

    ``arrays`` maps names to the float64 arrays ``f`` reads (perturbed in
    place and restored). Probes are spread over the arrays round-robin.
    Returns the list of relative errors.
    """
    names = [n for n in arrays if arrays[n].size]
    errs = []
    for i in range(n_probes):
        name = names[i % len(names)]
        a = arrays[name]
        idx = tuple(int(rng.integers(0, s)) for s in a.shape)
        old = a[idx]
        a[idx] = old + h
        fp = f()
        a[idx] = old - h
        fm = f()
        a[idx] = old
        errs.append(rel_err(float(grads[name][idx]), (fp - fm) / (2 * h)))
    return errs
