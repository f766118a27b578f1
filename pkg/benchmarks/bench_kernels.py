"""Compare the numba kernels against their pure-numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Each pair is timed on identical inputs after one warm-up call (which also
triggers JIT compilation), and the outputs are checked for agreement. The
end-to-end row times one supernet training step under each backend in a
fresh interpreter, since the backend is fixed at import time by
GROWTAS_BACKEND.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from growtas import kernels as K
from growtas._accel import HAVE_NUMBA

STEP_SNIPPET = """
import timeit
import numpy as np
from growtas.space import toy_space
from growtas.supernet import OptimConfig, init_weights, train_step
sp = toy_space()
w = init_weights(sp, 0)
rng = np.random.default_rng(0)
x = rng.normal(size=(32, sp.seq_len, sp.input_dim)); y = rng.integers(0, sp.num_classes, 32)
opt = OptimConfig()
train_step(w, sp.max_arch, x, y, opt)
print(min(timeit.repeat(lambda: train_step(w, sp.max_arch, x, y, opt), number=20, repeat={repeat})) / 20)
"""


def cases(rng):
    x = rng.normal(size=(4096, 64))
    g = rng.normal(size=x.shape)
    gamma, beta = rng.normal(size=64), rng.normal(size=64)
    _, xhat, rstd = K._ln_fwd_np(x, gamma, beta, 1e-5)
    p = K._softmax_np(x)
    pw = rng.normal(size=(256, 256))
    gw = rng.normal(size=pw.shape)
    mask = np.ones(pw.shape, dtype=np.bool_)

    def adam(fn):
        def run():
            m, v, n = np.zeros_like(pw), np.zeros_like(pw), np.zeros_like(pw)
            q = pw.copy()
            fn(q, gw, m, v, n, mask, 1e-3, 0.9, 0.999, 1e-8, 0.01)
            return q
        return run

    return [
        ("layernorm fwd", lambda: K._ln_fwd_nb(x, gamma, beta, 1e-5)[0], lambda: K._ln_fwd_np(x, gamma, beta, 1e-5)[0]),
        ("layernorm bwd", lambda: K._ln_bwd_nb(g, xhat, rstd, gamma)[0], lambda: K._ln_bwd_np(g, xhat, rstd, gamma)[0]),
        ("gelu fwd", lambda: K._gelu_fwd_nb(x), lambda: K._gelu_fwd_np(x)),
        ("gelu bwd", lambda: K._gelu_bwd_nb(g, x), lambda: K._gelu_bwd_np(g, x)),
        ("softmax fwd", lambda: K._softmax_nb(x), lambda: K._softmax_np(x)),
        ("softmax bwd", lambda: K._softmax_bwd_nb(g, p), lambda: K._softmax_bwd_np(g, p)),
        ("adamw step", adam(K._adamw_nb), adam(K._adamw_np)),
    ]


def step_time(backend, repeat):
    env = dict(os.environ, GROWTAS_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path exists")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  max|diff|")
    for name, nb, ref in cases(rng):
        a, b = nb(), ref()
        diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
        t_nb = min(timeit.repeat(nb, number=10, repeat=args.repeat)) / 10 * 1e3
        t_np = min(timeit.repeat(ref, number=10, repeat=args.repeat)) / 10 * 1e3
        print(f"{name:<16}{t_nb:>10.3f}{t_np:>10.3f}{t_np / t_nb:>8.2f}x  {diff:.2e}")
    t_nb, t_np = step_time("numba", args.repeat), step_time("numpy", args.repeat)
    print(f"{'train step':<16}{t_nb * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
