"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 25] [--no-model]

Kernel shapes follow a training batch of the student (64 x 90 log-Mel input,
64 filters). The model section runs one forward/backward pass per backend in
a fresh interpreter, since the backend is fixed at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from liser import kernels as K

MODEL_SNIPPET = """
import json, time, numpy as np
from liser import kernels, tensor as T
from liser.model import forward, init_student
p = init_student(8, 7)
x = np.random.default_rng(0).normal(size=({batch}, 1, 64, 90))
def step():
    with T.Tape() as tape:
        out = forward(p, x, "train")
        loss = T.tsum(out.sup)
    tape.backward(loss, [p[n] for n in p.names()])
step()  # warm-up (numba compile / cache load)
ts = []
for _ in range({repeat}):
    t0 = time.perf_counter(); step(); ts.append(time.perf_counter() - t0)
print(json.dumps({{"backend": kernels.BACKEND, "best": min(ts)}}))
"""


def cases(batch: int, rng):
    x1 = rng.normal(size=(batch, 1, 66, 92))
    x2 = rng.normal(size=(batch, 64, 34, 47))
    cols = K.np_im2col(x2, 3, 3)
    act = rng.normal(size=(batch, 64, 64, 90))
    out, arg = K.np_maxpool_forward(act, 2, 2)
    mu, var = K.np_bn_stats(act)
    invstd = 1 / np.sqrt(var + 1e-5)
    gamma, beta = rng.normal(size=64), rng.normal(size=64)
    xhat, _ = K.np_bn_apply(act, mu, invstd, gamma, beta)
    z, c = rng.normal(size=(batch, 256)), rng.normal(size=(batch, 64))
    _, c1, gates = K.np_lstm_cell_forward(z, c)
    return {
        "im2col conv1": ("im2col", (x1, 3, 3)),
        "im2col conv2": ("im2col", (x2, 3, 3)),
        "col2im conv2": ("col2im", (cols, batch, 64, 34, 47, 3, 3)),
        "maxpool fwd": ("maxpool_forward", (act, 2, 2)),
        "maxpool bwd": ("maxpool_backward", (rng.normal(size=out.shape), arg, 64, 90, 2, 2)),
        "bn stats": ("bn_stats", (act,)),
        "bn apply": ("bn_apply", (act, mu, invstd, gamma, beta)),
        "bn bwd": ("bn_backward", (rng.normal(size=act.shape), xhat, gamma, invstd, True)),
        "lstm cell fwd": ("lstm_cell_forward", (z, c)),
        "lstm cell bwd": ("lstm_cell_backward", (rng.normal(size=(batch, 64)), rng.normal(size=(batch, 64)),
                                                 gates, c1, c)),
    }


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def bench_kernels(batch: int, repeat: int) -> list[dict]:
    rows = []
    for label, (name, args) in cases(batch, np.random.default_rng(0)).items():
        nb, npf = getattr(K, "nb_" + name), getattr(K, "np_" + name)
        diff = _max_diff(nb(*args), npf(*args))  # also triggers compilation
        t_nb = min(timeit.repeat(lambda: nb(*args), number=1, repeat=repeat))
        t_np = min(timeit.repeat(lambda: npf(*args), number=1, repeat=repeat))
        rows.append({"kernel": label, "numba_ms": 1e3 * t_nb, "numpy_ms": 1e3 * t_np,
                     "speedup": t_np / t_nb, "max_abs_diff": diff})
    return rows


def bench_model(batch: int, repeat: int) -> list[dict]:
    out = []
    for flag in ("1", "0"):
        env = dict(os.environ, LISER_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", MODEL_SNIPPET.format(batch=batch, repeat=repeat)],
                             env=env, capture_output=True, text=True, check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=25)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-model", action="store_true", help="skip the whole-model comparison")
    ap.add_argument("--json", action="store_true", help="machine-readable output")
    args = ap.parse_args(argv)
    if not K.USE_NUMBA:
        print("warning: LISER_NUMBA=0 or numba missing, nb_* run as plain python", file=sys.stderr)
    rows = bench_kernels(args.batch, args.repeat)
    model = [] if args.no_model else bench_model(args.batch, args.repeat)
    if args.json:
        print(json.dumps({"kernels": rows, "model": model}, indent=2))
        return
    print(f"{'kernel':<16}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max diff':>11}")
    for r in rows:
        print(f"{r['kernel']:<16}{r['numba_ms']:>10.2f}{r['numpy_ms']:>10.2f}{r['speedup']:>8.2f}x"
              f"{r['max_abs_diff']:>11.1e}")
    for m in model:
        print(f"forward+backward, batch {args.batch}, backend {m['backend']}: {1e3 * m['best']:.0f} ms")


if __name__ == "__main__":
    main()
