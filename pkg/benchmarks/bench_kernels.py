"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 8] [--size 64]

Each kernel is run once untimed (so numba compiles or loads its cache),
then timed over ``--repeat`` calls. The last section times a full
target-plus-generator forward/backward pass in a subprocess per path,
selected with the ``SSAT_NUMBA`` environment flag as a user would.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from ssat import _kernels as K

STEP = """
import time, numpy as np
from ssat import nets, attack, tensor as T
rng = np.random.default_rng(0)
x = T.Tensor(rng.uniform(0, 255, size=({n}, 3, {s}, {s})).astype(np.float32))
tgt = nets.build_target_fcn(nets.ModelConfig(kind="TargetFCN")).freeze()
gen = nets.build_generator_unet(nets.ModelConfig(kind="GeneratorUNet"))
labels = np.zeros(({n}, {s}, {s}), dtype=np.int64)
def step():
    out = nets.forward_generator(gen, x)
    xa = attack.apply_perturbation(x, attack.scale_perturbation(out.raw_perturbation, 10.0))
    loss = T.cross_entropy_pixelwise(nets.forward_target(tgt, xa), labels)
    T.backward(loss)
    gen.zero_grad()
step()
t = time.perf_counter()
for _ in range({r}):
    step()
print((time.perf_counter() - t) / {r})
"""


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(n, s):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, 16, s, s)).astype(np.float32)
    cols = K._im2col_np(x, 3, 1, 1)
    pooled, idx = K._maxpool_fwd_np(x, 2)
    small = rng.normal(size=(n, 16, s // 2, s // 2)).astype(np.float32)
    up_g = rng.normal(size=(n, 16, s, s)).astype(np.float32)
    logits = rng.normal(size=(n, 8, s, s)).astype(np.float32)
    labels = rng.integers(0, 8, size=(n, s, s))
    weights = np.ones((n, s, s), np.float32)
    shape = x.shape
    return [
        ("im2col 3x3", lambda: K._im2col_np(x, 3, 1, 1), lambda: K._im2col_nb(x, 3, 1, 1)),
        ("col2im 3x3", lambda: K._col2im_np(cols, shape, 3, 1, 1), lambda: K._col2im_nb(cols, *shape, 3, 1, 1)),
        ("maxpool fwd", lambda: K._maxpool_fwd_np(x, 2), lambda: K._maxpool_fwd_nb(x, 2)),
        ("maxpool bwd", lambda: K._maxpool_bwd_np(pooled, idx, shape, 2), lambda: K._maxpool_bwd_nb(pooled, idx, *shape, 2)),
        ("upsample fwd", lambda: K._upsample_fwd_np(small, 2), lambda: K._upsample_fwd_nb(small, 2)),
        ("upsample bwd", lambda: K._upsample_bwd_np(up_g, 2, small.shape), lambda: K._upsample_bwd_nb(up_g, 2, *small.shape)),
        ("softmax xent", lambda: K._xent_np(logits, labels, weights), lambda: K._xent_nb(logits, labels, weights)),
    ]


def train_step_time(numba_on, n, s, repeat):
    env = dict(os.environ, SSAT_NUMBA="1" if numba_on else "0")
    code = STEP.format(n=n, s=s, r=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args(argv)

    if K.numba is None:
        print("numba is not installed; nothing to compare")
        return 1

    print(f"batch={args.batch} size={args.size}x{args.size} repeat={args.repeat} (best-of, ms)")
    print(f"{'kernel':<14} {'numpy':>9} {'numba':>9} {'speedup':>8}")
    for name, np_fn, nb_fn in kernel_cases(args.batch, args.size):
        t_np = best_of(np_fn, args.repeat)
        t_nb = best_of(nb_fn, args.repeat)
        print(f"{name:<14} {t_np * 1e3:9.3f} {t_nb * 1e3:9.3f} {t_np / t_nb:7.2f}x")

    steps = max(2, args.repeat // 5)
    t_np = train_step_time(False, args.batch, args.size, steps)
    t_nb = train_step_time(True, args.batch, args.size, steps)
    print(f"{'attack step':<14} {t_np * 1e3:9.1f} {t_nb * 1e3:9.1f} {t_np / t_nb:7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
