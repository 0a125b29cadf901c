"""Compare the numba and numpy convolution kernels.

Two levels are timed:

* the raw im2col / col2im kernels on the layer shapes that dominate a desk-scale
  training step, both backends in this process;
* one full LC-GAN generator update (forward + backward through G, F, D and S),
  once per backend in a fresh interpreter because the backend is chosen at
  import time from ``LCGAN_KERNELS``.

Usage: python benchmarks/bench_kernels.py [--repeats 20] [--steps 5]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from lcgan.diffcomp import kernels

# (N, C, H, W, k, stride, pad): the generator stem, a downsampling conv, a
# residual conv and the discriminator's first layer at 64x64
SHAPES = [
    (2, 3, 64, 64, 7, 1, 3),
    (2, 16, 64, 64, 3, 2, 1),
    (2, 64, 16, 16, 3, 1, 1),
    (2, 3, 64, 64, 4, 2, 1),
]

STEP_SCRIPT = """
import json, time
import numpy as np
from lcgan.diffcomp import KERNEL_BACKEND
from lcgan.losses import LossConfig
from lcgan.networks import build_segmentor
from lcgan.synthdata import default_specs, in_memory
from lcgan.training import AblationFlags, build_lcgan, generator_step, to_batch

spec_x, spec_y = default_specs()
x, y = in_memory(spec_x, 1), in_memory(spec_y, 1)
models = build_lcgan(build_segmentor().eval(), AblationFlags(), {})
cfg = LossConfig()
xb, yb = to_batch(x.images), to_batch(y.images)
def step():
    total, _, _ = generator_step(models, xb, x.masks, yb, cfg)
    total.backward()
step()  # compile / warm caches
t = time.perf_counter()
for _ in range(STEPS):
    step()
print(json.dumps({"backend": KERNEL_BACKEND, "seconds_per_step": (time.perf_counter() - t) / STEPS}))
"""


def bench_kernels(repeats):
    rows = []
    rng = np.random.default_rng(0)
    backends = ["numpy"] + (["numba"] if kernels.numba is not None else [])
    for n, c, h, w, k, s, p in SHAPES:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        row = {"shape": f"{n}x{c}x{h}x{w} k{k} s{s} p{p}"}
        for name in backends:
            i2c, c2i = kernels.get_backend(name)
            cols = i2c(x, k, k, s, p, 1)  # warm-up (and numba compilation)
            c2i(cols, x.shape, k, k, s, p, 1)
            row[f"{name}_im2col_ms"] = 1e3 * min(timeit.repeat(lambda: i2c(x, k, k, s, p, 1),
                                                               number=1, repeat=repeats))
            row[f"{name}_col2im_ms"] = 1e3 * min(timeit.repeat(lambda: c2i(cols, x.shape, k, k, s, p, 1),
                                                               number=1, repeat=repeats))
        rows.append(row)
    return rows


def bench_step(backend, steps):
    env = dict(os.environ, LCGAN_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.replace("STEPS", str(steps))],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args(argv)

    print("kernel timings (best of %d, milliseconds)" % args.repeats)
    for row in bench_kernels(args.repeats):
        parts = [f"{k}={v:.2f}" for k, v in row.items() if k != "shape"]
        print(f"  {row['shape']:24s} " + " ".join(parts))

    print("generator update, forward + backward (seconds per step)")
    for backend in ("numpy", "numba"):
        res = bench_step(backend, args.steps)
        note = "" if res["backend"] == backend else f" (fell back to {res['backend']})"
        print(f"  {backend:6s} {res['seconds_per_step']:.3f}{note}")


if __name__ == "__main__":
    main()
