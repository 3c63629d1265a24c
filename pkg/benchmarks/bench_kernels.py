"""Numba vs numpy kernel timings, plus an end-to-end training step per backend mode.

    python benchmarks/bench_kernels.py [--repeat 50] [--no-e2e]

Shapes match the desk-scale model (80 patches, D=64, 2 heads, batch 16).
End-to-end timings run in child processes because the backend is fixed at
import time by SMAE_NUMBA.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from smae import _kernels as K

B, N, D, H = 16, 81, 64, 2


def _cases(rng):
    att = rng.normal(size=(B * H * N, N))
    y = K.np_softmax_fwd(att)
    x = rng.normal(size=(B * N, D))
    xhat, rstd = K.np_layernorm_fwd(x, 1e-5)
    h = rng.normal(size=(B * N, 4 * D))
    idx = rng.integers(0, 2562, size=80 * 45)
    src = rng.normal(size=(80 * 45, 4))
    return {
        "layernorm_fwd": (x, 1e-5),
        "layernorm_bwd": (rng.normal(size=x.shape), xhat, rstd),
        "softmax_fwd": (att,),
        "softmax_bwd": (y, rng.normal(size=y.shape)),
        "gelu_fwd": (h,),
        "gelu_bwd": (h, rng.normal(size=h.shape)),
        "scatter_add_rows": (np.zeros((2562, 4)), idx, src),
    }


def bench_kernels(repeat: int) -> None:
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':<18} {'numpy us':>10} {'numba us':>10} {'speedup':>8}  auto")
    for name, args in cases.items():
        row = {}
        for backend in ("numpy", "numba"):
            fn = K.implementation(name, backend)
            fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])  # compile / warm up
            t = timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)
            row[backend] = min(t) * 1e6
        auto = K._select("auto")[name]
        print(f"{name:<18} {row['numpy']:>10.1f} {row['numba']:>10.1f} {row['numpy'] / row['numba']:>7.2f}x  {auto}")


_STEP = r"""
import time, numpy as np
from smae import ssl, tensor as T
from smae.sit import SitConfig
cfg = SitConfig()
model = ssl.SmaeModel(cfg, np.random.default_rng(0), np.float32)
opt = T.SGD(model.parameters(), lr=0.1)
tok = np.random.default_rng(1).normal(size=(16, cfg.n_patches, cfg.token_dim)).astype(np.float32)
rng = np.random.default_rng(2)
def step():
    plans = [ssl.sample_mask(cfg.n_patches, 0.5, rng) for _ in range(16)]
    opt.zero_grad(); _, loss = ssl.smae_forward(model, tok, plans); T.backward(loss); opt.step()
step()
ts = []
for _ in range(REPEAT):
    t = time.perf_counter(); step(); ts.append(time.perf_counter() - t)
print(min(ts) * 1e3)
"""


def bench_e2e(repeat: int) -> None:
    print(f"\n{'SMAE_NUMBA':<10} {'sMAE train step ms':>20}")
    for mode in ("0", "1", "auto"):
        env = dict(os.environ, SMAE_NUMBA=mode)
        out = subprocess.run([sys.executable, "-c", _STEP.replace("REPEAT", str(repeat))], env=env,
                             capture_output=True, text=True, check=True)
        print(f"{mode:<10} {float(out.stdout):>20.2f}")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=50)
    p.add_argument("--no-e2e", action="store_true")
    args = p.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")
    bench_kernels(args.repeat)
    if not args.no_e2e:
        bench_e2e(max(5, args.repeat // 5))


if __name__ == "__main__":
    main()
