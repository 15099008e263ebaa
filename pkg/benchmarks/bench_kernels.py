"""Time the numba and numpy kernel backends on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 20]

Also times one forward+backward pass of the desk model under each backend
(the backend is chosen per process, so that part runs in a subprocess).
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from anchorpose.diffmath import kernels


def best_of(fn, repeat):
    fn()  # warm-up, includes numba compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    # deformable attention at desk scale: batch 32 x 2 heads, 48 anchors x 2 points
    feat = rng.standard_normal((64, 8, 8, 32)).astype(np.float32)
    pts = rng.uniform(-1, 8, (64, 96, 2)).astype(np.float32)
    gout = rng.standard_normal((64, 96, 32)).astype(np.float32)
    # conv backward scatter: 32 images, 16 channels, 3x3 at 32x32 (im2col is shared numpy code)
    cols = rng.standard_normal((32, 16 * 9, 32 * 32)).astype(np.float32)
    return {
        "bilinear_forward": lambda b: kernels.bilinear_forward(feat, pts, backend=b),
        "bilinear_backward": lambda b: kernels.bilinear_backward(feat, pts, gout, backend=b),
        "col2im 3x3/s1": lambda b: kernels.col2im(cols, 16, 34, 34, 3, 3, 1, 32, 32, backend=b),
    }


STEP_SNIPPET = """
import time, numpy as np
from anchorpose.config import TrainConfig
from anchorpose.data_synth import SyntheticHandConfig, generate_dataset, stack_records
from anchorpose.losses import compute_losses
from anchorpose.train_eval import AnchorPoseNet
from anchorpose.train_eval.train import loss_config
cfg = TrainConfig()
data = stack_records(generate_dataset(SyntheticHandConfig(), cfg.batch_size, seed=0))
model = AnchorPoseNet(cfg)
def step():
    model.zero_grad()
    pred = model(data.images)
    compute_losses(pred, model.anchors, data.targets, loss_config(cfg)).total_tensor.backward()
step()
best = min((lambda t0: (step(), time.perf_counter() - t0)[1])(time.perf_counter()) for _ in range(%d))
print(best)
"""


def model_step(backend, repeat):
    env = dict(os.environ, ANCHORPOSE_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET % repeat], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--model-repeat", type=int, default=3)
    ap.add_argument("--skip-model", action="store_true")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba is not importable; only the numpy backend can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':20s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    for name, fn in kernel_cases(rng).items():
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        t_nb = best_of(lambda: fn("numba"), args.repeat) if kernels.HAVE_NUMBA else float("nan")
        print(f"{name:20s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f}x")
    if not args.skip_model:
        t_np = model_step("numpy", args.model_repeat)
        t_nb = model_step("numba", args.model_repeat)
        print(f"{'desk train step':20s} {t_np * 1e3:10.1f} {t_nb * 1e3:10.1f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
