"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--step]

Shapes follow the desk configuration (H_IN=128, h=16, d=32, s=3, n=3, batch 4).
``--step`` also times one full forward/backward training step per backend.
"""

import argparse
import time

import numpy as np

from lowshot import kernels


def _direct(name):
    """The active backend's own implementation, bypassing the dispatch table."""
    mod = kernels._compiled if kernels.BACKEND == "cython" else kernels._kernels_py
    return getattr(mod, name)


def cases(rng):
    f32 = np.float32
    x = rng.random((4, 130, 130, 8)).astype(f32)  # padded conv input
    cols = rng.random((4 * 64 * 64, 72)).astype(f32)
    fp = rng.random((4, 3, 18, 18, 32)).astype(f32)[:, 0]  # padded features, one per image
    k = rng.standard_normal((3, 3, 3, 32)).astype(f32)
    g = rng.standard_normal((3, 16, 16, 32)).astype(f32)
    small = rng.random((4, 32, 32, 8)).astype(f32)
    up = rng.standard_normal((4, 64, 64, 8)).astype(f32)
    feats = rng.random((16, 16, 32)).astype(f32)
    ys = rng.uniform(0, 15, 27)
    xs = rng.uniform(0, 15, 27)
    gs = rng.standard_normal((27, 32)).astype(f32)
    return {
        "im2col 3x3 s2": lambda: kernels.im2col(x, 3, 3, 2),
        "col2im 3x3 s2": lambda: kernels.col2im(cols, x.shape, 3, 3, 2),
        "depthwise_fwd": lambda: [kernels.depthwise_fwd(fp[i], k) for i in range(4)],
        "depthwise_bwd": lambda: [kernels.depthwise_bwd(fp[i], k, g) for i in range(4)],
        "resize_fwd 2x": lambda: kernels.resize_fwd(small, 64, 64),
        "resize_bwd 2x": lambda: _direct("resize_bwd")(up, 32, 32),
        "sample_fwd": lambda: kernels.sample_fwd(feats, ys, xs),
        "sample_bwd": lambda: kernels.sample_bwd(gs, feats.shape, ys, xs),
    }


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def train_step_time(repeat):
    from lowshot.config import ModelConfig, TrainConfig
    from lowshot.data import GeneratorConfig, synth_generate
    from lowshot.model import LowShotCounter
    from lowshot.train import make_batch, make_optimizer, train_step

    scenes = synth_generate(GeneratorConfig(n_train=4, n_val=0, n_test=0), seed=0)["train"]
    model = LowShotCounter(ModelConfig(), 0)
    cfg = TrainConfig()
    opt = make_optimizer(model, cfg)
    batch = make_batch(scenes, 3)
    return timeit(lambda: train_step(model, batch, cfg, opt), repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true", help="also time a desk-scale training step")
    args = ap.parse_args()
    backends = kernels.available()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is timed")
    rng = np.random.default_rng(0)
    table = {}
    for b in backends:
        kernels.use(b)
        for name, fn in cases(rng).items():
            table.setdefault(name, {})[b] = timeit(fn, args.repeat)
        if args.step:
            table.setdefault("train step (batch 4)", {})[b] = train_step_time(max(1, args.repeat // 2))
    head = f"{'kernel':<22}" + "".join(f"{b + ' ms':>12}" for b in backends)
    if len(backends) == 2:
        head += f"{'speedup':>10}"
    print(head)
    print("-" * len(head))
    for name, row in table.items():
        line = f"{name:<22}" + "".join(f"{row[b] * 1e3:>12.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{row['python'] / row['cython']:>9.1f}x"
        print(line)
    if len(backends) == 2 and kernels._BLAS_WINS:
        print(f"note: the dispatcher sends {', '.join(sorted(kernels._BLAS_WINS))} to numpy under both backends; "
              "the rows above time each implementation directly")


if __name__ == "__main__":
    main()
