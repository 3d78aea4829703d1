"""Benchmark the numba kernel backend against the pure-numpy fallback.

Times the raw conv/pool kernels at gradient-check scale and training scale,
then a full model forward+backward pass under each backend (swapped live on
the kernels module). Run: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from sigclust import kernels, losses, nn

HAVE_NUMBA = hasattr(kernels, "conv1d_forward_numba")


def timeit(fn, repeat=10):
    fn()  # warm-up (and jit compile)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e3


def bench_kernels():
    rng = np.random.default_rng(0)
    shapes = [
        ("fd-scale conv2", 4, 32, 128, 16),
        ("train conv2", 64, 32, 128, 128),
        ("train conv3", 64, 128, 128, 64),
        ("train conv4", 64, 128, 32, 32),
    ]
    print(f"{'case':<18}{'fwd numpy':>12}{'fwd numba':>12}{'bwd numpy':>12}{'bwd numba':>12}")
    for label, m, cin, cout, length in shapes:
        x = rng.normal(size=(m, cin, length))
        w = rng.normal(size=(cout, cin, 3))
        b = rng.normal(size=cout)
        dy = rng.normal(size=(m, cout, length))
        row = [timeit(lambda: kernels.conv1d_forward_numpy(x, w, b))]
        row.append(timeit(lambda: kernels.conv1d_forward_numba(x, w, b)) if HAVE_NUMBA else float("nan"))
        row.append(timeit(lambda: kernels.conv1d_backward_numpy(x, w, dy)))
        row.append(timeit(lambda: kernels.conv1d_backward_numba(x, w, dy)) if HAVE_NUMBA else float("nan"))
        print(f"{label:<18}" + "".join(f"{v:>10.2f}ms" for v in row))


def bench_model(backend):
    saved = (kernels.conv1d_forward, kernels.conv1d_backward,
             kernels.maxpool2_forward, kernels.maxpool2_backward)
    kernels.conv1d_forward = getattr(kernels, f"conv1d_forward_{backend}")
    kernels.conv1d_backward = getattr(kernels, f"conv1d_backward_{backend}")
    kernels.maxpool2_forward = getattr(kernels, f"maxpool2_forward_{backend}")
    kernels.maxpool2_backward = getattr(kernels, f"maxpool2_backward_{backend}")
    try:
        model = nn.init_model(128, 4, seed=0)
        rng = np.random.default_rng(1)
        batch = rng.normal(size=(64, 2, 128))
        pairs = losses.pairs_from_labels(rng.integers(0, 4, size=64), 4)

        def step():
            feats = nn.forward(model, batch, train_mode=True)
            res = losses.pairwise_loss(losses.similarity_matrix(feats), pairs, 0.1)
            nn.backward(model, batch, losses.feature_gradient(feats, res.grad))

        ms = timeit(step, repeat=5)
        print(f"full fwd+bwd, batch 64 x 2 x 128, {backend:>5}: {ms:8.1f} ms/step")
    finally:
        (kernels.conv1d_forward, kernels.conv1d_backward,
         kernels.maxpool2_forward, kernels.maxpool2_backward) = saved


def main():
    print(f"active backend: {kernels.active_backend()}")
    if not HAVE_NUMBA:
        print("numba not importable; benchmarking the numpy path only")
    bench_kernels()
    bench_model("numpy")
    if HAVE_NUMBA:
        bench_model("numba")


if __name__ == "__main__":
    main()
