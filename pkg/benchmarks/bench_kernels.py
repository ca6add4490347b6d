"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times each kernel on a toy-CNN sized tensor and one full training step,
checks both backends agree, and prints a table of milliseconds per call.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from cafewidth.archgraph import LayerKind, LayerSpec, NetworkGraph
from cafewidth.nnkernel import Batch, SupernetState, backward_and_step, kernels


def toy_graph() -> NetworkGraph:
    return NetworkGraph((
        LayerSpec(1, LayerKind.CONV, 8, 8, 3, 16, "g1", "input"),
        LayerSpec(2, LayerKind.DEPTHWISE, 8, 8, 3, 16, "g1", "g1"),
        LayerSpec(3, LayerKind.CONV, 8, 8, 3, 16, "g2", "g1"),
        LayerSpec(4, LayerKind.CONV, 4, 4, 3, 16, "g3", "g2"),
        LayerSpec(5, LayerKind.DENSE, 1, 1, 1, 10, "logits", "g3"),
    ), 1, 10)


def cases(rng):
    x = rng.normal(size=(64, 16, 8, 8))
    cols = rng.normal(size=(64 * 64, 16 * 9))
    w = rng.normal(size=(16, 3, 3))
    graph = toy_graph()
    batch = Batch(rng.normal(size=(64, 1, 8, 8)), rng.integers(0, 10, 64))
    state = SupernetState.init(graph, 0)
    return {
        "im2col": lambda: kernels.im2col(x, 3),
        "col2im": lambda: kernels.col2im(cols, 64, 16, 8, 8, 3),
        "dw_forward": lambda: kernels.dw_forward(x, w),
        "dw_backward": lambda: kernels.dw_backward(x, w, x),
        "train_step": lambda: backward_and_step(state, graph, None, batch, 0.01),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = kernels.available()
    before = kernels.active()
    times: dict[str, dict[str, float]] = {}
    outputs = {}
    for name in backends:
        kernels.use(name)
        fns = cases(np.random.default_rng(0))
        outputs[name] = {k: fns[k]() for k in ("im2col", "col2im", "dw_forward")}
        for k, fn in fns.items():
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            times.setdefault(k, {})[name] = best * 1e3
    kernels.use(before)
    if len(backends) > 1:
        for k in outputs[backends[0]]:
            np.testing.assert_allclose(outputs[backends[0]][k], outputs[backends[1]][k], atol=1e-10)
    header = f"{'kernel':<12}" + "".join(f"{b + ' ms':>14}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for k, row in times.items():
        line = f"{k:<12}" + "".join(f"{row[b]:>14.3f}" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:>9.2f}x"
        print(line)
    if len(backends) == 1:
        print("compiled kernels unavailable; only the numpy backend was timed")


if __name__ == "__main__":
    main()
