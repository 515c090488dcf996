"""Time the compiled and pure-Python kernels on the same inputs.

    python benchmarks/bench_kernels.py [--steps 5000] [--repeats 3]
"""

import argparse
import time

import numpy as np

from gapshap import envlab
from gapshap._kernels import available_backends, load_backend
from gapshap.config_space import default_space, sample


def _forest(rng, m, n_trees, depth):
    nodes, roots = [], []

    def grow(d):
        idx = len(nodes)
        if d == 0:
            nodes.append((-1, 0.0, -1, -1, rng.normal()))
            return idx
        nodes.append(None)
        f, t = int(rng.integers(m)), float(rng.random())
        left, right = grow(d - 1), grow(d - 1)
        nodes[idx] = (f, t, left, right, 0.0)
        return idx

    for _ in range(n_trees):
        roots.append(grow(depth))
    a = np.array(nodes)
    return (a[:, 0].astype(np.int32), a[:, 1].copy(), a[:, 2].astype(np.int32),
            a[:, 3].astype(np.int32), a[:, 4].copy(), np.array(roots, dtype=np.int32))


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(steps):
    space = default_space()
    rng = np.random.default_rng(0)
    forest = _forest(rng, 5, 200, 8)
    x, bg = rng.random(5), rng.random((64, 5))
    X = rng.random((2000, 5))
    out = []
    for task in envlab.TASKS:
        env = envlab.make_env(task, "M")
        for algo in range(4):
            hp = np.asarray(sample(space, algo, np.random.default_rng(algo)).values)
            out.append((f"train {task} algo {algo} ({steps} steps)",
                        lambda k, env=env, algo=algo, hp=hp:
                        k.train_run(*env.kernel_args(), algo, hp, 7, steps)[0]))
    out.append(("forest predict (200 trees, 2000 rows)",
                lambda k: k.forest_predict(*forest, X)))
    out.append(("coalition table (200 trees, m=5, B=64)",
                lambda k: k.coalition_values(*forest, x, bg)))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)
    names = available_backends()
    backends = {n: load_backend(n) for n in names}
    print(f"{'case':48s} " + " ".join(f"{n:>10s}" for n in names) + "   speedup  identical")
    for label, fn in cases(args.steps):
        times, outs = [], []
        for n in names:
            t, o = _best_of(lambda: fn(backends[n]), args.repeats)
            times.append(t)
            outs.append(np.asarray(o))
        same = all(np.array_equal(outs[0], o, equal_nan=True) for o in outs[1:])
        speed = times[-1] / times[0] if len(times) > 1 else 1.0
        print(f"{label:48s} " + " ".join(f"{t:9.4f}s" for t in times)
              + f"   {speed:7.1f}x  {same}")


if __name__ == "__main__":
    main()
