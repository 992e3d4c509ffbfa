"""Compare the compiled and numpy GRU recurrence kernels (forward + backward).

    python3 benchmarks/bench_gru.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from fusionattn._kernels import _gru_py

try:
    from fusionattn._kernels import _gru_ext
except ImportError:
    _gru_ext = None

# (batch, steps, hidden): per-utterance and training-batch shapes at the full
# sizes (audio after the time conv, vision, text) plus a small case
SHAPES = [(1, 500, 60), (1, 128, 60), (32, 25, 60), (32, 128, 60), (32, 500, 60), (8, 50, 8)]


def _case(B, steps, H, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((B, steps, 3 * H)), rng.standard_normal((3 * H, H)) * 0.2, rng.standard_normal(3 * H) * 0.2


def _fwd_bwd(impl, xp, w, b):
    hs, cache = impl.gru_forward(xp, w, b, False)
    impl.gru_backward(np.ones_like(hs), w, hs, cache, False)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = [("python", _gru_py)] + ([("cython", _gru_ext)] if _gru_ext is not None else [])
    if _gru_ext is None:
        print("compiled kernel not built; timing the numpy fallback only")
    print(f"{'B':>4} {'T':>5} {'H':>4}  " + "  ".join(f"{n + ' ms':>11}" for n, _ in impls) + ("   speedup" if len(impls) == 2 else ""))
    for B, steps, H in SHAPES:
        xp, w, b = _case(B, steps, H)
        times = []
        for _, impl in impls:
            n = max(1, int(0.2 / max(timeit.timeit(lambda: _fwd_bwd(impl, xp, w, b), number=1), 1e-4)))
            best = min(timeit.repeat(lambda: _fwd_bwd(impl, xp, w, b), number=n, repeat=args.repeat)) / n
            times.append(best * 1e3)
        cols = "  ".join(f"{t:11.3f}" for t in times)
        extra = f"   {times[0] / times[1]:7.2f}x" if len(times) == 2 else ""
        print(f"{B:4d} {steps:5d} {H:4d}  {cols}{extra}")


if __name__ == "__main__":
    main()
