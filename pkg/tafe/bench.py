"""
Dense vs strip-pair convolution micro-benchmark.

Timings are wall-clock and vary run to run; MAC counts, the cost ratio and
the separability guard are exact and reproducible.
"""
import time
from fractions import Fraction
from typing import Callable, Dict, Sequence, Tuple

import numpy as np

from config.settings import EMBED_DIM
from tafe.errors import UsageError
from tafe.tensor import ConvKernel, conv2d
from utils.logger import RunLogger

TOPOLOGIES = ("dense", "cascade", "parallel")
KERNEL_SIZES = (3, 5, 7)
GUARD_TOL = 1e-10


def parse_size(text: str) -> Tuple[int, int]:
    """'HxW' -> (H, W)"""
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise UsageError(f"size must look like HxW, got {text!r}")
    h, w = int(parts[0]), int(parts[1])
    if h < 1 or w < 1:
        raise UsageError(f"size must be positive, got {text!r}")
    return h, w


def macs_per_output(topology: str, k: int, d: int) -> int:
    """Multiply-accumulates per output element."""
    if topology == "dense":
        return k * k * d
    if topology in ("cascade", "parallel"):
        return 2 * k * d
    raise UsageError(f"unknown topology {topology!r}")


def mac_ratio(k: int) -> Dict[str, object]:
    ratio = Fraction(2 * k, k * k)
    return {
        "cascade_over_dense": f"{2 * k}/{k * k}",
        "reduced": f"{ratio.numerator}/{ratio.denominator}",
        "value": float(ratio),
    }


def compose_strips(row: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Dense k x k kernel equal to applying `row` (1 x k) then `col` (k x 1)."""
    return np.einsum("oma,mib->oiab", col[:, :, :, 0], row[:, :, 0, :])


class KernelBench:

    def __init__(self, logger: RunLogger, d: int = EMBED_DIM, seed: int = 0):
        self.logger = logger
        self.d = d
        self.seed = seed

    def _operands(self, k: int, height: int, width: int):
        rng = np.random.default_rng(self.seed)
        x = rng.standard_normal((1, self.d, height, width))
        row = rng.standard_normal((self.d, self.d, 1, k))
        col = rng.standard_normal((self.d, self.d, k, 1))
        return x, row, col

    def _runners(self, x, row, col) -> Dict[str, Callable[[], np.ndarray]]:
        dense = ConvKernel(compose_strips(row, col))
        row, col = ConvKernel(row, strip=True), ConvKernel(col, strip=True)
        return {
            "dense": lambda: conv2d(x, dense),
            "cascade": lambda: conv2d(conv2d(x, row), col),
            "parallel": lambda: conv2d(x, row) + conv2d(x, col),
        }

    def guard(self, k: int, height: int, width: int) -> Dict[str, object]:
        """Cascaded strips must reproduce the composed dense kernel."""
        x, row, col = self._operands(k, height, width)
        runners = self._runners(x, row, col)
        diff = float(np.max(np.abs(runners["cascade"]() - runners["dense"]())))
        return {"max_abs_diff": diff, "tol": GUARD_TOL, "pass": diff < GUARD_TOL}

    def run(self, k: int, height: int, width: int, reps: int, kernels: Sequence[str] = TOPOLOGIES) -> Dict[str, object]:
        if k not in KERNEL_SIZES:
            raise UsageError(f"k must be one of {KERNEL_SIZES}, got {k}")
        if reps < 1:
            raise UsageError(f"reps must be >= 1, got {reps}")
        for name in kernels:
            if name not in TOPOLOGIES:
                raise UsageError(f"kernel must be one of {TOPOLOGIES}, got {name!r}")

        x, row, col = self._operands(k, height, width)
        runners = self._runners(x, row, col)
        self.logger.info(f"Benchmarking {', '.join(kernels)} at k={k}, {height}x{width}, d={self.d}, {reps} reps")

        results = {}
        for name in TOPOLOGIES:
            entry = {"macs_per_output": macs_per_output(name, k, self.d)}
            if name in kernels:
                runners[name]()  # warm-up
                samples = []
                for _ in range(reps):
                    start = time.perf_counter()
                    runners[name]()
                    samples.append(time.perf_counter() - start)
                entry["wall_clock_mean_s"] = float(np.mean(samples))
                entry["wall_clock_std_s"] = float(np.std(samples))
                self.logger.info(f"{name}: {entry['wall_clock_mean_s'] * 1e3:.3f} ms mean")
            results[name] = entry

        guard = self.guard(k, height, width)
        if not guard["pass"]:
            self.logger.error(f"separability guard failed: max abs diff {guard['max_abs_diff']:.3e}")

        return {
            "k": k,
            "size": [height, width],
            "d": self.d,
            "reps": reps,
            "kernels": results,
            "mac_ratio": mac_ratio(k),
            "guard": guard,
            "timings_note": "wall_clock_* fields are measured timings and differ between runs",
            "pass": guard["pass"],
        }
