"""Central finite-difference checker shared by the gradient tests."""
import numpy as np

STEP = 1e-5


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def probe(fn, flat: np.ndarray, grad: np.ndarray, indices) -> float:
    """Max relative error of ``grad`` against central differences of ``fn`` at ``indices``.

    ``fn`` maps a flat parameter vector to a scalar; ``flat`` is not modified.
    """
    worst = 0.0
    for i in indices:
        x = flat.copy()
        x[i] += STEP
        up = fn(x)
        x[i] -= 2 * STEP
        down = fn(x)
        numeric = (up - down) / (2 * STEP)
        worst = max(worst, relative_error(grad[i], numeric))
    return worst


def block_indices(dims, rng: np.random.Generator, per_block: int, grad=None):
    """Random coordinates drawn from every parameter block.

    With ``grad`` given, half of each block's probes come from coordinates
    with a non-negligible gradient so the check is not dominated by zeros.
    """
    out = []
    for name, sl in dims.slices().items():
        idx = np.arange(sl.start, sl.stop)
        picks = list(rng.choice(idx, size=min(per_block, len(idx)), replace=False))
        if grad is not None:
            live = idx[np.abs(grad[idx]) > 1e-7]
            if len(live):
                half = per_block // 2
                picks = picks[:per_block - half] + list(rng.choice(live, size=min(half, len(live)), replace=False))
        out.extend(int(i) for i in picks)
    return out
