import numpy as np
import pytest


def central_diff(f, x, eps=1e-3):
    """Numerical gradient of scalar ``f`` w.r.t. float64 array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-7):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tagged_pair(h=40, w=36):
    """RGGB fixture whose every photosite holds a unique id; the target carries the
    same id in channel 0 so the mosaic/target geometry can be tracked too."""
    from microisp.imaging import TrainPair, pack_mosaic
    n = 2 * h * 2 * w
    ids = (np.arange(n, dtype=np.float64).reshape(2 * h, 2 * w) + 1) / (n + 1)
    target = np.stack([ids, ids, ids], axis=-1).astype(np.float32)
    return TrainPair(pack_mosaic(ids.astype(np.float32)[:, :, None]), target), ids


def cfa_oracle_violations(out_pair, ids):
    """Count packed samples whose original site color disagrees with the channel
    meaning (R, G1, G2, B), plus samples whose target no longer lines up."""
    from microisp.imaging import cfa_color_map, unpack_mosaic
    flat = ids.astype(np.float32).ravel()
    order = np.argsort(flat)
    colors = cfa_color_map(*ids.shape).ravel()
    packed = out_pair.packed_input
    bad = 0
    for c, want in enumerate((0, 1, 1, 2)):
        vals = packed[:, :, c].ravel()
        pos = order[np.clip(np.searchsorted(flat[order], vals), 0, flat.size - 1)]
        bad += int(np.count_nonzero(flat[pos] != vals))  # sample not from the original mosaic
        bad += int(np.count_nonzero(colors[pos] != want))
    mosaic = unpack_mosaic(packed)[:, :, 0]
    bad += int(np.count_nonzero(mosaic != out_pair.target_rgb[:, :, 0]))
    return bad
