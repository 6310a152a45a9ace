"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from gdfd import tensor as T

TOL = {np.float32: 1e-3, np.float64: 1e-6}


def numeric_grad(f, arrays, index, eps=1e-6, kinks=None):
    """d f / d arrays[index] by central differences, evaluated in float64.

    If ``kinks`` is a list, the indices whose one-sided differences disagree
    (the step straddled a non-differentiable point) are appended to it.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    f0 = f(*[T.Tensor(a) for a in base]).item() if kinks is not None else None
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(*[T.Tensor(a) for a in base]).item()
        x[i] = old - eps
        fm = f(*[T.Tensor(a) for a in base]).item()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
        if kinks is not None:
            fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
            if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1e-3):
                kinks.append(i)
    return grad


def analytic_grads(f, arrays, dtype, wrt=None):
    wrt = range(len(arrays)) if wrt is None else wrt
    ts = [T.Tensor(np.asarray(a, dtype=dtype), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = f(*ts)
    out.backward()
    return [ts[i].grad if ts[i].grad is not None else np.zeros_like(ts[i].data) for i in wrt]


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(f, arrays, dtype=np.float64, wrt=None, eps=1e-6):
    """Largest relative error over all differentiated arguments."""
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    got = analytic_grads(f, arrays, dtype, wrt)
    return max(rel_err(g, numeric_grad(f, arrays, i, eps)) for g, i in zip(got, wrt))


def projected(op):
    """Wrap a tensor-valued op into a scalar by a fixed random projection."""
    cache = {}

    def f(*ts):
        out = op(*ts)
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(99).standard_normal(out.shape)
        return T.tsum(out * T.Tensor(cache[out.shape].astype(out.dtype)))

    return f


def check_directional(f, array, dtype=np.float64, n_dirs=6, eps=1e-4, seed=0):
    """Relative error of directional derivatives along random unit directions.

    Two function calls per direction instead of two per coordinate, which is
    what makes whole-network checks over many seeds affordable. Directions
    whose one-sided differences disagree straddle a kink and are redrawn.
    """
    got = analytic_grads(f, [array], dtype)[0].astype(np.float64)
    x = np.asarray(array, dtype=np.float64)
    rng = np.random.default_rng(seed)
    f0 = f(T.Tensor(x)).item()
    worst, used, tries = 0.0, 0, 0
    while used < n_dirs:
        tries += 1
        assert tries <= 4 * n_dirs, "too many kinked directions"
        v = rng.standard_normal(x.shape)
        v /= np.linalg.norm(v)
        fp = f(T.Tensor(x + eps * v)).item()
        fm = f(T.Tensor(x - eps * v)).item()
        fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
        if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1e-3):
            continue
        numeric = (fp - fm) / (2 * eps)
        analytic = float(np.sum(got * v))
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
        used += 1
    return worst
