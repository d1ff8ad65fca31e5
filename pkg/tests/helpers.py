import numpy as np

from numstr.net import backward, forward, init_params

EPS = 1e-4


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def perturbed_params(spec, seed):
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed, np.float64, head_gain=1.0)
    return [p + rng.normal(0, 0.2, p.shape) for p in params]


def net_probes(spec, x, n_probes, seed=0):
    """Central differences of <forward(x), G> against backward, at random coordinates.

    Yields (label, analytic, numeric) per probe; probes cover every parameter
    tensor and the input.
    """
    rng = np.random.default_rng(seed)
    params = perturbed_params(spec, seed)
    out, cache = forward(spec, params, x)
    weight = rng.normal(size=out.shape)
    grads, gx = backward(cache, weight)

    def objective(ps, xx):
        return float((forward(spec, ps, xx, keep_cache=False)[0] * weight).sum())

    targets = [(f"param{i}", i) for i in range(len(params))] + [("input", None)]
    for k in range(n_probes):
        label, i = targets[k % len(targets)]
        arr = x if i is None else params[i]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        plus, minus = arr.copy(), arr.copy()
        plus[idx] += EPS
        minus[idx] -= EPS
        if i is None:
            fp, fm = objective(params, plus), objective(params, minus)
            analytic = gx[idx]
        else:
            fp = objective(params[:i] + [plus] + params[i + 1 :], x)
            fm = objective(params[:i] + [minus] + params[i + 1 :], x)
            analytic = grads[i][idx]
        yield label, float(analytic), (fp - fm) / (2 * EPS)


def loss_probes(loss_fn, pred, n_probes, seed=0):
    rng = np.random.default_rng(seed)
    _, grad = loss_fn(pred)[:2]
    for _ in range(n_probes):
        idx = tuple(int(rng.integers(s)) for s in pred.shape)
        plus, minus = pred.copy(), pred.copy()
        plus[idx] += EPS
        minus[idx] -= EPS
        numeric = (loss_fn(plus)[0] - loss_fn(minus)[0]) / (2 * EPS)
        yield idx, float(grad[idx]), numeric
