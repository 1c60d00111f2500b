"""Central finite-difference checks for every trainable path.

Each random configuration draws a network, a batch and a loss, then compares
the analytic gradients with ``(f(p + h) - f(p - h)) / 2h``. Points closer than
``KINK_GAP`` to a relu or loss kink are redrawn: there the two one-sided
slopes differ and a finite difference has no single right answer.
"""

import numpy as np

from caad.anomaly import ReferenceStats, deviation_loss, make_anomaly_head
from caad.confidence import confidence_loss, make_confidence_head
from caad.estimator import BinaryBaselineClassifier, binary_cross_entropy
from caad.features import IdentityExtractor, TinyCNN
from caad.neural import DenseNet
from caad.pipeline import CAADNetwork, TrainConfig, confidence_targets, joint_loss_and_grads

H = 1e-5
RTOL = 1e-4
ATOL = 1e-8
KINK_GAP = 1e-3
MAX_COMPONENTS = 25  # per parameter array; small arrays are checked exhaustively

KINDS = ("dense", "deviation", "confidence", "joint", "cross_entropy")


def grads_match(analytic, numeric, rtol=RTOL, atol=ATOL):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return bool(np.all(np.abs(a - n) <= rtol * np.maximum(np.abs(a), np.abs(n)) + atol))


def numeric_grad(f, param, idx, h=H):
    old = param[idx]
    param[idx] = old + h
    up = f()
    param[idx] = old - h
    down = f()
    param[idx] = old
    return (up - down) / (2 * h)


def _components(p, rng):
    flat = [np.unravel_index(i, p.shape) for i in range(p.size)]
    if p.size <= MAX_COMPONENTS:
        return flat
    pick = rng.choice(p.size, MAX_COMPONENTS, replace=False)
    return [flat[i] for i in pick]


def check_all(f, params, grads, rng):
    """Compare analytic ``grads`` with finite differences of scalar ``f``.

    Returns ``(ok, worst_rel, worst_abs)``: the largest relative error over
    components of magnitude at least ``ATOL / RTOL``, and the largest absolute
    error over the smaller ones, where rounding in the difference quotient
    swamps any relative comparison.
    """
    worst_rel = worst_abs = 0.0
    ok = True
    for p, g in zip(params, grads):
        assert p.shape == g.shape
        for idx in _components(p, rng):
            n = numeric_grad(f, p, idx)
            a = g[idx]
            if not grads_match(a, n):
                ok = False
            scale = max(abs(a), abs(n))
            if scale >= ATOL / RTOL:
                worst_rel = max(worst_rel, abs(a - n) / scale)
            else:
                worst_abs = max(worst_abs, abs(a - n))
    return ok, worst_rel, worst_abs


def _relu_gap(dense_cache, net):
    gaps = [np.abs(z).min() for z, layer in zip(dense_cache["pre"], net.layers) if layer.activation == "relu"]
    return min(gaps, default=np.inf)


def _cnn_gap(fcache):
    if fcache is None:
        return np.inf
    return min(np.abs(c[2]).min() for c in fcache[0])


def _extractor(rng, image):
    if image:
        c = int(rng.integers(1, 3))
        side = int(rng.choice([6, 8]))
        ext = TinyCNN((c, side, side), output_dim=int(rng.integers(2, 6)),
                      channels=(int(rng.integers(2, 4)),), rng=rng)
        x = rng.normal(size=(int(rng.integers(2, 5)), c, side, side))
        # biases away from zero keep pre-activations off the relu kink
        for b in ext.blocks:
            b.bias[:] = rng.uniform(0.05, 0.3, size=b.bias.shape) * rng.choice([-1, 1], size=b.bias.shape)
        return ext, x
    d = int(rng.integers(2, 8))
    return IdentityExtractor(d), rng.normal(size=(int(rng.integers(2, 7)), d))


def _head(rng, d, kind):
    hidden = tuple(int(h) for h in rng.integers(2, 12, size=int(rng.integers(1, 3))))
    if kind == "confidence":
        return make_confidence_head(d, rng, hidden=hidden)
    return make_anomaly_head(d, rng, hidden=hidden)


def _labels(rng, n):
    y = rng.integers(0, 2, size=n)
    y[0], y[-1] = 0, 1
    return y


def _dense_case(rng):
    n_layers = int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(1, 21, size=n_layers + 1)]
    acts = rng.choice(["relu", "sigmoid", "linear"], size=n_layers)
    net = DenseNet.build(dims[0], dims[1:-1], dims[-1], rng=rng)
    for layer, act in zip(net.layers, acts):
        layer.activation = str(act)
        layer.bias[:] = rng.normal(scale=0.5, size=layer.bias.shape)
    x = rng.normal(size=(int(rng.integers(1, 5)), dims[0]))
    c = rng.normal(size=(len(x), dims[-1]))

    def f():
        return float((net(x) * c).sum())

    out, cache = net.forward(x)
    if _relu_gap(cache, net) < KINK_GAP:
        return None
    grads, dx = net.backward(cache, c)
    return f, net.params + [x], grads + [dx]


def _ref(rng):
    return ReferenceStats(float(rng.normal(scale=0.1)), float(rng.uniform(0.8, 1.2)), 5000, 0.0, 1.0)


def _network_case(rng, kind, image):
    ext, x = _extractor(rng, image)
    d = ext.output_dim
    ano = _head(rng, d, "anomaly")
    conf = _head(rng, d, "confidence")
    net = CAADNetwork(ext, ano, conf)
    y = _labels(rng, len(x))
    ref = _ref(rng)
    margin = float(rng.uniform(0.5, 3.0))
    feats, fcache = ext.extract(x)
    if _cnn_gap(fcache) < KINK_GAP:
        return None
    _, acache = ano.forward(feats)
    _, ccache = conf.forward(feats)
    if min(_relu_gap(acache, ano), _relu_gap(ccache, conf)) < KINK_GAP:
        return None
    nu0 = ano(feats)[:, 0]
    z = (nu0 - ref.mean) / ref.std
    if np.min(np.abs(z)) < KINK_GAP or np.min(np.abs(z - margin)) < KINK_GAP:
        return None
    m = len(x)

    if kind == "deviation":
        params = ext.params + ano.params

        def f():
            return float(deviation_loss(ano(ext.extract(x)[0])[:, 0], y, ref, margin)[0].mean())

        out, acache = ano.forward(feats)
        _, dnu = deviation_loss(out[:, 0], y, ref, margin)
        hg, dfeat = ano.backward(acache, (dnu / m)[:, None])
        return f, params, ext.backward(fcache, dfeat) + hg

    if kind == "confidence":
        g = rng.uniform(size=m)
        params = ext.params + conf.params

        def f():
            return float(confidence_loss(conf(ext.extract(x)[0])[:, 0], g)[0].mean())

        out, ccache = conf.forward(feats)
        _, di = confidence_loss(out[:, 0], g)
        hg, dfeat = conf.backward(ccache, (di / m)[:, None])
        return f, params, ext.backward(fcache, dfeat) + hg

    # joint: the confidence target is a constant computed at the current point
    cfg = TrainConfig(margin=margin, ano_weight=float(rng.uniform(0.5, 2)), conf_weight=float(rng.uniform(0.5, 2)))
    g0 = confidence_targets(nu0, y, cfg)
    params = ext.params + ano.params + conf.params

    def f():
        fe = ext.extract(x)[0]
        la = deviation_loss(ano(fe)[:, 0], y, ref, margin)[0].mean()
        lc = confidence_loss(conf(fe)[:, 0], g0)[0].mean()
        return float(cfg.ano_weight * la + cfg.conf_weight * lc)

    _, _, _, grads = joint_loss_and_grads(net, x, y, ref, cfg)
    return f, params, grads


def _cross_entropy_case(rng, image):
    ext, x = _extractor(rng, image)
    head = _head(rng, ext.output_dim, "anomaly")
    y = _labels(rng, len(x))
    clf = BinaryBaselineClassifier()
    clf.extractor_, clf.head_ = ext, head
    feats, fcache = ext.extract(x)
    _, hcache = head.forward(feats)
    if min(_cnn_gap(fcache), _relu_gap(hcache, head)) < KINK_GAP:
        return None

    def f():
        return float(binary_cross_entropy(head(ext.extract(x)[0])[:, 0], y)[0].mean())

    _, grads = clf.loss_and_grads(x, y)
    return f, ext.params + head.params, grads


def random_case(rng, kind, image):
    """Draw one kink-free configuration of the given kind (redrawing as needed)."""
    for _ in range(100):
        if kind == "dense":
            case = _dense_case(rng)
        elif kind == "cross_entropy":
            case = _cross_entropy_case(rng, image)
        else:
            case = _network_case(rng, kind, image)
        if case is not None:
            return case
    raise RuntimeError("could not draw a configuration away from the kinks")


def run_suite(n_configs=100, seed=0):
    """Check ``n_configs`` random configurations cycling through every kind and extractor.

    Returns a list of ``(kind, image, ok, worst_rel, worst_abs)``.
    """
    rng = np.random.default_rng(seed)
    results = []
    for i in range(n_configs):
        kind = KINDS[i % len(KINDS)]
        image = kind != "dense" and (i // len(KINDS)) % 2 == 1
        f, params, grads = random_case(rng, kind, image)
        results.append((kind, image, *check_all(f, params, grads, rng)))
    return results
