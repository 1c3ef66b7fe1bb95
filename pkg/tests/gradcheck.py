"""Finite-difference gradient harness shared by unit and acceptance tests.

Instances are resampled until every ReLU pre-activation, pool-window gap, and
hinge argument sits clear of its kink, so central differences see a smooth
function. The conv reference below is an independent loop-based oracle.
"""

import numpy as np

from gnssfsl import losses, nncore
from gnssfsl.nncore import ArchConfig, _ConvRelu, _Dense, _GlobalAvgPool, _MaxPool2

# A kink can corrupt central differences only when the pre-activation sits
# within (derivative bound)*eps of zero; 5e-4 leaves ample headroom at eps=1e-4.
KINK_MARGIN = 5e-4
FD_EPS = 1e-4
MAX_RESAMPLE = 500


def max_rel_err(analytic, numeric, zero_floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    rel = np.where(scale < zero_floor, 0.0, err / np.maximum(scale, 1e-300))
    return float(rel.max()) if rel.size else 0.0


def central_diff(f, x, eps=FD_EPS):
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_g = grad.reshape(-1)
    flat_x = x.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        fp = f(x)
        flat_x[i] = orig - eps
        fm = f(x)
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * eps)
    return grad


def naive_conv_preact(x, w, b):
    """Loop-based 3x3 same-padding convolution; the independent conv oracle."""
    bsz, c_in, h, wd = x.shape
    c_out = w.shape[0]
    xp = np.zeros((bsz, c_in, h + 2, wd + 2))
    xp[:, :, 1 : h + 1, 1 : wd + 1] = x
    z = np.zeros((bsz, c_out, h, wd))
    for bi in range(bsz):
        for o in range(c_out):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for c in range(c_in):
                        for dy in range(3):
                            for dx in range(3):
                                acc += w[o, c, dy, dx] * xp[bi, c, i + dy, j + dx]
                    z[bi, o, i, j] = acc + b[o]
    return z


def fast_conv_preact(x, w, b):
    """Vectorized pre-activation, used only for kink-margin guards."""
    bsz, c_in, h, wd = x.shape
    xp = np.zeros((bsz, c_in, h + 2, wd + 2))
    xp[:, :, 1 : h + 1, 1 : wd + 1] = x
    z = np.zeros((bsz, w.shape[0], h, wd))
    for dy in range(3):
        for dx in range(3):
            xs = xp[:, :, dy : dy + h, dx : dx + wd]
            z += np.einsum("oc,bchw->bohw", w[:, :, dy, dx], xs)
    return z + b[None, :, None, None]


def _conv_instance(rng):
    layer = _ConvRelu(2, 3)
    for _ in range(MAX_RESAMPLE):
        p = rng.normal(scale=0.5, size=layer.n_params)
        x = rng.normal(size=(2, 2, 5, 5))
        w = p[: layer.n_weights].reshape(3, 2, 3, 3)
        b = p[layer.n_weights :]
        z = fast_conv_preact(x, w, b)
        if np.min(np.abs(z)) > KINK_MARGIN:
            return layer, p, x
    raise AssertionError("could not build a kink-free conv instance")


def _pool_instance(rng):
    layer = _MaxPool2()
    for _ in range(MAX_RESAMPLE):
        x = rng.normal(size=(2, 2, 4, 4))
        windows = x.reshape(2, 2, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(2, 2, 2, 2, 4)
        top2 = np.sort(windows, axis=-1)[..., -2:]
        if np.min(top2[..., 1] - top2[..., 0]) > KINK_MARGIN:
            return layer, np.zeros(0), x
    raise AssertionError("could not build a tie-free pool instance")


def _dense_instance(rng):
    layer = _Dense(6, 4)
    return layer, rng.normal(size=layer.n_params), rng.normal(size=(3, 6))


def _gap_instance(rng):
    return _GlobalAvgPool(), np.zeros(0), rng.normal(size=(2, 3, 4, 4))


LAYER_INSTANCES = {
    "conv_relu": _conv_instance,
    "max_pool": _pool_instance,
    "dense": _dense_instance,
    "global_avg_pool": _gap_instance,
}


def check_layer(kind: str, rng: np.random.Generator) -> float:
    """FD-check one layer instance; returns worst relative error."""
    layer, p, x = LAYER_INSTANCES[kind](rng)
    probe = rng.normal(size=layer.forward(x, p)[0].shape)

    def scalar(params, inputs):
        y, _ = layer.forward(inputs, params)
        return float(np.sum(probe * y))

    y, cache = layer.forward(x, p)
    dx, dp = layer.backward(probe, p, cache)

    worst = 0.0
    if p.size:
        num_p = central_diff(lambda q: scalar(q, x), p)
        worst = max(worst, max_rel_err(dp, num_p))
    num_x = central_diff(lambda q: scalar(p, q), x)
    worst = max(worst, max_rel_err(dx, num_x))
    return worst


def composed_net_instance(rng):
    """Tiny two-block network plus a kink-free input batch and labels."""
    cfg = ArchConfig(
        height=8, width=8, conv_channels=(2, 3), embed_dim=4, num_classes=3, dtype="f64"
    )
    for _ in range(MAX_RESAMPLE):
        net = nncore.init(cfg, seed=int(rng.integers(2**31)))
        # shift weights away from zero-init bias kinks
        net.params = net.params + rng.normal(scale=0.05, size=net.n_params)
        x = rng.uniform(0.05, 0.95, size=(2, 8, 8))
        if _net_kink_margin(net, x) > KINK_MARGIN:
            labels = rng.integers(0, 3, size=2)
            return net, x, labels
    raise AssertionError("could not build a kink-free network instance")


def _net_kink_margin(net, x) -> float:
    """Smallest |pre-activation| and pool-window gap across the net."""
    xb = net._prepare_batch(x)
    margin = np.inf
    for i, layer in enumerate(net._layers):
        p = net.params[net._param_slice(i)]
        if isinstance(layer, _ConvRelu):
            w = p[: layer.n_weights].reshape(layer.out_ch, layer.in_ch, 3, 3)
            z = fast_conv_preact(xb, w, p[layer.n_weights :])
            margin = min(margin, float(np.min(np.abs(z))))
        if isinstance(layer, _MaxPool2):
            b, c, h, wd = xb.shape
            h2, w2 = h // 2, wd // 2
            win = (
                xb[:, :, : 2 * h2, : 2 * w2]
                .reshape(b, c, h2, 2, w2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, h2, w2, 4)
            )
            top2 = np.sort(win, axis=-1)[..., -2:]
            gap = top2[..., 1] - top2[..., 0]
            # All-clamped windows stay at zero under perturbation; only
            # windows with a positive max need a clear runner-up gap.
            relevant = top2[..., 1] > 0
            if np.any(relevant):
                margin = min(margin, float(np.min(gap[relevant])))
        xb = layer.forward(xb, p)[0]
    return margin


def episode_instance(rng, n_cls=3, k=2, q=2):
    """Kink-free (network, episode) pair for checking the episode loss."""
    from gnssfsl.fsl import Episode

    cfg = ArchConfig(height=8, width=8, conv_channels=(2, 3), embed_dim=4, dtype="f64")
    total = n_cls * (k + q)
    for _ in range(MAX_RESAMPLE):
        net = nncore.init(cfg, seed=int(rng.integers(2**31)))
        net.params = net.params + rng.normal(scale=0.05, size=net.n_params)
        imgs = rng.uniform(0.05, 0.95, size=(total, 8, 8))
        if _net_kink_margin(net, imgs) > KINK_MARGIN:
            support = {c: [imgs[c * k + j] for j in range(k)] for c in range(n_cls)}
            off = n_cls * k
            query = [(imgs[off + c * q + j], c) for c in range(n_cls) for j in range(q)]
            return net, Episode(support, query)
    raise AssertionError("could not build a kink-free episode instance")


def check_pn_episode_loss(rng) -> float:
    from gnssfsl.fsl import pn_episode_loss

    net, episode = episode_instance(rng)
    loss, grads = pn_episode_loss(net, episode)
    p0 = net.params.copy()

    def loss_at(params):
        net.params = params
        return pn_episode_loss(net, episode)[0]

    numeric = central_diff(loss_at, p0)
    net.params = p0
    return max_rel_err(grads, numeric)


def check_composed_network(rng) -> float:
    net, x, labels = composed_net_instance(rng)
    logits, cache = net.forward_with_cache(x, with_head=True)
    loss, dlogits = losses.cross_entropy_batch(logits, labels)
    analytic = net.backward_from(cache, dlogits)

    p0 = net.params.copy()

    def loss_at(params):
        net.params = params
        out, _ = net.forward_with_cache(x, with_head=True)
        val, _ = losses.cross_entropy_batch(out, labels)
        return val

    numeric = central_diff(loss_at, p0)
    net.params = p0
    return max_rel_err(analytic, numeric)


# ---------------------------------------------------------------------------
# Loss instances with hinge-kink guards
# ---------------------------------------------------------------------------


def _dists(a, b):
    return np.sqrt(np.sum((a - b) ** 2, axis=1))


def pair_batch_instance(rng, need_similars, margins, rows=3, dim=5):
    """Random embeddings whose hinge arguments sit away from the kinks."""
    for _ in range(200):
        arrays = [rng.normal(size=(rows, dim)) for _ in range(4 if need_similars else 3)]
        a, p, n = arrays[0], arrays[1], arrays[2]
        s = arrays[3] if need_similars else None
        if min(_dists(a, p).min(), _dists(a, n).min()) < 1e-2:
            continue
        if need_similars:
            alpha1, alpha2 = margins
            if _dists(a, s).min() < 1e-2:
                continue
            m1 = _dists(a, p) - _dists(a, s) + alpha1
            m2 = _dists(a, s) - _dists(a, n) + alpha2
            if np.min(np.abs(m1)) > KINK_MARGIN and np.min(np.abs(m2)) > KINK_MARGIN:
                return losses.PairBatch(a, p, n, similars=s)
        else:
            (alpha,) = margins
            m_trip = _dists(a, p) - _dists(a, n) + alpha
            m_contr = alpha - _dists(a, n)
            if np.min(np.abs(m_trip)) > KINK_MARGIN and np.min(np.abs(m_contr)) > KINK_MARGIN:
                return losses.PairBatch(a, p, n)
    raise AssertionError("could not build a kink-free pair batch")


def check_pairwise_loss(kind: str, rng) -> float:
    if kind == "quadruplet":
        margins = (float(rng.uniform(0.2, 2.0)), float(rng.uniform(0.2, 2.0)))
        batch = pair_batch_instance(rng, True, margins)
        fn = lambda b: losses.quadruplet_loss(b, *margins)
        roles = ["anchors", "positives", "similars", "negatives"]
    elif kind == "triplet":
        margins = (float(rng.uniform(0.2, 2.0)),)
        batch = pair_batch_instance(rng, False, margins)
        fn = lambda b: losses.triplet_loss(b, *margins)
        roles = ["anchors", "positives", "negatives"]
    elif kind == "contrastive":
        margins = (float(rng.uniform(0.2, 2.0)),)
        batch = pair_batch_instance(rng, False, margins)
        fn = lambda b: losses.contrastive_loss(b, *margins)
        roles = ["anchors", "positives", "negatives"]
    else:
        raise ValueError(kind)

    _, grads = fn(batch)
    worst = 0.0
    for role in roles:
        arr = getattr(batch, role)

        def loss_with(x, role=role):
            kw = {
                "anchors": batch.anchors,
                "positives": batch.positives,
                "negatives": batch.negatives,
            }
            if batch.similars is not None:
                kw["similars"] = batch.similars
            kw[role] = x
            replaced = losses.PairBatch(
                kw["anchors"], kw["positives"], kw["negatives"], similars=kw.get("similars")
            )
            return fn(replaced)[0]

        numeric = central_diff(loss_with, arr.copy())
        worst = max(worst, max_rel_err(grads[role], numeric))
    return worst


def check_cross_entropy(rng) -> float:
    logits = rng.normal(scale=2.0, size=int(rng.integers(2, 8)))
    label = int(rng.integers(len(logits)))
    _, grad = losses.cross_entropy(logits, label)
    numeric = central_diff(lambda x: losses.cross_entropy(x, label)[0], logits.copy())
    return max_rel_err(grad, numeric)
