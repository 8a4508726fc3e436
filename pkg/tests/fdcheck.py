"""Central finite-difference gradient checks for the autodiff engine.

Each case builds random inputs and a function from tensors to a tensor; the
check reduces the output with a fixed random projection and compares
analytic gradients with central differences (h = 1e-5).
"""

import numpy as np

from avspeaker import autograd as ag
from avspeaker.encoder import Encoder, EncoderConfig

H = 1e-5
TOL = 1e-4


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    # the floor keeps exactly-zero gradients from amplifying round-off
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / denom)


def check(fn, arrays, rng, coords=None):
    """Largest relative error over the inputs of ``fn``.

    ``coords`` caps how many entries per input are perturbed (all if None).
    """
    def scalar(vals):
        out = fn(*[ag.tensor(v) for v in vals])
        return float(np.sum(out.data * probe))

    ts = [ag.parameter(a.copy()) for a in arrays]
    out = fn(*ts)
    probe = rng.normal(size=out.shape) if out.data.size > 1 else np.ones(out.shape)
    loss = (out * ag.tensor(probe)).sum() if out.data.size > 1 else out
    ag.backward(loss)
    worst = 0.0
    for i, a in enumerate(arrays):
        idx = np.arange(a.size)
        if coords is not None and a.size > coords:
            idx = rng.choice(a.size, size=coords, replace=False)
        num = np.empty(len(idx))
        for j, k in enumerate(idx):
            plus = [v.copy() for v in arrays]
            minus = [v.copy() for v in arrays]
            plus[i].flat[k] += H
            minus[i].flat[k] -= H
            num[j] = (scalar(plus) - scalar(minus)) / (2 * H)
        worst = max(worst, rel_err(ts[i].grad.flat[idx], num))
    return worst


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap, x)


def _ce_case(rng):
    logits = rng.normal(size=(6, 4))
    targets = rng.integers(0, 4, size=6)
    mask = rng.random(6) < 0.6
    mask[rng.integers(6)] = True
    return [logits], lambda z: ag.cross_entropy(z, targets, mask)


def _mlp_case(rng):
    x = rng.normal(size=(5, 3))
    w1, b1 = rng.normal(size=(3, 4)), rng.normal(size=4)
    w2, b2 = rng.normal(size=(4, 2)), rng.normal(size=2)
    y = rng.integers(0, 2, size=5)

    def net(w1_, b1_, w2_, b2_):
        h = ag.relu(ag.matmul(ag.tensor(x), w1_) + b1_)
        return ag.cross_entropy(ag.matmul(h, w2_) + b2_, y)

    return [w1, b1, w2, b2], net


def _layer_norm_case(rng):
    x = rng.normal(size=(2, 3, 5))
    return [x, rng.normal(size=5), rng.normal(size=5)], ag.layer_norm


def _getitem_case(rng):
    idx = rng.integers(0, 5, size=7)
    return [rng.normal(size=(5, 3))], lambda a: a[idx] * a[idx]


def _std_case(rng):
    return [rng.normal(size=(3, 6, 2))], lambda a: ag.std(a, axis=1)


# name -> builder(rng) -> (arrays, fn)
CASES = {
    "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=4)], lambda a, b: a + b),
    "sub": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: a - b),
    "mul": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: a * b),
    "neg": lambda r: ([r.normal(size=(4,))], lambda a: -a),
    "div_scalar": lambda r: ([r.normal(size=(3, 3))], lambda a: a / 3.7),
    "matmul": lambda r: ([r.normal(size=(4, 5)), r.normal(size=(5, 3))], ag.matmul),
    "matmul_batched": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))], ag.matmul),
    "matmul_bmm": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 3))], ag.matmul),
    "reshape": lambda r: ([r.normal(size=(2, 6))], lambda a: a.reshape(3, 4) * a.reshape(3, 4)),
    "transpose": lambda r: ([r.normal(size=(2, 3, 4))], lambda a: a.transpose(0, 2, 1)),
    "getitem_slice": lambda r: ([r.normal(size=(4, 5))], lambda a: a[1:3, ::2]),
    "getitem_gather": _getitem_case,
    "sum": lambda r: ([r.normal(size=(3, 4))], lambda a: a.sum(axis=0)),
    "mean": lambda r: ([r.normal(size=(3, 4))], lambda a: a.mean(axis=1, keepdims=True)),
    "relu": lambda r: ([_away_from_zero(r, (4, 5))], ag.relu),
    "softmax": lambda r: ([r.normal(size=(3, 5))], lambda a: ag.softmax(a, axis=-1)),
    "softmax_rows": lambda r: ([r.normal(size=(4, 3))], ag.softmax_rows),
    "log_softmax": lambda r: ([r.normal(size=(3, 5))], lambda a: ag.log_softmax(a, axis=-1)),
    "layer_norm": _layer_norm_case,
    "concat": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 2))], lambda a, b: ag.concat([a, b], axis=-1)),
    "std": _std_case,
    "cross_entropy": _ce_case,
    "two_layer_net": _mlp_case,
}


def run_case(name, seed):
    rng = np.random.default_rng(seed)
    arrays, fn = CASES[name](rng)
    return check(fn, arrays, rng)


def tiny_encoder_error(seed, coords=3):
    """FD check through a full tiny encoder forward pass: masked cluster
    loss with respect to a few entries of every parameter."""
    from avspeaker.pretrain import masked_loss

    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(d_model=8, n_layers=2, n_heads=2, ffn_mult=2, audio_dim=3, visual_dim=2, n_clusters=5)
    enc = Encoder(cfg, seed=seed)
    mf = rng.normal(size=(2, 6, 3))
    vis = rng.normal(size=(2, 6, 2))
    tg = rng.integers(0, 5, size=(2, 6))
    masks = (rng.random((2, 6)) < 0.5, rng.random((2, 6)) < 0.5)
    masks[0][:, 0] = True
    names = sorted(enc.params)
    worst = 0.0

    def loss_value():
        return float(masked_loss(enc, mf, vis, tg, masks)[0].data)

    enc.zero_grad()
    loss, _, _ = masked_loss(enc, mf, vis, tg, masks)
    ag.backward(loss)
    for n in names:
        p = enc.params[n]
        idx = rng.choice(p.data.size, size=min(coords, p.data.size), replace=False)
        num = []
        for k in idx:
            old = p.data.flat[k]
            p.data.flat[k] = old + H
            up = loss_value()
            p.data.flat[k] = old - H
            down = loss_value()
            p.data.flat[k] = old
            num.append((up - down) / (2 * H))
        worst = max(worst, rel_err(p.grad.flat[idx], num))
    return worst
