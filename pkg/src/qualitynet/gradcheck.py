"""Central finite-difference check of the analytic training gradients."""

from __future__ import annotations

import numpy as np

from qualitynet import net
from qualitynet.loss import QualityLabel, loss_grads, utterance_loss

# Entries whose gradients are both below this are compared in absolute terms.
REL_FLOOR = 1e-6


def loss_value(p: net.ModelParams, spec, label: QualityLabel, **loss_kw) -> float:
    return utterance_loss(label, net.predict(spec, p), **loss_kw).total


def analytic_grads(p: net.ModelParams, spec, label: QualityLabel, **loss_kw) -> net.ModelParams:
    result, trace = net.forward(spec, p)
    dQ, dq = loss_grads(label, result, **loss_kw)
    return net.backward(trace, dQ, dq, p)


def grad_check(p: net.ModelParams, spec, label, eps: float = 1e-5, **loss_kw) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Relative error per entry is ``|a - n| / max(|a|, |n|, REL_FLOOR)``. Every
    parameter entry is perturbed, so keep the model small.
    """
    if not eps > 0:
        raise ValueError("invalid epsilon")
    if not isinstance(label, QualityLabel):
        label = QualityLabel(float(label))
    grads = analytic_grads(p, spec, label, **loss_kw)
    probe = p.copy()
    worst = 0.0
    for theta, g in zip(probe.arrays(), grads.arrays()):
        flat, gflat = theta.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = loss_value(probe, spec, label, **loss_kw)
            flat[k] = orig - eps
            down = loss_value(probe, spec, label, **loss_kw)
            flat[k] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(gflat[k] - numeric) / max(abs(gflat[k]), abs(numeric), REL_FLOOR)
            worst = max(worst, err)
    return worst


def random_instance(rng: np.random.Generator, n_in: int, hidden: int, n_frames: int, dense: int = 6):
    """A small random model, spectrogram and label for gradient checks."""
    p = net.init_model(net.ModelDims(n_in, hidden, dense), fgb=float(rng.uniform(-3, 1)), seed=rng.integers(2**32))
    for a in p.arrays():
        a += rng.normal(0.0, 0.1, size=a.shape)  # nonzero biases exercise every path
    spec = np.abs(rng.normal(0.0, 1.0, size=(n_frames, n_in)))
    label = QualityLabel(float(rng.uniform(1.0, 4.5)))
    return p, spec, label


def run_trials(seed: int = 0, trials: int = 12) -> list[dict]:
    """Grad-check ``trials`` random configurations cycling H in {2,3,5}, T in {1,2,7}, F in {3,4}."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    combos = [(f, h, t) for h in (2, 3, 5) for t in (1, 2, 7) for f in (3, 4)]
    rows = []
    for k in range(trials):
        f, h, t = combos[(k * 7) % len(combos)]
        p, spec, label = random_instance(rng, f, h, t)
        rows.append({"trial": k, "F": f, "H": h, "T": t, "max_rel_err": grad_check(p, spec, label)})
    return rows
