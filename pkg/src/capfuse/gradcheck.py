"""Central finite-difference verification of the analytic siamese gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LossConfig, SiameseModel, _wing, batch_grad, batch_loss, init_model

EPS = 1e-5
TOLERANCE = 1e-4
# Relative error is measured against max(|analytic|, |numeric|, DENOM_FLOOR);
# below the floor, central-difference round-off (~1e-16 / EPS) dominates.
DENOM_FLOOR = 1e-6
KINK_GUARD = 1e-6


@dataclass
class TrialResult:
    trial: int
    n_params: int
    n_pairs: int
    loss_kind: str
    max_rel_error: float
    skipped: int


def _kink_state(m: SiameseModel, batch, cfg: LossConfig):
    """Sign pattern of every rectifier and hinge, plus the smallest hinge slack."""
    Xa = np.vstack([t[0] for t in batch])
    Xb = np.vstack([t[1] for t in batch])
    y = np.array([t[2] for t in batch], dtype=np.float64)
    pattern = []
    for X in (Xa, Xb):
        h = X
        for w, b in zip(m.weights[:-1], m.biases[:-1]):
            z = h @ w.T + b
            pattern.append(z > 0)
            h = np.maximum(z, 0.0)
    ea, _, _ = _wing(m, Xa)
    eb, _, _ = _wing(m, Xb)
    d = np.linalg.norm(ea - eb, axis=1)
    slack = cfg.margin - (d if cfg.loss_kind == "standard" else d * d)
    hinge_on = y == 0
    pattern.append(slack > 0)
    near = float(np.min(np.abs(slack[hinge_on]))) if np.any(hinge_on) else np.inf
    return pattern, near


def _same(p, q) -> bool:
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def check_gradients(m: SiameseModel, batch, cfg: LossConfig, eps: float = EPS, grad_fn=batch_grad):
    """Compare ``grad_fn`` with central differences on every parameter.

    Parameters whose perturbation flips any rectifier or hinge, or brings a
    hinge within ``KINK_GUARD`` of its boundary, are skipped: the loss is not
    differentiable across those points. Returns (max relative error, skipped).
    """
    _, grads = grad_fn(m, batch, cfg)
    base_pattern, _ = _kink_state(m, batch, cfg)
    worst, skipped = 0.0, 0
    for p, g in zip(m.params(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = batch_loss(m, batch, cfg)
            pat_up, near_up = _kink_state(m, batch, cfg)
            flat[i] = orig - eps
            down = batch_loss(m, batch, cfg)
            pat_down, near_down = _kink_state(m, batch, cfg)
            flat[i] = orig
            if not (_same(pat_up, base_pattern) and _same(pat_down, base_pattern)) or min(near_up, near_down) < KINK_GUARD:
                skipped += 1
                continue
            numeric = (up - down) / (2 * eps)
            analytic = gflat[i]
            denom = max(abs(analytic), abs(numeric), DENOM_FLOOR)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst, skipped


def random_instance(rng: np.random.Generator, max_params: int = 64, max_pairs: int = 8):
    """A random small model, batch and loss configuration."""
    while True:
        input_dim = int(rng.integers(2, 6))
        layers = [int(u) for u in rng.integers(2, 5, size=int(rng.integers(1, 4)))]
        fan, total = input_dim, 0
        for u in layers:
            total += u * fan + u
            fan = u
        if total <= max_params:
            break
    m = init_model(input_dim, layers, seed=int(rng.integers(2**32)))
    for b in m.biases:
        b[:] = rng.normal(0.0, 0.1, size=b.shape)
    kind = "modified" if rng.random() < 0.5 else "standard"
    n_pairs = int(rng.integers(1, max_pairs + 1))
    if kind == "modified":
        ys = rng.integers(0, 4, size=n_pairs)
    else:
        ys = rng.integers(0, 2, size=n_pairs)
    batch = [(rng.standard_normal(input_dim), rng.standard_normal(input_dim), int(y)) for y in ys]
    cfg = LossConfig(margin=float(rng.uniform(0.5, 2.0)), batch_size=n_pairs, loss_kind=kind)
    return m, batch, cfg


def run_trials(trials: int = 10, seed: int = 0, grad_fn=batch_grad) -> list[TrialResult]:
    rng = np.random.default_rng(seed)
    results = []
    for t in range(trials):
        m, batch, cfg = random_instance(rng)
        err, skipped = check_gradients(m, batch, cfg, grad_fn=grad_fn)
        results.append(TrialResult(t, m.n_params(), len(batch), cfg.loss_kind, float(err), skipped))
    return results


def corrupted_batch_grad(m, batch, cfg):
    """Deliberately wrong gradient, used to prove the checker can fail."""
    loss, grads = batch_grad(m, batch, cfg)
    grads = [g.copy() for g in grads]
    grads[0] *= 1.5
    grads[0] += 1e-2
    return loss, grads
