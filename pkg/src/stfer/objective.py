"""Scenario-aware identity loss and the weighted total."""
import numpy as np

from . import numeric_core as nc
from .backbone import NUM_SCENARIOS, trunc_normal


def init_heads(D, num_classes, rng):
    return {
        "head.W": trunc_normal(rng, (NUM_SCENARIOS, D, num_classes)),
        "head.b": np.zeros((NUM_SCENARIOS, num_classes)),
    }


def scenario_logits(z, W, b):
    return z @ W + b


def scenario_loss(z, W, b, gt):
    """Cross-entropy of the linear head ``z W + b`` against identity ``gt``."""
    return nc.cross_entropy(scenario_logits(z, W, b), gt)


def total_loss(losses, lambdas, supervised=None):
    """sum_k lambda_k * L_k. Scenarios flagged unsupervised contribute 0;
    the remaining weights are not renormalized."""
    losses = np.asarray(losses, dtype=np.float64)
    lam = np.asarray(lambdas, dtype=np.float64)
    if losses.shape != (NUM_SCENARIOS,) or lam.shape != (NUM_SCENARIOS,):
        raise ValueError("total_loss expects six losses and six weights")
    if supervised is not None:
        losses = np.where(supervised, losses, 0.0)
    return float(np.dot(lam, losses))


def batch_objective(O, labels, W, b, lambdas, weights=None):
    """Batched form over scenario descriptors ``O`` (B, 6, D).

    ``weights`` (B, 6) selects which images supervise which scenario head
    (default: all). Each scenario's loss is the mean CE over its supervising
    images. Returns (total, per_scenario_losses, cache).
    """
    B = O.shape[0]
    if weights is None:
        weights = np.ones((B, NUM_SCENARIOS))
    logits = np.einsum("bsd,sdc->bsc", O, W) + b
    per = np.zeros(NUM_SCENARIOS)
    coef = np.zeros((B, NUM_SCENARIOS))
    for s in range(NUM_SCENARIOS):
        cnt = weights[:, s].sum()
        if cnt == 0:
            continue
        ce = nc.cross_entropy(logits[:, s], labels)
        per[s] = float(np.dot(weights[:, s], ce) / cnt)
        coef[:, s] = lambdas[s] * weights[:, s] / cnt
    supervised = weights.sum(axis=0) > 0
    return total_loss(per, lambdas, supervised), per, (O, logits, labels, coef)


def batch_objective_backward(cache, W, grads):
    O, logits, labels, coef = cache
    dlogits = np.zeros_like(logits)
    for s in range(NUM_SCENARIOS):
        if coef[:, s].any():
            dlogits[:, s] = nc.cross_entropy_backward(logits[:, s], labels, coef[:, s])
    grads["head.W"] += np.einsum("bsd,bsc->sdc", O, dlogits)
    grads["head.b"] += dlogits.sum(axis=0)
    return np.einsum("bsc,sdc->bsd", dlogits, W)
