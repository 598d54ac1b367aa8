"""Training losses: supervised contrastive alignment, classification NLL,
normalized adversarial noise, and the weighted combination of all terms.

One contrastive engine serves both alignment losses: with domain ids as
groups it pushes domain features apart, with class labels as groups it
pulls category features from different domains together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tape, Tensor


class BatchCompositionError(ValueError):
    """No anchor in the batch has an in-batch positive."""


def supcon_loss(tape: Tape, features: Tensor, groups, tau: float) -> Tensor:
    """Supervised contrastive (InfoNCE-style) loss over cosine similarities.

    For each anchor i with positive set P(i) = {k != i : groups[k] == groups[i]},
    the per-anchor term is

        -(1/|P(i)|) * sum_{p in P(i)} log( exp(s_ip/tau) / sum_{j != i} exp(s_ij/tau) )

    where s is cosine similarity. The loss is the mean over anchors with a
    nonempty positive set; anchors without positives are skipped, and a batch
    where every anchor is positive-less is an error.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if features.data.ndim != 2 or features.shape[0] < 2:
        raise ShapeError(f"supcon_loss needs an n x d feature matrix with n >= 2, got {features.shape}")
    n = features.shape[0]
    groups = np.asarray(groups)
    if groups.shape != (n,):
        raise ShapeError(f"groups must have shape ({n},), got {groups.shape}")

    same = groups[:, None] == groups[None, :]
    nonself = ~np.eye(n, dtype=bool)
    pos = same & nonself
    pos_counts = pos.sum(axis=1)
    anchors = pos_counts > 0
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        raise BatchCompositionError(
            "every anchor lacks an in-batch positive; fix the batch composition "
            "so each row shares its group with at least one other row"
        )

    normed = tape.l2_normalize(features)
    sims = tape.matmul(normed, tape.transpose(normed))
    scaled = tape.scale(sims, 1.0 / tau)
    lse = tape.masked_logsumexp(scaled, nonself)

    anchor_w = anchors.astype(np.float64) / n_anchors
    pos_w = pos.astype(np.float64) / np.maximum(pos_counts, 1)[:, None] / n_anchors
    return tape.add(tape.weighted_sum(lse, anchor_w), tape.weighted_sum(scaled, -pos_w))


def nll_loss(tape: Tape, logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class, from stabilized log-softmax."""
    if logits.data.ndim != 2:
        raise ShapeError(f"nll_loss needs an n x c logits matrix, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} outside [0, {c})")
    log_probs = tape.log_softmax(logits)
    w = np.zeros((n, c))
    w[np.arange(n), labels] = -1.0 / n
    return tape.weighted_sum(log_probs, w)


def adv_noise(grad_e: np.ndarray, epsilon: float, scope: str = "per_example") -> np.ndarray:
    """Normalized-gradient perturbation: epsilon * g / ||g||, detached.

    scope "per_example" normalizes each row independently; "per_batch" uses
    the whole-array norm. Rows (or a whole batch) with norm below 1e-12 map
    to exact zeros, as does epsilon = 0.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    g = np.asarray(grad_e, dtype=np.float64)
    if epsilon == 0.0:
        return np.zeros_like(g)
    if scope == "per_example":
        norms = np.sqrt(np.sum(g * g, axis=-1, keepdims=True))
        return np.where(norms >= 1e-12, epsilon * g / np.maximum(norms, 1e-12), 0.0)
    if scope == "per_batch":
        norm = float(np.sqrt(np.sum(g * g)))
        if norm < 1e-12:
            return np.zeros_like(g)
        return epsilon * g / norm
    raise ValueError(f"unknown noise norm scope {scope!r}")


@dataclass
class LossBundle:
    """All loss terms of one training step, still attached to the tape."""

    l_d: Tensor
    l_c: Tensor
    l_C: Tensor
    l_C_prime: Tensor
    l_adv: Tensor
    l_total: Tensor
    tau1: float
    tau2: float
    epsilon: float
    lam: float
    alpha: float

    def values(self) -> dict:
        return {
            "l_total": self.l_total.item(),
            "l_d": self.l_d.item(),
            "l_c": self.l_c.item(),
            "l_C": self.l_C.item(),
            "l_C_prime": self.l_C_prime.item(),
            "l_adv": self.l_adv.item(),
        }


def combine_losses(tape: Tape, l_C: Tensor, l_C_prime, l_d, l_c, hp) -> LossBundle:
    """Assemble l_adv = (1-lambda) l_C + lambda l_C' and
    l_total = l_adv + alpha (l_d + l_c), honoring the ablation switches.

    Disabled terms are replaced by exact zeros; with adversarial training off,
    l_adv is l_C itself and no perturbed loss is consumed. l_adv is evaluated
    as l_C + lambda (l_C' - l_C), which has the same value and gradients but
    stays bit-identical to l_C whenever l_C' equals l_C (epsilon = 0) or
    lambda = 0.
    """
    if not 0.0 <= hp.lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {hp.lam}")
    if hp.alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {hp.alpha}")

    if not hp.use_dscl:
        l_d = Tensor(0.0)
    if not hp.use_cscl:
        l_c = Tensor(0.0)
    if l_d is None or l_c is None:
        raise ValueError("l_d and l_c are required when their switches are on")

    if hp.use_al:
        if l_C_prime is None:
            raise ValueError("l_C_prime is required when adversarial training is on")
        gap = tape.add(l_C_prime, tape.scale(l_C, -1.0))
        l_adv = tape.add(l_C, tape.scale(gap, hp.lam))
    else:
        l_adv = l_C
        l_C_prime = l_C

    l_total = tape.add(l_adv, tape.scale(tape.add(l_d, l_c), hp.alpha))
    return LossBundle(
        l_d=l_d,
        l_c=l_c,
        l_C=l_C,
        l_C_prime=l_C_prime,
        l_adv=l_adv,
        l_total=l_total,
        tau1=hp.tau1,
        tau2=hp.tau2,
        epsilon=hp.epsilon,
        lam=hp.lam,
        alpha=hp.alpha,
    )
