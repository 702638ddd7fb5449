"""Training objectives: soft Dice, prototype-contrastive alignment, and
mean-prototype consistency, combined as dice + lambda_c * (contra + consis).

The contrastive similarity is cosine/tau; positives are the global cluster
representatives of the anchor's class in the anchor's own pathway,
negatives the other classes' representatives of that pathway. Before any
global prototypes exist (round 0) training uses Dice alone.
"""
from __future__ import annotations

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError
from .prototypes import embed_from_taps
from .tensor import Tensor


def dice_loss(logits: Tensor, labels: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Soft Dice over foreground classes with softmax probabilities.

    logits: (c,H,W) or (N,c,H,W); labels: matching (H,W) or (N,H,W) ints.
    Batched inputs pool the overlap sums over the whole batch.
    """
    if logits.ndim not in (3, 4):
        raise DimensionError("dice_loss expects (c,H,W) or (N,c,H,W) logits")
    class_axis = logits.ndim - 3
    c = logits.data.shape[class_axis]
    labels = np.asarray(labels)
    expected = logits.data.shape[:class_axis] + logits.data.shape[class_axis + 1:]
    if labels.shape != expected:
        raise DimensionError("labels shape does not match logits")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError("labels out of class range")
    probs = tt.softmax(logits, axis=class_axis)
    total = Tensor(0.0)
    for k in range(1, c):
        pk = tt.reshape(tt.narrow(probs, class_axis, k, 1), expected)
        gk = Tensor((labels == k).astype(np.float64))
        inter = tt.tsum(tt.mul(pk, gk))
        denom = tt.add(tt.tsum(pk), Tensor(float(gk.data.sum())))
        dice = tt.div(tt.add(tt.scale(inter, 2.0), Tensor(eps)),
                      tt.add(denom, Tensor(eps)))
        total = tt.add(total, tt.sub(Tensor(1.0), dice))
    return tt.scale(total, 1.0 / (c - 1))


def cosine_similarity(a: Tensor, b) -> Tensor:
    b = tt.as_tensor(b)
    dot = tt.tsum(tt.mul(a, b))
    na = tt.clamp_min(tt.sqrt(tt.tsum(tt.mul(a, a))), 1e-12)
    nb = tt.clamp_min(tt.sqrt(tt.tsum(tt.mul(b, b))), 1e-12)
    return tt.div(dot, tt.mul(na, nb))


def contra_loss(anchor: Tensor, positives, negatives, tau: float) -> Tensor:
    """-log of the positive-similarity mass: logsumexp(all) - logsumexp(pos),
    with sims = cos/tau. Stabilized by max subtraction; the shift cancels
    exactly, so gradients match the naive formula.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    positives = list(positives)
    negatives = list(negatives)
    if not positives:
        raise ContractError("contra_loss needs at least one positive")
    sims = [tt.scale(cosine_similarity(anchor, q), 1.0 / tau)
            for q in positives + negatives]
    stacked = tt.concat([tt.reshape(s, (1,)) for s in sims], axis=0)
    shift = float(stacked.data.max())
    z = tt.exp(tt.sub(stacked, Tensor(shift)))
    lse_all = tt.log(tt.tsum(z))
    lse_pos = tt.log(tt.tsum(tt.narrow(z, 0, 0, len(positives))))
    return tt.sub(lse_all, lse_pos)


def consis_loss(e_enc: Tensor, e_dec: Tensor, mean_enc, mean_dec) -> Tensor:
    """Squared distance of both pathway anchors to their mean prototypes,
    summed over dimensions."""
    mean_enc = np.asarray(mean_enc, dtype=np.float64)
    mean_dec = np.asarray(mean_dec, dtype=np.float64)
    if e_enc.data.shape != mean_enc.shape or e_dec.data.shape != mean_dec.shape:
        raise DimensionError("anchor and mean prototype dimensions disagree")
    d_enc = tt.sub(e_enc, Tensor(mean_enc))
    d_dec = tt.sub(e_dec, Tensor(mean_dec))
    return tt.add(tt.tsum(tt.mul(d_enc, d_enc)), tt.tsum(tt.mul(d_dec, d_dec)))


def total_loss(dice: Tensor, contra: Tensor, consis: Tensor, lambda_c: float) -> Tensor:
    if lambda_c < 0:
        raise ContractError("lambda_c must be nonnegative")
    return tt.add(dice, tt.scale(tt.add(contra, consis), float(lambda_c)))


def batch_alignment_terms(model, taps: dict, labels: np.ndarray,
                          global_protos, tau: float):
    """Contrastive and consistency terms averaged over the batch's
    (sample, class) anchors.

    Returns (contra, consis, anchor_count); both terms are zero tensors
    when no anchor has matching global prototypes (e.g. round 0).
    """
    n = labels.shape[0]
    contra_sum = Tensor(0.0)
    consis_sum = Tensor(0.0)
    count = 0
    for i in range(n):
        anchors = embed_from_taps(model, taps, labels, i)
        for k, pathways in anchors.items():
            if not (global_protos.has("enc", k) and global_protos.has("dec", k)):
                continue
            per_pathway = []
            for pw in ("enc", "dec"):
                pos = list(global_protos.representatives(pw, k))
                neg = global_protos.negative_representatives(pw, k)
                per_pathway.append(contra_loss(pathways[pw], pos, neg, tau))
            contra_sum = tt.add(contra_sum, tt.scale(tt.add(*per_pathway), 0.5))
            consis_sum = tt.add(consis_sum, consis_loss(
                pathways["enc"], pathways["dec"],
                global_protos.mean("enc", k), global_protos.mean("dec", k)))
            count += 1
    if count == 0:
        return Tensor(0.0), Tensor(0.0), 0
    return tt.scale(contra_sum, 1.0 / count), tt.scale(consis_sum, 1.0 / count), count
