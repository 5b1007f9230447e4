"""SSD multibox objective: smooth-L1 localisation + hard-negative-mined cross-entropy."""
from __future__ import annotations

import numpy as np

from ..nn.tensor import Tensor, make_result


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def hard_negative_mask(conf: np.ndarray, conf_targets: np.ndarray, neg_pos_ratio: int) -> np.ndarray:
    """Select, per image, the ``ratio * num_pos`` background priors with the largest loss."""
    logp = _log_softmax(conf)
    bg_loss = -logp[..., 0]
    pos = conf_targets > 0
    bg_loss = np.where(pos, -np.inf, bg_loss)
    n_pos = pos.sum(axis=1)
    n_neg = np.minimum(neg_pos_ratio * n_pos, pos.shape[1] - n_pos)
    # rank of each prior when sorted by descending loss; ties broken by index
    order = np.argsort(-bg_loss, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(pos.shape[1])[None, :].repeat(len(pos), 0), axis=1)
    return rank < n_neg[:, None]


def multibox_loss(loc: Tensor, conf: Tensor, loc_targets: np.ndarray, conf_targets: np.ndarray,
                  neg_pos_ratio: int = 3):
    """Return ``(total, loc_loss, conf_loss)`` tensors, each normalised by the positive count.

    ``loc`` is (N, P, 4), ``conf`` (N, P, C); targets come from
    :func:`match_and_encode` stacked over the batch.  With no positives in the
    batch all three losses are zero.
    """
    loc_targets = np.asarray(loc_targets)
    conf_targets = np.asarray(conf_targets)
    pos = conf_targets > 0
    n_pos = int(pos.sum())
    dtype = loc.dtype
    if n_pos == 0:
        return tuple(
            make_result(np.zeros((), dtype=dtype), (loc, conf), lambda g: (None, None), "multibox")
            for _ in range(3)
        )

    neg = hard_negative_mask(conf.data, conf_targets, neg_pos_ratio)
    sel = pos | neg

    d = (loc.data - loc_targets) * pos[..., None]
    ad = np.abs(d)
    loc_val = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum() / n_pos
    loc_grad = np.clip(d, -1.0, 1.0) / n_pos

    logp = _log_softmax(conf.data)
    picked = np.take_along_axis(logp, conf_targets[..., None], axis=-1)[..., 0]
    conf_val = -(picked * sel).sum() / n_pos
    conf_grad = np.exp(logp)
    np.put_along_axis(conf_grad, conf_targets[..., None], np.take_along_axis(conf_grad, conf_targets[..., None], -1) - 1.0, -1)
    conf_grad *= sel[..., None] / n_pos

    loc_loss = make_result(np.asarray(loc_val, dtype=dtype), (loc,), lambda g: (g * loc_grad,), "loc_loss")
    conf_loss = make_result(np.asarray(conf_val, dtype=dtype), (conf,), lambda g: (g * conf_grad,), "conf_loss")
    return loc_loss + conf_loss, loc_loss, conf_loss
