"""Straight-from-the-formula reference implementations.

Plain numpy, scalar loops, no autograd: these stay independent of the
library code paths they are used to check.
"""

import numpy as np

EPS_KL = 1e-12
EPS_COS = 1e-8


def cosine_ref(a, b, eps=EPS_COS):
    na = max(np.linalg.norm(a), eps)
    nb = max(np.linalg.norm(b), eps)
    return float(np.dot(a, b) / (na * nb))


def softmax_ref(logits, tau, axis=-1):
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def kl_ref(p, q, axis=-1):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    terms = p * (np.log(p + EPS_KL) - np.log(q + EPS_KL))
    per_slice = terms.sum(axis=axis)
    return float(np.mean(per_slice))


def pool_ref(feature, mask):
    """Masked-area mean per channel over a [C, H, W] map."""
    area = float(mask.sum())
    if area == 0:
        return np.zeros(feature.shape[0]), False
    return (feature * mask).sum(axis=(1, 2)) / area, True


def anchors_ref(feature, maskset, pool_mode="masked-mean"):
    """Slot -> pooled vector for present slots of a [C, H, W] feature."""
    out = {}
    for slot in sorted(maskset.masks):
        mask = maskset.masks[slot]
        if mask.sum() == 0:
            continue
        if pool_mode == "masked-mean":
            vec, ok = pool_ref(feature, mask)
            if ok:
                out[slot] = vec
        else:
            out[slot] = (feature * mask).sum(axis=(1, 2)) / mask.size
    return out


def anchor_loss_ref(student_sets, teacher_sets):
    """Mean over pairs of mean over present slots of 1 - cosine."""
    total = 0.0
    for s, t in zip(student_sets, teacher_sets):
        slots = sorted(s)
        if not slots:
            continue
        total += np.mean([1.0 - cosine_ref(s[p], t[p]) for p in slots])
    return total / max(1, len(student_sets))


def pixel_anchor_sims_ref(feature, anchors):
    """[P, H, W] cosine similarities via explicit per-pixel loops."""
    slots = sorted(anchors)
    c, h, w = feature.shape
    sims = np.zeros((len(slots), h, w))
    for i, slot in enumerate(slots):
        for y in range(h):
            for x in range(w):
                sims[i, y, x] = cosine_ref(feature[:, y, x], anchors[slot])
    return sims


def distance_loss_ref(student_features, student_anchors, teacher_features, teacher_anchors, tau):
    """Per pair: per-pixel softmax over anchors, KL to teacher, pixel mean."""
    total = 0.0
    n_pairs = len(student_features)
    for fs, a_s, ft, a_t in zip(student_features, student_anchors, teacher_features, teacher_anchors):
        if len(a_s) <= 1:
            continue
        s_sims = pixel_anchor_sims_ref(fs, a_s)
        t_sims = pixel_anchor_sims_ref(ft, a_t)
        p, h, w = s_sims.shape
        acc = 0.0
        for y in range(h):
            for x in range(w):
                s_dist = softmax_ref(s_sims[:, y, x], tau)
                t_dist = softmax_ref(t_sims[:, y, x], tau)
                acc += kl_ref(s_dist, t_dist, axis=0)
        total += acc / (h * w)
    return total / max(1, n_pairs)


def loc_loss_ref(student_features, teacher_features, tau):
    """Per pair: per-channel spatial softmax, KL to teacher, channel mean."""
    total = 0.0
    for fs, ft in zip(student_features, teacher_features):
        c = fs.shape[0]
        acc = 0.0
        for ch in range(c):
            s_dist = softmax_ref(fs[ch].ravel(), tau)
            t_dist = softmax_ref(ft[ch].ravel(), tau)
            acc += kl_ref(s_dist, t_dist, axis=0)
        total += acc / c
    return total / max(1, len(student_features))
