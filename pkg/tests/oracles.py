"""Independent slow re-implementations used as test oracles.

Everything here is written with explicit Python loops over scalars so that it
shares no code path with the vectorised library.
"""
from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# dense math

def softmax_scalar(xs):
    m = max(xs)
    ex = [math.exp(x - m) for x in xs]
    s = math.fsum(ex)
    return [e / s for e in ex]


def gelu_scalar(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + math.tanh(c * (x + 0.044715 * x ** 3)))


def _linear_scalar(vec, w, b):
    out = []
    for j in range(w.shape[1]):
        acc = math.fsum(vec[i] * float(w[i, j]) for i in range(w.shape[0]))
        out.append(acc + (float(b[j]) if b is not None else 0.0))
    return out


def decoder_mlp_scalar(vec, params):
    """One (patch, slot) evaluation of the decoder MLP: returns (features, alpha logit)."""
    h = list(vec)
    i = 0
    while f"decoder.layers.{i}.w" in params:
        w = params[f"decoder.layers.{i}.w"].data
        b = params[f"decoder.layers.{i}.b"].data
        h = [gelu_scalar(v) for v in _linear_scalar(h, w, b)]
        i += 1
    feat = _linear_scalar(h, params["decoder.out_feat.w"].data, params["decoder.out_feat.b"].data)
    alpha = _linear_scalar(h, params["decoder.out_alpha.w"].data, None)[0]
    return feat, alpha


def decode_scalar(slots, params, selected=None):
    """Combined reconstruction y (N, D) by explicit loops.

    ``selected`` (N, k) restricts each patch to a subset of slots; the
    non-selected alphas act as minus infinity in the softmax.
    """
    slots = np.asarray(slots, dtype=np.float64)
    pos = params["decoder.pos_embed"].data
    n, k = pos.shape[0], slots.shape[0]
    recon = np.zeros((n, params["decoder.out_feat.w"].data.shape[1]))
    for i in range(n):
        feats, alphas = [], []
        for s in range(k):
            vec = [float(slots[s, d]) + float(pos[i, d]) for d in range(slots.shape[1])]
            f, a = decoder_mlp_scalar(vec, params)
            feats.append(f)
            alphas.append(a)
        allowed = range(k) if selected is None else [int(s) for s in selected[i]]
        masked = [alphas[s] if s in allowed else -math.inf for s in range(k)]
        m = softmax_scalar(masked)
        for d in range(recon.shape[1]):
            recon[i, d] = math.fsum(m[s] * feats[s][d] for s in range(k))
    return recon


# ---------------------------------------------------------------------------
# clustering metrics by pair / pixel loops

def ari_pairs(a, b):
    """ARI by enumerating every pixel pair."""
    a, b = list(a), list(b)
    n = len(a)
    if n <= 1:
        return 1.0
    same_a = same_b = both = 0
    for i in range(n):
        for j in range(i + 1, n):
            sa = a[i] == a[j]
            sb = b[i] == b[j]
            same_a += sa
            same_b += sb
            both += sa and sb
    total = n * (n - 1) // 2
    expected = same_a * same_b / total
    max_index = 0.5 * (same_a + same_b)
    if max_index == expected:
        return 1.0
    return (both - expected) / (max_index - expected)


def fg_ari_loop(pred, gt):
    keep = [i for i in range(len(gt)) if gt[i] != 0]
    if not keep:
        return math.nan
    return ari_pairs([pred[i] for i in keep], [gt[i] for i in keep])


def iou_loop(pred, gt, p, g):
    inter = union = 0
    for x, y in zip(pred, gt):
        inp, ing = x == p, y == g
        inter += inp and ing
        union += inp or ing
    return inter / union if union else 0.0


def mbo_loop(pred, gt, direction="gt"):
    gl = sorted({v for v in gt if v != 0})
    pl = sorted({v for v in pred if v != 0})
    if not gl:
        return math.nan
    if direction == "gt":
        return sum(max([iou_loop(pred, gt, p, g) for p in pl] or [0.0]) for g in gl) / len(gl)
    if not pl:
        return 0.0
    return sum(max(iou_loop(pred, gt, p, g) for g in gl) for p in pl) / len(pl)


def panoptic_ari_loop(pred, pan, void_labels):
    keep = [i for i in range(len(pan)) if pan[i] not in void_labels]
    if len({pan[i] for i in keep}) < 2:
        return math.nan
    return ari_pairs([pred[i] for i in keep], [pan[i] for i in keep])


def pq_loop(pred, pan, void_labels):
    valid = [v not in void_labels for v in pan]
    gt = [v if ok else 0 for v, ok in zip(pan, valid)]
    gl = sorted({v for v in gt if v != 0})
    pl = sorted({v for v in pred if v != 0})
    tp, mp, mg = [], set(), set()
    for p in pl:
        best, best_g = 0.0, None
        for g in gl:
            v = iou_loop(pred, gt, p, g)
            if v > best:
                best, best_g = v, g
        if best > 0.5:
            tp.append(best)
            mp.add(p)
            mg.add(best_g)
    fp = 0
    for p in pl:
        if p in mp:
            continue
        inter = union = 0
        for x, ok in zip(pred, valid):
            inp, ign = x == p, not ok
            inter += inp and ign
            union += inp or ign
        if union and inter / union > 0.5:
            continue
        fp += 1
    fn = sum(1 for g in gl if g not in mg)
    den = len(tp) + 0.5 * fp + 0.5 * fn
    return math.nan if den == 0 else sum(tp) / den


# ---------------------------------------------------------------------------
# scene rasterisation by per-pixel ray casting

def _inside_polygon(x, y, verts):
    inside = False
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        if (y0 > y) != (y1 > y):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < xc:
                inside = not inside
    return inside


def raster_loop(objects, size):
    """Label map where each pixel takes the last (topmost) object containing its centre."""
    out = [[0] * size for _ in range(size)]
    for r in range(size):
        y = (r + 0.5) / size
        for c in range(size):
            x = (c + 0.5) / size
            for k, obj in enumerate(objects, start=1):
                if obj.shape == "disk":
                    hit = (x - obj.cx) ** 2 + (y - obj.cy) ** 2 <= obj.size ** 2
                else:
                    n = 4 if obj.shape == "square" else 3
                    verts = [(obj.cx + obj.size * math.cos(obj.angle + 2 * math.pi * i / n),
                              obj.cy + obj.size * math.sin(obj.angle + 2 * math.pi * i / n)) for i in range(n)]
                    hit = _inside_polygon(x, y, verts)
                if hit:
                    out[r][c] = k
    return out
