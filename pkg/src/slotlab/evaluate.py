"""Turn a trained model into per-image segmentations and metric reports."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import metrics as mt
from . import model as M
from .rng import stream


def predict_masks(images: np.ndarray, mcfg: M.ModelConfig, params: M.Params, seed: int,
                  topk: int | None = None, batch_size: int = 64) -> np.ndarray:
    """Dense slot masks (B, N, K) for a batch of images.

    Slot noise comes from the ``"eval"`` stream so predictions do not depend on
    how the images are chunked.
    """
    images = np.asarray(images, dtype=np.float32)
    k = mcfg.slots.n_slots
    noise = M.sample_slot_noise(stream(seed, "eval"), (len(images),), k, mcfg.slots.slot_dim)
    out = []
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            fwd = M.forward(images[s:s + batch_size], mcfg, params, noise[s:s + batch_size], topk=topk)
            out.append(M.slot_masks(fwd.decoded, k))
    return np.concatenate(out, axis=0)


def upsample_masks(masks: np.ndarray, grid: tuple[int, int], size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of soft masks (N, K) on the patch grid to (H, W, K).

    Pixels are treated as areas (half-pixel centres), edges are clamped.
    """
    m = masks.reshape(grid + (masks.shape[-1],)).astype(np.float64)
    zoom = (size[0] / grid[0], size[1] / grid[1], 1.0)
    return ndimage.zoom(m, zoom, order=1, mode="nearest", grid_mode=True)


def masks_to_labels(masks: np.ndarray, grid: tuple[int, int], size: tuple[int, int],
                    mode: str = "bilinear") -> np.ndarray:
    """Per-pixel argmax over slots (labels 1..K) at ``size``.

    ``bilinear`` resizes the soft masks before the argmax; ``nearest`` takes
    the argmax on the patch grid and replicates it.
    """
    if masks.ndim == 3:
        return np.stack([masks_to_labels(m, grid, size, mode) for m in masks])
    if mode == "bilinear":
        return np.argmax(upsample_masks(masks, grid, size), axis=-1).astype(np.int64) + 1
    if mode == "nearest":
        lab = np.argmax(masks, axis=-1).astype(np.int64).reshape(grid) + 1
        return mt.upsample_nearest(lab, size)
    raise ValueError(f"unknown upsampling mode {mode!r}")


def predict_segmentations(images: np.ndarray, mcfg: M.ModelConfig, params: M.Params, seed: int,
                          size: tuple[int, int] | None = None, topk: int | None = None) -> list[mt.Segmentation]:
    masks = predict_masks(images, mcfg, params, seed, topk)
    size = size or tuple(np.asarray(images).shape[1:3])
    labels = masks_to_labels(masks, mcfg.encoder.grid, size)
    return [mt.Segmentation.from_array(l) for l in labels]


METRICS = ("fg_ari", "mbo", "p_ari", "pq")


def score_image(pred: mt.Segmentation, gt: mt.Segmentation, panoptic: mt.PanopticAnnotation | None = None,
                mbo_direction: str = "gt") -> dict[str, float]:
    row = {"fg_ari": mt.fg_ari(pred, gt), "mbo": mt.mbo(pred, gt, mbo_direction)}
    if panoptic is not None:
        row["p_ari"] = mt.panoptic_ari(pred, panoptic)
        row["pq"] = mt.panoptic_quality(pred, panoptic)
    return row


def evaluate(preds: list[mt.Segmentation], gts: list[mt.Segmentation], dataset: str,
             image_ids: list[str] | None = None, panoptic: list[mt.PanopticAnnotation] | None = None,
             mbo_direction: str = "gt") -> mt.MetricReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth images")
    ids = image_ids or [f"{i:04d}" for i in range(len(gts))]
    per_image = {}
    for i, (p, g) in enumerate(zip(preds, gts)):
        pan = panoptic[i] if panoptic is not None else None
        per_image[ids[i]] = score_image(p, g, pan, mbo_direction)
    return mt.MetricReport(dataset, len(gts), per_image)
