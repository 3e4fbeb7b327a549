"""A short tour of the mask metrics on hand-made segmentations.

    python demos/metrics_tour.py
"""
import numpy as np

from slotlab import metrics as mt

gt = mt.Segmentation.from_array(np.array([
    [0, 0, 1, 1],
    [0, 0, 1, 1],
    [2, 2, 0, 0],
    [2, 2, 0, 0],
]))

cases = {
    "perfect": gt.labels.reshape(4, 4),
    "relabelled": np.array([[9, 9, 4, 4], [9, 9, 4, 4], [7, 7, 9, 9], [7, 7, 9, 9]]),
    "background garbage": np.array([[3, 5, 1, 1], [6, 8, 1, 1], [2, 2, 4, 7], [2, 2, 5, 3]]),
    "objects merged": np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]]),
    "one blob": np.ones((4, 4), dtype=int),
}

print(f"{'prediction':20s} {'ARI':>7s} {'FG-ARI':>7s} {'mBO':>7s}")
for name, arr in cases.items():
    pred = mt.Segmentation.from_array(arr)
    print(f"{name:20s} {mt.adjusted_rand_index(pred, gt):7.3f} {mt.fg_ari(pred, gt):7.3f} {mt.mbo(pred, gt):7.3f}")

# FG-ARI ignores background pixels entirely, so "background garbage" still scores 1.
# Panoptic quality needs to know which ground-truth segments are things.
pan = mt.PanopticAnnotation(gt, {1: "thing", 2: "thing"})
pred = mt.Segmentation.from_array(cases["objects merged"])
print("PQ with the two objects merged:", round(mt.panoptic_quality(pred, pan), 3))

# datasets of different size are combined per sample, not per dataset
reports = [{"dataset": "a", "count": 3000, "means": {"fg_ari": 0.7}},
           {"dataset": "b", "count": 1000, "means": {"fg_ari": 0.6}}]
print("aggregate FG-ARI:", mt.aggregate_per_sample(reports, "fg_ari"))
