"""Train a small model on synthetic scenes and look at what the slots found.

This uses a short schedule so it finishes in about a minute; the default
configuration (5000 steps) is what the acceptance suite trains.

    python demos/train_and_evaluate.py [steps]
"""
import sys
from dataclasses import replace

import numpy as np

from slotlab import evaluate as ev
from slotlab import scenes as sc
from slotlab import train as T

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
spec = sc.SceneSpec()
train_scenes = sc.generate_dataset(spec, 500)
test_scenes = sc.generate_dataset(spec, 50, start=100_000)
images = np.stack([s.image for s in train_scenes])

cfg = replace(T.TrainConfig(), total_steps=steps, warmup_steps=steps // 10, n_slots=spec.n_slots)


def progress(row):
    if row["step"] % 100 == 0:
        print(f"step {row['step']:5d}  loss {row['loss']:.4f}  dispersion {row['target_dispersion']:.3f}")


res = T.train(cfg, images, progress=progress)

test_images = np.stack([s.image for s in test_scenes])
preds = ev.predict_segmentations(test_images, res.model_config, res.params, cfg.seed, topk=cfg.topk)
report = ev.evaluate(preds, [s.segmentation for s in test_scenes], spec.name)
print(f"held-out FG-ARI {report.mean('fg_ari'):.3f}  mBO {report.mean('mbo'):.3f}")

# side by side: ground truth and predicted slot map of the first test scene
chars = ".ABCDEFGHIJ"
gt = test_scenes[0].segmentation.labels.reshape(spec.image_size, spec.image_size)
pr = preds[0].labels.reshape(spec.image_size, spec.image_size)
for y in range(0, spec.image_size, 2):
    left = "".join(chars[v % len(chars)] for v in gt[y, ::2])
    right = "".join(chars[v % len(chars)] for v in pr[y, ::2])
    print(left, "  ", right)
