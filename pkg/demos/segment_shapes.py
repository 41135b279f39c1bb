"""Few-shot style masks: segment a query shape from one same-class support image.

Run: python3 demos/segment_shapes.py path/to/model.ckpt
(train one first with: simattn train --config demos/shapes.cfg)
"""

import sys

import numpy as np

from simattn import generate_synthetic, load_checkpoint
from simattn.evaluation import mask_iou, segment

params = load_checkpoint(sys.argv[1]).params
records = generate_synthetic(5, 40, params.config.input_hw, seed=200)
rng = np.random.default_rng(0)
ious = []
for q in rng.choice(len(records), size=10, replace=False):
    query = records[q]
    support = next(r for i, r in enumerate(records) if r.label == query.label and i != q)
    negative = next(r for r in records if r.label != query.label)
    mask, _ = segment(params, query.image, support.image, negative.image)
    ious.append(mask_iou(mask, query.gt_mask))
    print(f"query {q:3d} class {query.label}: mask {int(mask.sum()):4d} px, IoU {ious[-1]:.3f}")
print(f"mean IoU {np.mean(ious):.3f}")
