"""Similarity attention for one triplet from an untrained and a briefly trained encoder.

Run: python3 demos/explain_triplet.py [out_dir]
Writes PGM heatmaps next to the inputs so the two can be compared side by side.
"""

import pathlib
import sys

from simattn import EncoderConfig, TrainConfig, explain, generate_synthetic, init_params
from simattn.attention import upsample_bilinear
from simattn.imageio import composite, write_image
from simattn.losses import LossConfig
from simattn.train import train

out = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "explain_out")
out.mkdir(exist_ok=True)

cfg = EncoderConfig(input_hw=32, conv_channels=(8, 16, 32), embed_dim=32)
records = generate_synthetic(5, 40, 32, seed=1)
anchor, positive = [r for r in records if r.label == 0][:2]
negative = next(r for r in records if r.label == 3)
images = [anchor.image, positive.image, negative.image]

untrained = init_params(cfg, 0)
trained = train(records, TrainConfig(epochs=6, steps_per_epoch=15, learning_rate=2e-3,
                                     loss=LossConfig(gamma=0.25)), cfg).checkpoint.params

for tag, params in (("untrained", untrained), ("trained", trained)):
    maps = explain(params, images, "triplet")
    for role, m in zip(("anchor", "positive", "negative"), maps):
        print(f"{tag:9s} {role:8s} {m.source_score}: peak {m.values.data.max():.4f}")
    ups = [upsample_bilinear(m, 32, 32).data for m in maps]
    write_image(composite(images, ups), out / f"{tag}.pgm")
print("wrote", sorted(p.name for p in out.iterdir()))
