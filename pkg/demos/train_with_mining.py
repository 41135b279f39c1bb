"""Baseline vs mining-regularized training on synthetic shapes, one seed.

Run: python3 demos/train_with_mining.py
Prints the per-epoch log and, for both models, Recall@K and attention IoU on held-out shapes.
"""

from simattn import EncoderConfig, TrainConfig, generate_synthetic
from simattn.evaluation import evaluate_attention, evaluate_retrieval
from simattn.losses import LossConfig
from simattn.train import format_log_line, train

cfg = EncoderConfig(input_hw=32, conv_channels=(8, 16, 32), embed_dim=32)
train_set = generate_synthetic(5, 100, 32, seed=100)
test_set = generate_synthetic(5, 40, 32, seed=200)

for gamma in (0.0, 0.25):
    config = TrainConfig(epochs=20, batch_tuples=16, steps_per_epoch=25, learning_rate=2e-3,
                         loss=LossConfig(gamma=gamma))
    result = train(train_set, config, cfg, progress=lambda e: print(" ", format_log_line(e)))
    params = result.checkpoint.params
    recall = evaluate_retrieval(params, test_set, (1, 2, 4)).recall_at
    iou = evaluate_attention(params, test_set).mean_iou
    print(f"gamma={gamma}: R@1 {recall[1]:.3f} R@2 {recall[2]:.3f} R@4 {recall[4]:.3f} attention IoU {iou:.3f}")
