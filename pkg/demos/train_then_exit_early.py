"""Train a small model on synthetic signs, then let easy inputs exit early.

Run: python3 demos/train_then_exit_early.py   (about a minute)
"""
from siformer.infer import OFF, EarlyExitConfig, evaluate
from siformer.model import SiformerConfig
from siformer.synthetic import SyntheticSpec, split_synthetic
from siformer.train import TrainConfig, preprocess, train

tr, te = split_synthetic(SyntheticSpec(classes=4, per_class=12, frames=16, seed=3), 6)
cfg = TrainConfig(epochs=8, milestones=(6,), lr0=1e-3, train_classifiers=True)
model = SiformerConfig(num_classes=4, d_model=24, max_frames=16, encoder_layers=3)

params, history = train(tr, model, cfg, validation=preprocess(te, cfg))
for rec in history:
    print(f"epoch {rec['epoch']}: loss {rec['loss']:.3f}  held-out {rec['val_accuracy']:.2f}")

test = preprocess(te, cfg)
for name, ex in [("no exit", EarlyExitConfig(patience=OFF)),
                 ("patience 1", EarlyExitConfig(1, "encoder", "trained"))]:
    m = evaluate(test, params, ex)
    print(f"{name:10s} top1 {m['top1']:.2f}  {m['avg_flops'] / 1e6:.2f} MFLOPs/sample  "
          f"early exits {m['early_exit_cases']}/{m['instances']}")
