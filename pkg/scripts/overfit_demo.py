"""Overfit a 20-image synthetic set and report training-set recall as it improves."""

import argparse

from sgmp.data import SynthConfig, synth_generate
from sgmp.evaluation import EvalConfig, evaluate
from sgmp.training import TrainConfig, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--images", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--iters", type=int, default=2)
    ap.add_argument("--pooling", default="weighted")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=10)
    args = ap.parse_args()

    ds = synth_generate(SynthConfig(num_images=args.images, seed=args.seed))
    ecfg = EvalConfig(T=args.iters, pooling_mode=args.pooling)

    def on_epoch(rec):
        if rec.metrics:
            print(f"epoch {rec.epoch:4d}  loss {rec.total:.4f}  predcls R@50 {rec.metrics['r_at_50']:.4f}")

    fit(ds.samples, TrainConfig(epochs=args.epochs, T=args.iters, pooling_mode=args.pooling, seed=args.seed),
        num_classes=ds.vocab.num_classes, num_predicates=ds.vocab.num_predicates, hidden=args.hidden,
        eval_fn=lambda p: {"r_at_50": evaluate(ds.samples, p, ecfg)["predcls"].r_at_50},
        eval_every=args.eval_every, on_epoch=on_epoch)


if __name__ == "__main__":
    main()
