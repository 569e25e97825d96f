"""White-box and transfer PGD accuracy as the ball radius grows.

Uses checkpoints from a finished run directory:

    python scripts/epsilon_sweep.py --run run --eps 0 0.005 0.01 0.02 0.05
"""

import argparse
from pathlib import Path

from advmed.attacks import PerturbationBall, PgdConfig, pgd_batch
from advmed.classifier import load_model, predict
from advmed.data import load_manifest
from advmed.metrics import evaluate

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", default="run")
    ap.add_argument("--eps", type=float, nargs="+", default=[0.0, 0.005, 0.01, 0.02, 0.05])
    args = ap.parse_args()
    run = Path(args.run)
    victim = load_model(run / "models" / "victim.amf")
    surrogate = load_model(run / "models" / "surrogate.amf")
    test = load_manifest(run / "attacks" / "Clean" / "manifest.csv")
    print(f"{'eps':>7}  {'white acc':>9}  {'white auc':>9}  {'black acc':>9}  {'black auc':>9}")
    for eps in args.eps:
        cfg = PgdConfig(PerturbationBall(eps))
        w = evaluate(predict(victim, pgd_batch(victim, test.x, test.y, cfg)), test.y)
        b = evaluate(predict(victim, pgd_batch(surrogate, test.x, test.y, cfg)), test.y)
        print(f"{eps:7.4f}  {w['accuracy']:9.3f}  {w['auroc']:9.3f}  {b['accuracy']:9.3f}  {b['auroc']:9.3f}")
