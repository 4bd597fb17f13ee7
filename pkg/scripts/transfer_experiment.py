"""Joint two-basin run: simulation embeddings on basin A, forecaster embeddings on basin B.

    python scripts/transfer_experiment.py --epochs 60 --seeds 0 1 2
"""
import argparse
import logging

from sagnet.data import SynthConfig
from sagnet.experiments import transfer_study
from sagnet.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--basin-seed", type=int, default=0, help="basin B uses this seed plus one")
    ap.add_argument("--days", type=int, default=1500)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    a = SynthConfig(n_segments=20, n_reservoirs=2, n_days=args.days, seed=args.basin_seed)
    study = transfer_study(a, train=TrainConfig(epochs=args.epochs), seeds=args.seeds)
    print("basin B downstream test RMSE (degC)")
    for line in study.lines():
        print("  " + line)
    print(f"{study.seconds / 60:.1f} min")


if __name__ == "__main__":
    main()
