"""Compare the full detector with its ablations on a few seeds.

One pretraining run per seed is shared by all ablations. Expect roughly
six minutes per seed on one core with the defaults below.

    python demos/ablation_sweep.py --seeds 0 1 2 --ablations none no-drcs fixed-m=10
"""
import argparse
import logging
import statistics
import tempfile
from pathlib import Path

from dlanac import experiments as ex
from dlanac import training as tr


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="small")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--ablations", nargs="+", default=["none", "no-drcs", "fixed-m=10", "no-dlan"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    table = {a: [] for a in args.ablations}
    with tempfile.TemporaryDirectory() as tmp:
        for seed in args.seeds:
            train, test, gen_s = ex.prepare_data(args.preset, seed, Path(tmp) / str(seed))
            rep = ex.run_seed(tr.TrainConfig(seed=seed), train, test, args.ablations, gen_s)
            for a in args.ablations:
                table[a].append(rep.auc(a))

    print(f"{'ablation':<12}" + "".join(f"seed {s:<4}" for s in args.seeds) + "median")
    for a, aucs in table.items():
        print(f"{a:<12}" + "".join(f"{v:<9.4f}" for v in aucs) + f"{statistics.median(aucs):.4f}")


if __name__ == "__main__":
    main()
