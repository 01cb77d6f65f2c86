"""Five-seed desk-scale runs of the UCI, mortality and image analogues, with plot tables.

    python scripts/desk_experiments.py uci --out results/uci
    python scripts/desk_experiments.py mortality --seeds 0 1
    python scripts/desk_experiments.py image --methods pvi global_vi
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from pvi import harness
from pvi.config import METHODS, load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
EXPERIMENTS = {
    "uci": (["uci_homogeneous", "uci_inhomogeneous"], ["pvi", "global_vi", "bcm_same", "bcm_split", "vcl"]),
    "mortality": (["mortality_lr", "mortality_bnn"], ["pvi", "global_vi", "bcm_same", "vcl"]),
    "image": (["mnist_homogeneous", "mnist_label_shard"], ["pvi", "bcm_same", "vcl"]),
}
# inhomogeneous splits are read on a log scale
LOG_SCALE = {"uci_inhomogeneous", "mnist_label_shard"}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("experiment", choices=sorted(EXPERIMENTS))
    parser.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    parser.add_argument("--methods", nargs="+", choices=METHODS)
    parser.add_argument("--out", default="results")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    names, methods = EXPERIMENTS[args.experiment]
    for name in names:
        cfg = load_config(CONFIGS / f"{name}.toml")
        traces = {}
        for method in args.methods or methods:
            for seed in args.seeds:
                run = replace(cfg, seed=seed, method=replace(cfg.method, name=method),
                              out=str(Path(args.out) / name / method / str(seed)))
                traces[(method, seed)] = harness.run_experiment(run).trace
                logging.info("%s %s seed %d: test_nll %.4f", name, method, seed,
                             traces[(method, seed)].records[-1]["test_nll"])
        for y in ("test_nll", "test_err", "pruned_count"):
            harness.emit_plot_data(traces, "comms", y, Path(args.out) / name / "plots", name in LOG_SCALE)


if __name__ == "__main__":
    main()
