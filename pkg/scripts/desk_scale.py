"""Synthetic texture dataset -> vanilla vs KD-CTCNet with tiny_cnn -> report.

    python scripts/desk_scale.py --out runs/desk
"""

import argparse
import logging
from pathlib import Path

from kdctc.experiment import generate_synthetic_texture_dataset, load_config, report, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config", default=str(Path(__file__).parents[1] / "configs" / "desk_tiny.yaml"))
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--per-class", type=int, default=30)
    ap.add_argument("--percentages", default="20,50,100")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--methods", default="vanilla,vanilla_plus_sampling,kd_ctcnet")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    data = out / "data"
    if not data.exists():
        generate_synthetic_texture_dataset(args.classes, args.per_class, 150, 0, data)
    cfg = load_config(args.config)
    run_experiment(
        data,
        [int(p) for p in args.percentages.split(",")],
        [int(s) for s in args.seeds.split(",")],
        args.methods.split(","),
        cfg,
        out / "results",
    )
    written = report(out / "results")
    print(written["table_txt"].read_text())


if __name__ == "__main__":
    main()
