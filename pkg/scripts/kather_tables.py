"""Accuracy tables over the low-data splits on Kather-2016 / Kather-2019.

    python scripts/kather_tables.py --root /data/Kather_texture_2016_image_tiles_5000 \
        --config configs/kather16_resnet50.yaml --out runs/kather16

For NCT-CRC-HE-100K pass --subsample-per-class 625 to match the Kather-2016
class size before splitting. Runs resume from existing records.
"""

import argparse
import logging
from pathlib import Path

from kdctc.data_manifest import CANONICAL_PERCENTAGES
from kdctc.experiment import load_config, report, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", required=True)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--percentages", default="1,3,5,10,20,50,100")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--methods", default="vanilla,vanilla_plus_sampling,kd_ctcnet")
    ap.add_argument("--subsample-per-class", type=int, default=None)
    ap.add_argument("--pretrained", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, {"pretrained": args.pretrained})
    pcts = [int(p) for p in args.percentages.split(",")]
    unknown = [p for p in pcts if p not in CANONICAL_PERCENTAGES]
    if unknown:
        logging.warning("non-canonical percentages %s use floor(base * pct / 100)", unknown)
    run_experiment(
        args.root,
        pcts,
        [int(s) for s in args.seeds.split(",")],
        args.methods.split(","),
        cfg,
        Path(args.out),
        subsample_per_class=args.subsample_per_class,
    )
    print(report(args.out)["table_txt"].read_text())


if __name__ == "__main__":
    main()
