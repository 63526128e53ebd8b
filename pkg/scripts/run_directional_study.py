"""Train the combiner and its ablations over several seeds and print the study tables.

    python3 scripts/run_directional_study.py --config configs/directional.json --seeds 0 1 2 --out study.json
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from votecomb.evaluation import paired_bootstrap
from votecomb.experiments import ABLATION_ROWS, load_config, run_study


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "directional.json"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--eval-ns", type=int, nargs="*", default=[2, 3, 4, 5])
    ap.add_argument("--out", help="write the numbers as JSON here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    study = run_study(cfg, args.seeds, train_n=3, eval_ns=args.eval_ns, progress=logging.info)

    k, single, single_stats = study.best_single
    print("single systems: " + "  ".join(f"hyp{i + 1} {b:.2f}" for i, b in enumerate(study.single_bleus)))
    print(f"\n{'system':<20}" + "".join(f"{'seed ' + str(s):>10}" for s in args.seeds) + f"{'median':>10}{'p vs best single':>18}")
    for name, _ in ABLATION_ROWS:
        vals = [study.rows[s][name]["bleu"] for s in args.seeds]
        p = np.median([paired_bootstrap(study.rows[s][name]["stats"], single_stats) for s in args.seeds])
        print(f"{name:<20}" + "".join(f"{v:>10.2f}" for v in vals) + f"{np.median(vals):>10.2f}{p:>18.3f}")

    print("\nmatching rate (median over seeds)")
    for name in ("full", "-voting"):
        m = study.median(name, "matching")
        print(f"{name:<20}" + "".join(f"  n={n} {v:.3f}" for n, v in zip((1, 2, 3, 4), m)))

    if args.eval_ns:
        print("\nfull model decoded with n hypotheses (median BLEU)")
        for n in args.eval_ns:
            print(f"  n={n}  {np.median([study.by_n[s][n] for s in args.seeds]):.2f}")

    if args.out:
        payload = {
            "config": cfg.to_dict(),
            "single_bleus": study.single_bleus,
            "best_single": {"index": k, "bleu": single},
            "rows": {s: {name: {"bleu": r["bleu"], "matching": r["matching"]} for name, r in rows.items()} for s, rows in study.rows.items()},
            "by_n": study.by_n,
            "seconds": study.seconds,
        }
        Path(args.out).write_text(json.dumps(payload, indent=2))


if __name__ == "__main__":
    main()
