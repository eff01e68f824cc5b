"""Baseline (lambda1=0) vs adversarially trained (lambda1=1) encoder, averaged over seeds."""
import json

import numpy as np

from _common import config, parser, verdict
from privshield import experiments as ex
from privshield.config import with_overrides

KEYS = ("mean_mcc", "face_sim", "feature_sim", "ssim", "psnr", "lda_score")


def main():
    args = parser(__doc__, "defense_ordering").parse_args()
    cfg = config(args)
    rows = {}
    for name, lam in (("baseline", 0.0), ("adversarial", 1.0)):
        pcfg = with_overrides(cfg, train={"hp": {"lambda1": lam}})
        reps = ex.run_grid([(pcfg, r, args.out / name / f"seed_{r}", name) for r in range(cfg.eval.seeds)])
        rows[name] = {k: float(np.mean([getattr(r, k) for r in reps])) for k in KEYS}
    print(f"{'':12s}" + "".join(f"{k:>12s}" for k in KEYS))
    for name, row in rows.items():
        print(f"{name:12s}" + "".join(f"{row[k]:12.3f}" for k in KEYS))
    b, a = rows["baseline"], rows["adversarial"]
    ok = a["face_sim"] < b["face_sim"] and a["feature_sim"] < b["feature_sim"] and a["mean_mcc"] >= b["mean_mcc"] - 0.10
    print(verdict(ok))
    (args.out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
