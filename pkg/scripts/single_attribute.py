"""Baseline encoders trained for all attributes vs for attribute 0 only."""
import numpy as np

from _common import config, parser, verdict
from privshield import experiments as ex
from privshield.config import with_overrides


def main():
    p = parser(__doc__, "single_attribute")
    p.add_argument("--attribute", type=int, default=0)
    args = p.parse_args()
    cfg = with_overrides(config(args), train={"hp": {"lambda1": 0.0}})
    out = {}
    for name, attrs in (("all", None), ("single", [args.attribute])):
        pcfg = with_overrides(cfg, train={"utility_attributes": attrs})
        reps = ex.run_grid([(pcfg, r, args.out / name / f"seed_{r}", name) for r in range(cfg.eval.seeds)])
        out[name] = {k: float(np.mean([getattr(r, k) for r in reps])) for k in ("mean_mcc", "face_sim", "feature_sim")}
        print(f"{name:8s} mcc={out[name]['mean_mcc']:.3f} face={out[name]['face_sim']:.3f} "
              f"feat={out[name]['feature_sim']:.3f}")
    print(verdict(out["single"]["face_sim"] < out["all"]["face_sim"] and out["single"]["mean_mcc"] > 0.7))


if __name__ == "__main__":
    main()
