"""Baseline vs adversarial encoders released at different depths of the trunk."""
from _common import config, parser, verdict
from privshield import experiments as ex


def main():
    p = parser(__doc__, "layer_ablation")
    p.add_argument("--taps", nargs="+", default=["conv2", "conv3", "fc"])
    args = p.parse_args()
    rows = ex.sweep_layers(config(args), args.taps, args.out)
    print(f"{'tap':>6s} {'variant':>8s} {'face':>8s} {'mcc':>8s} {'s_w':>10s} {'s_b':>10s} {'lda':>8s}")
    for r in rows:
        print(f"{r['tap']:>6s} {r['variant']:>8s} {r['face_sim']:8.3f} {r['mean_mcc']:8.3f} "
              f"{r['s_w']:10.4g} {r['s_b']:10.4g} {r['lda_score']:8.3f}")
    by = {(r["tap"], r["variant"]): r for r in rows}
    base = [by[t, "base"]["face_sim"] for t in args.taps]
    ok = all(a >= b for a, b in zip(base, base[1:]))
    ok &= all(by[t, "adv"]["face_sim"] < by[t, "base"]["face_sim"] and
              by[t, "adv"]["lda_score"] < by[t, "base"]["lda_score"] for t in args.taps)
    print(verdict(ok))


if __name__ == "__main__":
    main()
