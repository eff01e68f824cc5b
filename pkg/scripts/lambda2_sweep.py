"""Utility/privacy tradeoff as the perceptual weight lambda2 grows (lambda1=1, mu1=0, mu2=1)."""
from _common import config, parser, verdict
from privshield import experiments as ex


def main():
    p = parser(__doc__, "lambda2_sweep")
    p.add_argument("--lambda2", type=float, nargs="+", default=[0.0, 1.0, 5.0])
    args = p.parse_args()
    rows = ex.sweep_lambda2(config(args), args.lambda2, args.out)
    print(f"{'lambda2':>8s} {'mcc':>8s} {'face':>8s} {'feat':>8s} {'ssim':>8s} {'psnr':>8s}")
    for r in rows:
        print(f"{r['lambda2']:8g} {r['mean_mcc']:8.3f} {r['face_sim']:8.3f} {r['feature_sim']:8.3f} "
              f"{r['ssim']:8.3f} {r['psnr']:8.2f}")
    mono = all(a["mean_mcc"] >= b["mean_mcc"] and a["face_sim"] >= b["face_sim"] for a, b in zip(rows, rows[1:]))
    print(verdict(mono))


if __name__ == "__main__":
    main()
