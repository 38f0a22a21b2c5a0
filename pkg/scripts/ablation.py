"""Attack success rate per ablation mode and PGD, with adversary PSNR/SSIM, per seed."""

import numpy as np

from _common import parser, toy
from sia_lab.attack import AttackConfig, AttackMode, run_attack_batch
from sia_lab.metrics import psnr, ssim
from sia_lab.toyworld import train_classifier


def main():
    p = parser(__doc__)
    p.add_argument("--eps-x", type=float, default=1.5, help="image radius in 1/255 units")
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--n", type=int, default=200, help="attacked samples per seed")
    args = p.parse_args()
    base = AttackConfig(T=args.T, eta_a=2 / 255, eta_x=0.25 / 255, eps_x=args.eps_x / 255,
                        frozen_attr_caps={0: 0.05}, seed=0)
    print("seed  attack                    ASR    PSNR    SSIM")
    for seed in args.seeds:
        train, test = toy(seed, 300 + args.n).split(300)
        model = train_classifier(train, 300, 1.0, seed - 1)
        originals = test.images()
        runs = [(m.name, "sia", AttackConfig(**{**base.__dict__, "mode": m})) for m in AttackMode]
        runs.append(("PGD", "pgd", base))
        for name, kind, cfg in runs:
            res = run_attack_batch(model, test.generator, test, cfg, kind, workers=args.workers)
            adv = [r[0].adversary for r in res]
            print(f"{seed:4d}  {name:24s} {np.mean([r[0].success for r in res]):.3f}  "
                  f"{np.mean([psnr(a, o) for a, o in zip(adv, originals)]):6.2f}  "
                  f"{np.mean([ssim(a, o) for a, o in zip(adv, originals)]):.4f}", flush=True)


if __name__ == "__main__":
    main()
