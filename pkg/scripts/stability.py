"""Rank stability of sensitivity vectors across disjoint slices and attack seeds."""

import numpy as np

from _common import parser, toy
from sia_lab.attack import AttackConfig, run_attack_batch
from sia_lab.diagnosis import rank_consistency, sensitivity
from sia_lab.toyworld import train_classifier


def main():
    p = parser(__doc__)
    p.add_argument("--slice", type=int, default=500)
    args = p.parse_args()
    cfg = AttackConfig(T=50, eta_a=2 / 255, eta_x=0.25 / 255, eps_x=1.5 / 255, seed=0)
    for seed in args.seeds:
        train, test = toy(seed, 300 + 2 * args.slice).split(300)
        model = train_classifier(train, 300, 1.0, seed)
        res = run_attack_batch(model, test.generator, test, cfg, workers=args.workers)
        s1 = sensitivity([r[1] for r in res[:args.slice]]).s
        s2 = sensitivity([r[1] for r in res[args.slice:]]).s
        print(f"seed {seed}: spearman {rank_consistency(s1, s2):.3f}  "
              f"s1 {np.round(s1, 4)}  s2 {np.round(s2, 4)}", flush=True)


if __name__ == "__main__":
    main()
