"""Sensitivity histogram of a toy classifier: joint and single-attribute diagnosis."""

from _common import parser, toy
from sia_lab.attack import AttackConfig, run_attack_batch
from sia_lab.diagnosis import sensitivity, single_attribute_sensitivity, top_k
from sia_lab.toyworld import train_classifier


def main():
    p = parser(__doc__)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--T", type=int, default=50)
    args = p.parse_args()
    cfg = AttackConfig(T=args.T, eta_a=2 / 255, eta_x=0.25 / 255, eps_x=1.5 / 255, seed=0)
    for seed in args.seeds:
        train, test = toy(seed, 1000 + args.n).split(1000)
        model = train_classifier(train, 300, 1.0, seed - 1)
        res = run_attack_batch(model, test.generator, test, cfg, workers=args.workers)
        joint = sensitivity([r[1] for r in res], test.attribute_names)
        single = single_attribute_sensitivity(model, test.generator, test, cfg,
                                              workers=args.workers)
        print(f"seed {seed}: SDAR {joint.sdar:.4f}, top-3 {top_k(joint, 3)}, "
              f"single top-1 {top_k(single, 1)[0]}")
        for name, s, n1 in zip(joint.attribute_names, joint.s, single.s):
            print(f"  {name:18s} joint {s:.4f}  single {n1:.4f}")


if __name__ == "__main__":
    main()
