"""Imbalanced-data strategies on a 1%-positive toy training set."""

from _common import parser, toy
from sia_lab.attack import AttackConfig
from sia_lab.robustify import TrainingPlan, compare_strategies, make_imbalanced


def main():
    p = parser(__doc__)
    p.add_argument("--count", type=int, default=500, help="SIA adversaries to add")
    args = p.parse_args()
    E = 4 / 255
    attack = AttackConfig(T=50, eta_a=2 / 255, eta_x=E / 8, eps_a=0.3, eps_x=E,
                          frozen_attr_caps={0: 0.05}, seed=0)
    print("seed  strategy              prec   recall  acc    bal.acc")
    for seed in args.seeds:
        pool, test = toy(seed, 4600).split(4000)
        train = make_imbalanced(pool, 0.01, 2000, seed)
        plans = [TrainingPlan(s, seed=seed) for s in ("none", "reweight", "resample", "cutmix")]
        plans += [TrainingPlan(s, augmentation_count=args.count, seed=seed)
                  for s in ("sia_augment", "sia_augment_reweight")]
        for r in compare_strategies(train, test, plans, train.generator, attack, args.workers):
            print(f"{seed:4d}  {r.strategy:20s}  {r.precision:.3f}  {r.recall:.3f}   "
                  f"{r.accuracy:5.1f}  {r.balanced_accuracy:5.1f}", flush=True)


if __name__ == "__main__":
    main()
