"""Adversarial fine-tuning on FULL adversaries: robustness matrix and SDAR per seed."""

import numpy as np

from _common import parser, toy
from sia_lab.attack import AttackConfig, run_attack_batch
from sia_lab.diagnosis import sensitivity
from sia_lab.robustify import adversarial_finetune, robustness_matrix
from sia_lab.toyworld.targets import ToyClassifier


def main():
    p = parser(__doc__)
    p.add_argument("--eps", type=float, default=4.0, help="training/eval radius in 1/255 units")
    args = p.parse_args()
    E = args.eps / 255
    train_attack = AttackConfig(T=50, eta_a=2 / 255, eta_x=E / 8, eps_a=0.1, eps_x=E,
                                frozen_attr_caps={0: 0.05}, seed=0)
    diag = AttackConfig(eps_x=1.5 / 255, frozen_attr_caps={0: 0.05}, seed=0)
    evals = {"clean": ("clean", None), "FGSM": ("fgsm", AttackConfig(eps_x=E)),
             "PGD": ("pgd", AttackConfig(T=20, eta_x=E / 8, eps_x=E)),
             "SIA": ("sia", train_attack)}
    for seed in args.seeds:
        data = toy(seed, 1300)
        train, test = data.split(1000)
        model = ToyClassifier(data.basis.base_shape, pool=2, seed=seed - 1)
        model.fit(train.images(), train.labels(), 300, 1.0)
        res = run_attack_batch(model, train.generator, train, train_attack, workers=args.workers)
        tuned = adversarial_finetune(model, np.stack([r[0].adversary for r in res]),
                                     train.labels(), seed=0)
        models = {"original": model, "finetuned": tuned}
        m = robustness_matrix(models, evals, test, test.generator, workers=args.workers)
        print(f"seed {seed}")
        for row in m.rows:
            print(f"  {row:6s} " + "  ".join(f"{c}={m.cell(row, c):5.1f}" for c in m.columns))
        for name, mm in models.items():
            r = run_attack_batch(mm, test.generator, test, diag, workers=args.workers)
            print(f"  SDAR {name}: {sensitivity([x[1] for x in r], exclude=[0]).sdar:.4f}")


if __name__ == "__main__":
    main()
