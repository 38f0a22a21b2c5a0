"""Shared toy-world setup for the experiment scripts."""

import argparse

from sia_lab.toyworld import generate_dataset

SPURIOUS = [0.8, 0.6, 0.4, 0.2, 0.0]


def toy(seed: int, N: int, K: int = 6):
    spurious = SPURIOUS[:K - 1] + [0.0] * max(0, K - 1 - len(SPURIOUS))
    return generate_dataset(K=K, N=N, seed=seed, spurious=spurious, primary_gain=0.5, noise=0.03)


def parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--workers", type=int, default=1)
    return p
