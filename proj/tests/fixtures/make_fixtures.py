"""Regenerates the reference fixtures used by the C++ tests.

Run from this directory: python3 make_fixtures.py
Needs numpy. Metric references use exact rational arithmetic.
"""
import itertools
import json
from fractions import Fraction

import numpy as np


def write_npy_fixtures():
    f4 = (np.arange(24, dtype=np.float32).reshape(2, 3, 4) - 7.5) / 3.0
    f4[0, 0, 0] = np.float32(1e-30)
    f4[1, 2, 3] = np.float32(-0.0)
    np.save("ref_f4_2x3x4.npy", f4)
    np.save("ref_f4_5x7.npy", np.linspace(0.0, 1.0, 35, dtype=np.float32).reshape(5, 7))
    u1 = np.array([[0, 1, 2], [3, 255, 7]], dtype=np.uint8)
    np.save("ref_u1_2x3.npy", u1)
    with open("ref_values.json", "w") as fh:
        json.dump({"f4_2x3x4": [float(v) for v in f4.ravel()],
                   "f4_5x7": [float(v) for v in np.linspace(0.0, 1.0, 35, dtype=np.float32)],
                   "u1_2x3": [int(v) for v in u1.ravel()]}, fh, indent=1)


def best_mapping(conf):
    """Brute force over permutations of the zero-padded square matrix.

    Returns mapping[p] = gt class or -1, the first optimum in lexicographic
    order of the permutation.
    """
    kp, kg = len(conf), len(conf[0])
    n = max(kp, kg)
    pad = [[conf[p][g] if p < kp and g < kg else 0 for g in range(n)] for p in range(n)]
    best, best_perm = None, None
    for perm in itertools.permutations(range(n)):
        s = sum(pad[p][perm[p]] for p in range(n))
        if best is None or s > best:
            best, best_perm = s, perm
    return [best_perm[p] if best_perm[p] < kg else -1 for p in range(kp)]


def metrics(conf):
    kp, kg = len(conf), len(conf[0])
    mapping = best_mapping(conf)
    total = sum(map(sum, conf))
    correct = sum(conf[p][mapping[p]] for p in range(kp) if mapping[p] >= 0)
    ious = []
    for g in range(kg):
        col = sum(conf[p][g] for p in range(kp))
        if col == 0:
            ious.append(None)
            continue
        preds = [p for p in range(kp) if mapping[p] == g]
        if not preds:
            ious.append(Fraction(0))
            continue
        p = preds[0]
        tp = conf[p][g]
        fp = sum(conf[p]) - tp
        fn = col - tp
        ious.append(Fraction(tp, tp + fp + fn))
    present = [v for v in ious if v is not None]
    return {
        "confusion": conf,
        "mapping": mapping,
        "accuracy": float(Fraction(correct, total)),
        "miou": float(sum(present) / len(present)),
        "iou": [None if v is None else float(v) for v in ious],
    }


def write_metric_fixtures():
    cases = [
        [[10, 0], [0, 5]],
        [[0, 7], [9, 0]],
        [[5, 3, 0], [2, 8, 1], [0, 4, 6]],
        [[3, 3], [3, 3]],
        [[4, 0, 0], [0, 0, 0], [1, 0, 5]],
        [[6, 1, 0], [0, 2, 9], [1, 7, 0], [3, 0, 0]],
        [[12, 4, 1, 0], [0, 0, 15, 2], [3, 11, 0, 1], [0, 1, 2, 20]],
        [[2, 5, 0], [8, 1, 3]],
    ]
    with open("metric_fixtures.json", "w") as fh:
        json.dump([metrics(c) for c in cases], fh, indent=1)


if __name__ == "__main__":
    write_npy_fixtures()
    write_metric_fixtures()
