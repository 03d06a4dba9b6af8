"""Generate the synthetic credit-scoring dataset shipped in data/.

Produces a file with the canonical german.data-numeric schema: 1000 rows of
24 integer features plus a label column in {1, 2}, with exactly 700 good and
300 bad rows. Labels follow a sparse logistic ground truth over the features
so the d=51 regression posterior has real structure. Deterministic; rerun to
regenerate the identical file.
"""

from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent.parent / "data" / "german_credit_synthetic.data"
SEED = 20240

# integer feature ranges loosely shaped like the canonical numeric encoding:
# a few wide "amount/duration" columns, the rest small ordinal codes
WIDE = {1: (4, 72), 4: (250, 184_00), 12: (19, 75)}


def main() -> None:
    rng = np.random.default_rng(SEED)
    n = 1000
    cols = []
    for j in range(24):
        if j in WIDE:
            lo, hi = WIDE[j]
            col = rng.integers(lo, hi + 1, size=n)
        else:
            col = rng.integers(0, 5, size=n)
        cols.append(col)
    X = np.stack(cols, axis=1).astype(float)

    Xs = (X - X.mean(axis=0)) / X.std(axis=0)
    true_beta = np.zeros(24)
    active = rng.choice(24, size=6, replace=False)
    true_beta[active] = rng.normal(scale=1.2, size=6)
    logits = Xs @ true_beta + 0.4 * rng.standard_normal(n)
    # exactly 300 bad-credit rows: take the highest-risk logits
    order = np.argsort(logits)
    labels = np.ones(n, dtype=int)
    labels[order[-300:]] = 2

    OUT.parent.mkdir(parents=True, exist_ok=True)
    with open(OUT, "w") as fh:
        for i in range(n):
            feats = " ".join(str(int(v)) for v in X[i])
            fh.write(f"{feats} {labels[i]}\n")
    print(f"wrote {OUT} ({n} rows, {int(np.sum(labels == 2))} bad)")


if __name__ == "__main__":
    main()
