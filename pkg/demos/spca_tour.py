"""Walk through the stacked-PCA pipeline on random feature maps.

Run:  python demos/spca_tour.py
"""

import numpy as np

from iepkd.spca import IpcaState, affinity, center_vector, compress, first_pc, ipca_update, stereographic


def main():
    rng = np.random.default_rng(0)
    n, hw, d = 12, 25, 8

    # two groups of feature maps whose dominant channel pattern differs
    patterns = rng.normal(size=(2, d))
    labels = np.repeat([0, 1], n // 2)
    maps = rng.normal(size=(n, hw, 1)) * patterns[labels][:, None, :] + 0.1 * rng.normal(size=(n, hw, d))

    p = first_pc(maps)
    print("first PCs: unit rows", np.allclose(np.linalg.norm(p, axis=1), 1.0),
          "| sign rule holds", bool(np.all(p.max(axis=1) + p.min(axis=1) >= 0)))

    o = center_vector(d)
    pbar = stereographic(p, o)
    print(f"plane projection: max |pbar . o| = {np.abs(pbar @ o).max():.1e}")

    state = ipca_update(IpcaState.empty(d), pbar)
    c = compress(pbar, state)
    print(f"compressed descriptors: {c.shape}, singular values {np.round(state.S, 3)}")

    a = affinity(c)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(n, dtype=bool)
    print(f"affinity: within-group mean {a[same & off].mean():.3f}, cross-group mean {a[~same].mean():.3f}")


if __name__ == "__main__":
    main()
