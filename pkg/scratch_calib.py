"""Scratch calibration: collapse vs balance behavior of pretrain."""
import sys
import time

import numpy as np

from eclm.data import Dataset
from eclm.modular import ModelShape, make_model_selector, modularize
from eclm.rng import stream
from eclm.training import PretrainConfig, pretrain


def blobs(n_classes, dim, per_class, seed, spread=4.0, sigma=1.0):
    rng = stream(seed, "blobs")
    means = rng.normal(0, spread, size=(n_classes, dim))
    xs, ys = [], []
    for c in range(n_classes):
        xs.append(means[c] + sigma * rng.normal(size=(per_class, dim)))
        ys.append(np.full(per_class, c))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], y[order].copy())  # singleton subtasks


def run(lam, seed, epochs, n, k, lr, noise, classes=8):
    shape = ModelShape(
        input_dim=16, num_classes=classes, front_dims=(32,),
        num_module_layers=2, layer_width=32, layer_hidden=32,
        modules_per_layer=n, shrink_fractions=(0.25, 0.5),
    )
    model = modularize(shape, seed)
    sel = make_model_selector(shape, (16,), k, seed)
    data = blobs(classes, 16, 60, seed)
    cfg = PretrainConfig(epochs=epochs, lambda_balance=lam, lr=lr, batch_size=16, noise_scale=noise)
    _, _, log = pretrain(model, sel, data, cfg, stream(seed, "pre"))
    last = log[-1]
    loads = [np.array(l) for l in last["loads"]]
    lo, hi = 1 / (4 * n), 4 / n
    in_band = all(l.min() >= lo and l.max() <= hi for l in loads)
    print(
        f"lam={lam} seed={seed} ep={epochs} n={n} k={k} lr={lr} noise={noise}: "
        f"acc={last['accuracy']:.3f} max={last['max_load']:.3f} "
        f"min={min(l.min() for l in loads):.4f} collapsed={last['collapsed']} band={in_band}"
    )
    return last


t0 = time.time()
mode = sys.argv[1] if len(sys.argv) > 1 else "all"
if mode in ("all", "collapse"):
    print("--- lam=0 (want max>0.9) ---")
    for seed in (0, 1, 2):
        run(0.0, seed, epochs=150, n=8, k=2, lr=0.001, noise=1.0)
if mode in ("all", "balance"):
    print("--- lam=0.1 (want band) ---")
    for seed in (0, 1, 2):
        run(0.1, seed, epochs=150, n=8, k=2, lr=0.001, noise=1.0)
print(f"elapsed {time.time()-t0:.1f}s")
