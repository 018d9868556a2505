"""
Training a global surrogate
===========================

A small synthetic ice-sheet dataset: smooth random friction fields, a
thickness that changes a little between snapshots and a local nonlinear
velocity law. The surrogate encodes the five node features and the edge
lengths, runs the latent flow, and decodes two velocity components.
"""
import time

import numpy as np

from bracketgnn.data import compute_stats
from bracketgnn.nnet import TrainConfig, relative_l2, train_surrogate
from bracketgnn.synthetic import SyntheticConfig, build_dataset

ds = build_dataset(SyntheticConfig(num_nodes=300, num_realizations=10, num_snapshots=4, seed=0))
stats = compute_stats(ds.split("train"))
normed = ds.normalized(stats)
print(ds.graph.num_nodes, "nodes,", ds.graph.num_edges, "edges,", len(ds.samples), "samples")

test = normed.split("test")
truth = np.stack([s.targets for s in ds.split("test")])
t0 = time.time()


def report(epoch, model, hist):
    pred = model.predict(test) * stats.target_sigma + stats.target_mu
    print(f"epoch {epoch:>2}  train {hist.train_loss[-1]:8.2f}  val {hist.val_loss[-1]:10.1f}"
          f"  test rel {relative_l2(pred, truth):.3f}  ({time.time() - t0:.0f}s)")


model, hist = train_surrogate(ds.graph, normed.split("train"), normed.split("validation"),
                              TrainConfig(epochs=15), stats=stats, callback=report)
print("best validation epoch:", hist.best_epoch)
