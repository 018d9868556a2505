"""
Subdomain surrogates and warm starts
====================================

Partition the mesh, train one surrogate per subdomain, and stitch the
subdomain predictions back together. Then reuse the weights of a model
trained on one subdomain as the starting point for the whole mesh.
"""
import numpy as np

from bracketgnn.data import compute_stats
from bracketgnn.dd import DDConfig, dd_train, fine_tune, slice_dataset, transfer_params
from bracketgnn.nnet import TrainConfig, train_surrogate
from bracketgnn.partition import partition_mesh
from bracketgnn.synthetic import SyntheticConfig, build_dataset

ds = build_dataset(SyntheticConfig(num_nodes=300, num_realizations=8, num_snapshots=4, seed=2))
stats = compute_stats(ds.split("train"))
normed = ds.normalized(stats)

part = partition_mesh(normed.graph, normed, k=3, seed=0)
slices = slice_dataset(normed, part, stats)
print("subdomain sizes:", [sl.graph.num_nodes for sl in slices])

# every slice carries the global statistics, never its own
assert all(sl.stats is stats for sl in slices)

res = dd_train(slices, DDConfig(num_subdomains=3, epochs=8))
for ep, (losses, val) in enumerate(zip(res.train_loss, res.history.val_loss)):
    print(f"epoch {ep}  subdomain train {np.round(losses, 2).tolist()}  global val {val:.1f}")

# warm start: pre-train on the first subdomain, then fine-tune on the full mesh
pre, _ = train_surrogate(slices[0].graph, slices[0].dataset.split("train"), (), TrainConfig(epochs=8), stats=stats)
warm = transfer_params(pre, normed.graph)
hist = fine_tune(warm, normed.split("train"), normed.split("validation"), epochs=4)
print("fine-tuned validation losses:", np.round(hist.val_loss, 1).tolist())
