"""
Soft targets and the normalized similarity loss
================================================

Label co-occurrence gives graded targets instead of an identity matrix.
This walks through the target matrix, the global normalization of the
similarity matrix and the loss on a four-sample batch.
"""

import numpy as np

from umcl.objective import label_targets, normalize_similarity, pair_targets, umcl_objective

# four samples over three classes; sample 2 shares a class with each neighbour
labels = np.array([
    [1, 0, 0],
    [0, 1, 0],
    [0, 1, 1],
    [0, 0, 1],
])
y = label_targets(labels)
print("targets from labels:\n", np.round(y, 3))

# image-text pairs only know their own partner
print("targets from pairs:\n", pair_targets(4))

# raw cosine scores between unit image and text embeddings
rng = np.random.default_rng(0)
v = rng.normal(size=(4, 8))
t = v + 0.3 * rng.normal(size=(4, 8))
v /= np.linalg.norm(v, axis=1, keepdims=True)
t /= np.linalg.norm(t, axis=1, keepdims=True)
raw = v @ t.T
s = normalize_similarity(raw)
print("Frobenius norm after normalization:", np.linalg.norm(s))

# loss and gradients with soft and with hard targets
for name, target in [("label", y), ("pair", pair_targets(4))]:
    loss, dv, dt = umcl_objective(v, t, target)
    print(f"{name:>5} targets: loss {loss:.4f}, |dv| {np.linalg.norm(dv):.4f}")

# a tiny hand check: identity scores at N=2 give ln(2)/2
print(umcl_objective(np.eye(2), np.eye(2), pair_targets(2))[0], np.log(2) / 2)
