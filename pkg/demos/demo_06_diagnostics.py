"""
Latent specialization diagnostics
=================================

Two views of whether latent slots learned distinct jobs:

  cross-capture H[i, j]  fraction of slot j's activation variance lying
                         inside slot i's minimal tau-variance PCA
                         subspace. High off-diagonals mean redundancy.
  silhouette             cluster-quality score over all activations with
                         slots as labels. Near 1 means well-separated
                         roles; near 0 means interchangeable slots.

Synthetic dumps make the two failure axes easy to see: the scores keep
them apart, because slots can be redundant in content (same subspace)
while still being separated in space, and vice versa.
"""

import numpy as np

from kvlatent.interp import (ActivationDump, cross_capture, mean_offdiag,
                             silhouette)


def dump_from(rows):
    return ActivationDump(rows=[np.asarray(r, dtype=np.float32)
                                for r in rows], d_model=rows[0].shape[1])


rng = np.random.default_rng(3)
d = 16


def report(name, dump):
    cap = cross_capture(dump, tau=0.9)
    sil = silhouette(dump)
    print(f"{name:24s} mean offdiag capture {mean_offdiag(cap):.3f}   "
          f"global silhouette {sil.global_score:.3f}")


# four slots, each its own coordinate axis and its own neighborhood
specialized = [np.outer(10 + rng.normal(size=60), np.eye(d)[i])
               + 0.05 * rng.normal(size=(60, d)) for i in range(4)]
report("specialized", dump_from(specialized))

# every slot is the same cloud: total redundancy, no separation
shared = rng.normal(size=(60, d))
report("collapsed", dump_from([shared + 0.01 * rng.normal(size=(60, d))
                               for _ in range(4)]))

# same 1-D subspace but far-apart means: redundant content, separated
# clusters; capture stays high while silhouette also goes high
v = rng.normal(size=d)
v /= np.linalg.norm(v)
separated = [100.0 * i * v + np.outer(rng.normal(size=60, scale=0.5), v)
             for i in range(4)]
report("separated but redundant", dump_from(separated))
