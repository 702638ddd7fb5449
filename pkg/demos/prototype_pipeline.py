#!/usr/bin/env python
"""From feature taps to clustered global prototypes, one step at a time."""

import numpy as np

from fedbcs import tensor as tt
from fedbcs.data import default_styles, generate_domain
from fedbcs.federation import FederationConfig, prototype_wire_record
from fedbcs.network import SegNet, SegNetConfig
from fedbcs.prototypes import PrototypeAccumulator
from fedbcs.server import cluster_uploads, finch_cluster

model = SegNet(SegNetConfig(input_channels=1, class_count=2), seed=0)

# each "client" extracts prototypes from its own domain
uploads = []
for domain_id in range(3):
    style = default_styles(3)[domain_id]
    train, _ = generate_domain(domain_id, style, n_train=4, n_test=1,
                               seed=5, image_size=32)
    accum = PrototypeAccumulator(tuple(model.tap_channels), class_count=2)
    _, taps = model.forward(tt.Tensor(train.images))
    accum.add_batch({k: v.data for k, v in taps.items()}, train.labels)
    protos = accum.finalize(model.fusion, model.pathway_taps, domain_id)
    uploads.append(protos)
    print(f"client {domain_id}: {protos.upload_count} uploads "
          f"(2 pathways x 2 classes)")
    record = prototype_wire_record(domain_id, 0, protos.prototypes[0])
    print(f"  first record: pathway={record['pathway']} class={record['class_id']}"
          f" support={record['support']} d_fused={record['d_fused']}")

# the server clusters per (pathway, class) with the parameter-free rule
global_protos = cluster_uploads(uploads, class_count=2)
for (pathway, class_id), entry in sorted(global_protos.entries.items()):
    reps = entry["representatives"]
    print(f"global ({pathway}, class {class_id}): {len(reps)} cluster"
          f" representative(s), mean-prototype norm %.3f"
          % np.linalg.norm(entry["mean"]))

# the same clustering rule, standalone: two tight angular groups
rng = np.random.default_rng(2)
group_a = rng.normal([3, 0], 0.08, size=(5, 2))
group_b = rng.normal([0, 3], 0.08, size=(5, 2))
points = np.vstack([group_a, group_b])
for levels in (1, 2):
    partition = finch_cluster(points, metric="cosine", levels=levels)
    print(f"finch, {levels} level(s):", [sorted(c) for c in partition])
print("(the first-neighbor partition is the finest; recursing on cluster"
      " means merges fragments)")
