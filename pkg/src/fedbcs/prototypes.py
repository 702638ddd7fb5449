"""Class prototypes from recalibrated features.

Pipeline per pathway (encoder or decoder): class-masked mean at a shallow
and a deep tap, concatenation (shallow, deep), then a linear fusion head
into the shared d_fused space. Client prototypes are accumulated as
per-layer class sums over a whole epoch and fused once at the end, so the
result is exactly the computation over the concatenated dataset no matter
how the batches were cut. Per-sample embeddings run the identical pipeline
but keep gradients, because they are the anchors of the alignment losses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError
from .tensor import Parameter, Tensor


class FusionHead:
    """Linear projection of a concatenated prototype pair into d_fused.

    Equivalent to a 1x1 convolution applied to a 1x1 spatial vector. The
    parameters are part of the federated model.
    """

    def __init__(self, prefix: str, rng, d_in: int, d_out: int):
        if d_out > d_in:
            raise ContractError("fused dimension cannot exceed the concatenated width")
        bound = np.sqrt(6.0 / d_in)
        self.weight = Parameter(f"{prefix}.weight", rng.uniform(-bound, bound, (d_out, d_in)))
        self.bias = Parameter(f"{prefix}.bias", np.zeros(d_out))

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return tt.linear(x, self.weight, self.bias)


def downsample_labels(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Center-pixel nearest-neighbor reduction of a label map to (h, w)."""
    big_h, big_w = labels.shape
    if big_h % h or big_w % w:
        raise DimensionError("label extents must be multiples of the feature extents")
    fh, fw = big_h // h, big_w // w
    return labels[fh // 2::fh, fw // 2::fw][:h, :w]


def class_masked_mean(feature: Tensor, labels: np.ndarray, class_id: int):
    """Mean feature vector over the pixels of one class.

    feature: (C,h,w); labels: (H,W) ints at any multiple resolution.
    Returns (vector Tensor[C], support) or (None, 0) when the class is
    absent at the feature resolution.
    """
    if feature.ndim != 3:
        raise DimensionError("class_masked_mean expects a (C,h,w) feature map")
    _, h, w = feature.data.shape
    ds = downsample_labels(labels, h, w)
    mask = ds == class_id
    support = int(mask.sum())
    if support == 0:
        return None, 0
    weights = Tensor(mask.astype(np.float64))
    vec = tt.scale(tt.tsum(tt.mul(feature, weights), axis=(1, 2)), 1.0 / support)
    return vec, support


def hierarchical_concat(shallow: Tensor, deep: Tensor) -> Tensor:
    """Fixed (shallow, deep) ordering."""
    return tt.concat([shallow, deep], axis=0)


@dataclass
class Prototype:
    class_id: int
    pathway: str  # "enc" or "dec"
    vector: np.ndarray
    support: int  # pixel count at the shallower tap's resolution

    def as_record(self, client_id: int, round_index: int) -> dict:
        return {
            "client_id": client_id,
            "round": round_index,
            "pathway": self.pathway,
            "class_id": self.class_id,
            "support": self.support,
            "d_fused": int(self.vector.size),
            "vector": [float(v) for v in self.vector],
        }


class PrototypeSet:
    """One client's uploaded prototypes for one round."""

    def __init__(self, client_id: int, prototypes):
        self.client_id = client_id
        self.prototypes = list(prototypes)

    def get(self, pathway: str, class_id: int):
        for p in self.prototypes:
            if p.pathway == pathway and p.class_id == class_id:
                return p
        return None

    @property
    def upload_count(self) -> int:
        return len(self.prototypes)


class PrototypeAccumulator:
    """Running per-layer class sums over an epoch of forward passes.

    Sums and supports are additive, so batch boundaries cannot change the
    result; fusion happens once, in finalize.
    """

    def __init__(self, tap_names, class_count: int):
        self.class_count = class_count
        self.sums = {(name, k): None for name in tap_names for k in range(class_count)}
        self.supports = {key: 0 for key in self.sums}

    def add_batch(self, taps_data: dict, labels: np.ndarray) -> None:
        """taps_data: tap name -> (N,C,h,w) array; labels: (N,H,W) ints."""
        if labels.ndim != 3:
            raise DimensionError("add_batch expects batched (N,H,W) labels")
        for name, feats in taps_data.items():
            n, _, h, w = feats.shape
            ds = np.stack([downsample_labels(labels[i], h, w) for i in range(n)])
            for k in range(self.class_count):
                mask = (ds == k).astype(np.float64)
                support = int(mask.sum())
                if support == 0:
                    continue
                vec = np.tensordot(feats, mask, axes=((0, 2, 3), (0, 1, 2)))
                key = (name, k)
                if self.sums[key] is None:
                    self.sums[key] = vec
                else:
                    self.sums[key] = self.sums[key] + vec
                self.supports[key] += support

    def finalize(self, fusion_heads: dict, pathway_taps: dict, client_id: int) -> PrototypeSet:
        """Fuse accumulated per-layer means; absent classes are skipped."""
        prototypes = []
        for pathway, (shallow, deep) in pathway_taps.items():
            head = fusion_heads[pathway]
            for k in range(self.class_count):
                s_sh = self.supports[(shallow, k)]
                s_dp = self.supports[(deep, k)]
                if s_sh == 0 or s_dp == 0:
                    continue
                mean_sh = self.sums[(shallow, k)] / s_sh
                mean_dp = self.sums[(deep, k)] / s_dp
                cat = np.concatenate([mean_sh, mean_dp])
                fused = head.weight.data @ cat + head.bias.data
                prototypes.append(Prototype(k, pathway, fused, s_sh))
        return PrototypeSet(client_id, prototypes)


def build_client_prototypes(model, batches, client_id: int = 0) -> PrototypeSet:
    """Prototypes of a frozen model over a batch stream.

    batches: iterable of (images (N,1,H,W), labels (N,H,W)) arrays. Runs
    without a tape; uploads carry no gradients.
    """
    tap_names = [t for pair in model.pathway_taps.values() for t in pair]
    acc = PrototypeAccumulator(tap_names, model.config.class_count)
    seen = False
    for images, labels in batches:
        seen = True
        _, taps = model.forward(Tensor(images))
        acc.add_batch({name: taps[name].data for name in tap_names}, labels)
    if not seen:
        raise ContractError("build_client_prototypes needs at least one batch")
    return acc.finalize(model.fusion, model.pathway_taps, client_id)


def embed_from_taps(model, taps: dict, labels: np.ndarray, sample_index: int) -> dict:
    """Per-class anchor embeddings for one sample of a batched forward.

    Returns {class_id: {"enc": Tensor[d_fused], "dec": Tensor[d_fused]}},
    keeping gradients to the model. A class is skipped unless it is present
    at every contributing tap.
    """
    per_class = {}
    for k in range(model.config.class_count):
        pathways = {}
        for pathway, (shallow, deep) in model.pathway_taps.items():
            pair = []
            for name in (shallow, deep):
                tap = taps[name]
                if tap.ndim == 4:
                    sample = tt.reshape(tt.narrow(tap, 0, sample_index, 1),
                                        tap.data.shape[1:])
                else:
                    sample = tap
                vec, support = class_masked_mean(sample, labels[sample_index], k)
                if support == 0:
                    pair = None
                    break
                pair.append(vec)
            if pair is None:
                pathways = None
                break
            pathways[pathway] = model.fusion[pathway](hierarchical_concat(*pair))
        if pathways is not None:
            per_class[k] = pathways
    return per_class


def embed_sample(model, image: np.ndarray, labels: np.ndarray) -> dict:
    """Anchor embeddings of a single (1,H,W) image; same pipeline as the
    client prototypes, gradients intact."""
    _, taps = model.forward(Tensor(image))
    return embed_from_taps(model, taps, labels[None], 0)
