"""Prototypical-network training, adaptation, and uncertainty-guided mining.

Pre-training optimizes episode classification (cross-entropy over negative
squared prototype distances), optionally combined with a pairwise embedding
loss whose quadruplets are drawn from a similar-class map. Adaptation to
unseen classes is prototype averaging only: the backbone never updates.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses as losses_mod
from .nncore import (
    ArchConfig,
    EmbeddingNetwork,
    init,
    sgd_step,
    softmax_backward,
    softmax_normalize,
)
from .spectro import CorpusRecord, LabeledCorpus
from .uncertainty import Ensemble, decompose_uncertainty, predict_member

SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_FRACTIONS = (0.64, 0.16, 0.20)
DEFAULT_ADAPTATION_CLASSES = (3, 7, 9, 10)


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries the last network state."""

    def __init__(self, message: str, network: EmbeddingNetwork, epoch: int):
        super().__init__(message)
        self.network = network
        self.epoch = epoch


# ---------------------------------------------------------------------------
# Corpus splitting
# ---------------------------------------------------------------------------


def _allocate(count: int, fractions) -> list[int]:
    """Largest-remainder split sizes; tiny classes fall back to train(+test)."""
    k = len(fractions)
    if count < k:
        out = [0] * k
        if count == 1 or fractions[-1] == 0:
            out[0] = count
        else:
            out[0] = count - 1
            out[-1] = 1
        return out
    exact = [count * f for f in fractions]
    base = [int(np.floor(e)) for e in exact]
    rem = count - sum(base)
    order = sorted(range(k), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    # Guarantee one sample per requested split when the class is big enough.
    for i in range(k):
        if fractions[i] > 0 and base[i] == 0:
            donor = int(np.argmax(base))
            base[donor] -= 1
            base[i] += 1
    return base


def split_corpus(corpus: LabeledCorpus, fractions=DEFAULT_SPLIT_FRACTIONS, seed: int = 0) -> LabeledCorpus:
    """Stratified per-class train/val/test tagging, deterministic per seed."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if len(fractions) != 3:
        raise ValueError("expected (train, val, test) fractions")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, rec in enumerate(corpus.records):
        by_class.setdefault(rec.label, []).append(i)

    assignment = [""] * len(corpus.records)
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        perm = rng.permutation(len(idx))
        idx = idx[perm]
        counts = _allocate(len(idx), fractions)
        start = 0
        for split, c in zip(SPLITS, counts):
            for j in idx[start : start + c]:
                assignment[j] = split
            start += c

    records = [replace(rec, split=assignment[i]) for i, rec in enumerate(corpus.records)]
    return LabeledCorpus(records, corpus.root)


# ---------------------------------------------------------------------------
# Episodes and prototypes
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    support: dict  # class -> list of images (2-D uint8 arrays)
    query: list  # list of (image, label)

    def __post_init__(self):
        if len(self.support) < 2:
            raise ValueError("episode needs at least 2 classes")
        for c, imgs in self.support.items():
            if len(imgs) < 1:
                raise ValueError(f"class {c} has an empty support set")
        support_classes = set(self.support)
        for _, label in self.query:
            if label not in support_classes:
                raise ValueError(f"query label {label} missing from support")


def sample_episode(
    corpus: LabeledCorpus, classes, k_shot: int, n_query: int, rng: np.random.Generator
) -> Episode:
    """Draw a k-shot episode with up to n_query queries per class."""
    by_class = _class_index(corpus)
    support = {}
    query = []
    for c in sorted(classes):
        idx = by_class.get(c, [])
        if len(idx) < k_shot:
            raise ValueError(f"class {c} has {len(idx)} samples, needs {k_shot} shots")
        perm = rng.permutation(len(idx))
        chosen = [idx[i] for i in perm]
        support[c] = [corpus.records[i].image.pixels for i in chosen[:k_shot]]
        for i in chosen[k_shot : k_shot + n_query]:
            query.append((corpus.records[i].image.pixels, c))
    if not query:
        raise ValueError("no query samples available; lower k_shot or n_query")
    return Episode(support, query)


@dataclass
class PrototypeClassifier:
    prototypes: dict  # class -> embedding vector
    backbone: EmbeddingNetwork

    def __post_init__(self):
        if not self.prototypes:
            raise ValueError("classifier needs at least one prototype")
        dims = {v.shape for v in self.prototypes.values()}
        if len(dims) != 1:
            raise ValueError("prototype dimensions disagree")

    def classes(self) -> list[int]:
        return sorted(self.prototypes)

    def prototype_matrix(self) -> np.ndarray:
        return np.stack([self.prototypes[c] for c in self.classes()])


def compute_prototypes(backbone: EmbeddingNetwork, support: dict) -> PrototypeClassifier:
    """Per-class arithmetic mean of support embeddings."""
    prototypes = {}
    for c in sorted(support):
        imgs = support[c]
        if len(imgs) == 0:
            raise ValueError(f"class {c} has no support samples")
        emb = backbone.infer(list(imgs))
        prototypes[int(c)] = emb.mean(axis=0)
    return PrototypeClassifier(prototypes, backbone)


def classify(classifier: PrototypeClassifier, image) -> tuple[int, dict]:
    """Nearest-prototype label; ties go to the smallest class id."""
    emb = classifier.backbone.infer([image])[0]
    distances = {}
    best_label, best_d = None, np.inf
    for c in classifier.classes():
        d = float(np.sqrt(np.sum((emb - classifier.prototypes[c]) ** 2)))
        distances[c] = d
        if d < best_d:
            best_label, best_d = c, d
    return best_label, distances


def classify_batch(classifier: PrototypeClassifier, images) -> np.ndarray:
    """Vectorized nearest-prototype labels for many images."""
    emb = classifier.backbone.infer(list(images))
    protos = classifier.prototype_matrix()
    d2 = ((emb[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    order = np.array(classifier.classes())
    return order[np.argmin(d2, axis=1)]


def pn_episode_loss(backbone: EmbeddingNetwork, episode: Episode):
    """Mean cross-entropy over queries with logits -d^2 to class prototypes.

    Returns (loss, parameter gradient); the gradient flows through both the
    query embeddings and the support embeddings behind each prototype.
    """
    classes = sorted(episode.support)
    shots = [len(episode.support[c]) for c in classes]
    support_imgs = [img for c in classes for img in episode.support[c]]
    query_imgs = [img for img, _ in episode.query]
    labels = np.array([classes.index(lbl) for _, lbl in episode.query])

    e_s, cache_s = backbone.forward_with_cache(support_imgs)
    e_q, cache_q = backbone.forward_with_cache(query_imgs)
    e_s = e_s.astype(np.float64)
    e_q = e_q.astype(np.float64)

    bounds = np.cumsum([0] + shots)
    protos = np.stack(
        [e_s[bounds[i] : bounds[i + 1]].mean(axis=0) for i in range(len(classes))]
    )

    diff = e_q[:, None, :] - protos[None, :, :]  # (Q, C, D)
    logits = -np.sum(diff**2, axis=2)
    loss, dlogits = losses_mod.cross_entropy_batch(logits, labels)

    d_eq = np.sum(dlogits[:, :, None] * (-2.0 * diff), axis=1)
    d_protos = np.einsum("qc,qcd->cd", dlogits, 2.0 * diff)
    d_es = np.zeros_like(e_s)
    for i in range(len(classes)):
        d_es[bounds[i] : bounds[i + 1]] = d_protos[i] / shots[i]

    grads = backbone.backward_from(cache_q, d_eq)
    grads = grads + backbone.backward_from(cache_s, d_es)
    return loss, grads


def adapt(
    backbone: EmbeddingNetwork,
    new_support: dict,
    k: int,
    base: Optional[PrototypeClassifier] = None,
) -> PrototypeClassifier:
    """Extend a prototype classifier with unseen classes; no gradient updates."""
    if k < 1:
        raise ValueError("k must be >= 1")
    base_classes = set(base.prototypes) if base is not None else set()
    overlap = base_classes & set(new_support)
    if overlap:
        raise ValueError(f"adaptation classes {sorted(overlap)} already known")
    clipped = {}
    for c, imgs in new_support.items():
        if len(imgs) < k:
            raise ValueError(f"class {c} has {len(imgs)} samples, k={k} requested")
        clipped[c] = list(imgs)[:k]
    new = compute_prototypes(backbone, clipped)
    merged = {} if base is None else {c: v.copy() for c, v in base.prototypes.items()}
    merged.update(new.prototypes)
    return PrototypeClassifier(merged, backbone)


# ---------------------------------------------------------------------------
# Similar-class map and quadruplet mining
# ---------------------------------------------------------------------------


@dataclass
class SimilarityMap:
    """Per class, other classes it is confusable with, hardest first."""

    ranked: dict  # class -> list of classes

    def __post_init__(self):
        for c, others in self.ranked.items():
            if c in others:
                raise ValueError(f"class {c} cannot be similar to itself")

    def get(self, c: int) -> list[int]:
        return list(self.ranked.get(c, []))

    def to_json(self) -> str:
        return json.dumps(
            {str(c): list(map(int, v)) for c, v in sorted(self.ranked.items())},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "SimilarityMap":
        raw = json.loads(text)
        return cls({int(c): [int(x) for x in v] for c, v in raw.items()})

    @classmethod
    def load(cls, path: str | Path) -> "SimilarityMap":
        return cls.from_json(Path(path).read_text())


def load_fixture_map() -> SimilarityMap:
    """Built-in similar-class map for the standard 11-class layout."""
    text = (
        resources.files("gnssfsl.data").joinpath("similar_classes_fixture.json").read_text()
    )
    return SimilarityMap.from_json(text)


def build_similarity_map(
    ensemble: Ensemble,
    corpus,
    quantile: float = 0.75,
    min_stat: float = 1e-6,
) -> SimilarityMap:
    """Rank confusable class pairs by mean epistemic trace.

    For an ordered pair (c, c'), the statistic is the mean epistemic trace over
    class-c samples whose ensemble-mean prediction puts c' in its top-2. Pairs
    must clear both an absolute floor and the per-class quantile threshold.
    """
    samples = _as_labeled_images(corpus)
    if not samples:
        raise ValueError("empty validation set")
    images = [img for img, _ in samples]
    labels = np.array([lbl for _, lbl in samples])

    member_probs = np.stack([predict_member(m, images) for m in ensemble.members])
    mean_probs = member_probs.mean(axis=0)

    k = ensemble.num_classes
    sums = np.zeros((k, k))
    counts = np.zeros((k, k), dtype=np.int64)
    for i in range(len(samples)):
        rep = decompose_uncertainty(member_probs[:, i, :])
        trace = rep.epistemic_trace
        top2 = np.argsort(-mean_probs[i], kind="stable")[:2]
        c = labels[i]
        for cp in top2:
            if cp != c:
                sums[c, cp] += trace
                counts[c, cp] += 1

    present = set(labels.tolist())
    missing = set(range(k)) - present
    if missing:
        warnings.warn(f"classes absent from validation data: {sorted(missing)}")

    ranked = {}
    for c in sorted(present):
        stats = {
            cp: sums[c, cp] / counts[c, cp]
            for cp in range(k)
            if cp != c and counts[c, cp] > 0
        }
        values = [v for v in stats.values() if v > min_stat]
        if not values:
            continue
        threshold = float(np.quantile(values, quantile))
        chosen = [
            (v, cp) for cp, v in stats.items() if v > min_stat and v >= threshold
        ]
        chosen.sort(key=lambda t: (-t[0], t[1]))
        if chosen:
            ranked[int(c)] = [int(cp) for _, cp in chosen]
    return SimilarityMap(ranked)


def _as_labeled_images(corpus) -> list:
    if isinstance(corpus, LabeledCorpus):
        return [(r.image.pixels, r.label) for r in corpus.records]
    return [(np.asarray(img), int(lbl)) for img, lbl in corpus]


def _class_index(corpus: LabeledCorpus) -> dict:
    by_class: dict[int, list[int]] = {}
    for i, rec in enumerate(corpus.records):
        by_class.setdefault(rec.label, []).append(i)
    return by_class


def _sample_quadruplet_indices(
    by_class: dict,
    sim_map: Optional[SimilarityMap],
    anchor_class: int,
    rng: np.random.Generator,
    prototypes: Optional[PrototypeClassifier] = None,
) -> tuple[int, int, int, int]:
    classes = sorted(by_class)
    if len(classes) < 3:
        raise ValueError(f"need at least 3 classes, corpus has {len(classes)}")
    if anchor_class not in by_class or len(by_class[anchor_class]) < 2:
        raise ValueError(f"anchor class {anchor_class} needs at least 2 samples")

    a_i, p_i = rng.choice(len(by_class[anchor_class]), size=2, replace=False)

    candidates = []
    if sim_map is not None:
        candidates = [c for c in sim_map.get(anchor_class) if c in by_class and c != anchor_class]
    if not candidates and prototypes is not None and anchor_class in prototypes.prototypes:
        anchor_proto = prototypes.prototypes[anchor_class]
        others = [c for c in prototypes.classes() if c != anchor_class and c in by_class]
        if others:
            dists = [float(np.sum((prototypes.prototypes[c] - anchor_proto) ** 2)) for c in others]
            candidates = [others[int(np.argmin(dists))]]
    if not candidates:
        candidates = [c for c in classes if c != anchor_class]
    s_class = int(candidates[rng.integers(len(candidates))])

    n_classes = [c for c in classes if c not in (anchor_class, s_class)]
    if not n_classes:
        raise ValueError("no class left for the negative sample")
    n_class = int(n_classes[rng.integers(len(n_classes))])
    return (
        by_class[anchor_class][a_i],
        by_class[anchor_class][p_i],
        by_class[s_class][rng.integers(len(by_class[s_class]))],
        by_class[n_class][rng.integers(len(by_class[n_class]))],
    )


def sample_quadruplet(
    corpus: LabeledCorpus,
    sim_map: Optional[SimilarityMap],
    anchor_class: int,
    rng: np.random.Generator,
    prototypes: Optional[PrototypeClassifier] = None,
) -> tuple[CorpusRecord, CorpusRecord, CorpusRecord, CorpusRecord]:
    """Draw (anchor, positive, similar, negative) records.

    The similar class comes from the map entry for the anchor class; when that
    entry is empty, it falls back to the class of the nearest other-class
    prototype (if given), else to a uniform draw over the other classes.
    """
    by_class = _class_index(corpus)
    a, p, s, n = _sample_quadruplet_indices(by_class, sim_map, anchor_class, rng, prototypes)
    return corpus.records[a], corpus.records[p], corpus.records[s], corpus.records[n]


def sample_triplet_indices(
    by_class: dict, classes, rng: np.random.Generator
) -> tuple[int, int, int]:
    """Indices for (anchor, positive, negative) under the label constraints."""
    eligible = [c for c in classes if len(by_class.get(c, [])) >= 2]
    if not eligible or len(classes) < 2:
        raise ValueError("need one class with 2+ samples and a second class")
    c = eligible[rng.integers(len(eligible))]
    a_i, p_i = rng.choice(len(by_class[c]), size=2, replace=False)
    others = [cc for cc in classes if cc != c and by_class.get(cc)]
    n_c = others[rng.integers(len(others))]
    n_i = rng.integers(len(by_class[n_c]))
    return by_class[c][a_i], by_class[c][p_i], by_class[n_c][n_i]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    loss: str = "ce"  # ce | contrastive | triplet | quadruplet
    alpha: float = 100.0
    alpha1: float = 2.0
    alpha2: float = 5.0
    pair_weight: float = 1.0  # serialized as "lambda"
    epochs: int = 10
    lr: float = 0.01
    decay: float = 0.0005
    seed: int = 0
    embed_dim: int = 64
    adaptation_classes: tuple = DEFAULT_ADAPTATION_CLASSES
    k_shot: int = 5
    similarity_map: str = "paper_fixture"  # computed | paper_fixture
    # Architecture / schedule knobs beyond the core key set.
    height: int = 32
    width: int = 32
    conv_channels: tuple = (16, 32, 64)
    dtype: str = "f32"
    pretrain: str = "episodic"  # episodic | ce
    episodes_per_epoch: int = 15
    episode_k_shot: int = 3  # support shots during pre-training episodes
    n_query: int = 5
    pair_batch: int = 8
    pairwise_norm: str = "softmax"  # softmax | l2 | none
    batch_size: int = 32  # ce pretrain mode

    def __post_init__(self):
        if self.loss not in ("ce", "contrastive", "triplet", "quadruplet"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.similarity_map not in ("computed", "paper_fixture"):
            raise ValueError(f"unknown similarity_map source {self.similarity_map!r}")
        if self.pretrain not in ("episodic", "ce"):
            raise ValueError(f"unknown pretrain mode {self.pretrain!r}")
        if self.pairwise_norm not in ("softmax", "l2", "none"):
            raise ValueError(f"unknown pairwise_norm {self.pairwise_norm!r}")
        if self.loss == "triplet" and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.loss == "quadruplet" and (self.alpha1 <= 0 or self.alpha2 <= 0):
            raise ValueError("quadruplet margins must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_json(self) -> str:
        d = self.__dict__.copy()
        d["lambda"] = d.pop("pair_weight")
        d["adaptation_classes"] = list(self.adaptation_classes)
        d["conv_channels"] = list(self.conv_channels)
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        if "lambda" in d:
            d["pair_weight"] = d.pop("lambda")
        if "adaptation_classes" in d:
            d["adaptation_classes"] = tuple(d["adaptation_classes"])
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def arch(self, num_classes: Optional[int] = None) -> ArchConfig:
        return ArchConfig(
            height=self.height,
            width=self.width,
            conv_channels=self.conv_channels,
            embed_dim=self.embed_dim,
            num_classes=num_classes,
            dtype=self.dtype,
        )


@dataclass
class TrainResult:
    network: EmbeddingNetwork
    epoch_losses: list
    config: TrainConfig
    train_classes: list = field(default_factory=list)


def _normalize_embeddings(emb: np.ndarray, mode: str):
    """Returns (normalized, backward_fn mapping dL/dnorm -> dL/demb)."""
    if mode == "none":
        return emb, lambda g: g
    if mode == "softmax":
        s = softmax_normalize(emb)
        return s, lambda g: softmax_backward(s, g)
    if mode == "l2":
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        norms = np.maximum(norms, 1e-12)
        u = emb / norms

        def back(g):
            return (g - u * np.sum(g * u, axis=1, keepdims=True)) / norms

        return u, back
    raise ValueError(f"unknown normalization {mode!r}")


def _pairwise_step(
    net: EmbeddingNetwork,
    corpus: LabeledCorpus,
    by_class: dict,
    classes: list,
    config: TrainConfig,
    sim_map: Optional[SimilarityMap],
    rng: np.random.Generator,
):
    """Sample a pair batch, embed it, and return (loss, parameter gradient)."""
    b = config.pair_batch
    roles = 4 if config.loss == "quadruplet" else 3
    idx = np.empty((roles, b), dtype=np.int64)
    for i in range(b):
        if config.loss == "quadruplet":
            eligible = [c for c in classes if len(by_class[c]) >= 2]
            anchor_class = eligible[rng.integers(len(eligible))]
            idx[:, i] = _sample_quadruplet_indices(by_class, sim_map, anchor_class, rng)
        else:
            idx[:, i] = sample_triplet_indices(by_class, classes, rng)

    flat = idx.reshape(-1)
    images = [corpus.records[j].image.pixels for j in flat]
    emb, cache = net.forward_with_cache(images)
    emb = emb.astype(np.float64)
    normed, back = _normalize_embeddings(emb, config.pairwise_norm)
    parts = normed.reshape(roles, b, -1)

    if config.loss == "quadruplet":
        batch = losses_mod.PairBatch(parts[0], parts[1], parts[3], similars=parts[2])
        loss, grads = losses_mod.quadruplet_loss(batch, config.alpha1, config.alpha2)
        d_norm = np.concatenate(
            [grads["anchors"], grads["positives"], grads["similars"], grads["negatives"]]
        )
    elif config.loss == "triplet":
        batch = losses_mod.PairBatch(parts[0], parts[1], parts[2])
        loss, grads = losses_mod.triplet_loss(batch, config.alpha)
        d_norm = np.concatenate([grads["anchors"], grads["positives"], grads["negatives"]])
    else:  # contrastive
        batch = losses_mod.PairBatch(parts[0], parts[1], parts[2])
        loss, grads = losses_mod.contrastive_loss(batch, config.alpha)
        d_norm = np.concatenate([grads["anchors"], grads["positives"], grads["negatives"]])

    # Average over pairs so the weight is batch-size independent.
    loss = loss / b
    d_emb = back(d_norm / b)
    pgrad = net.backward_from(cache, d_emb)
    return loss, pgrad


def train(
    corpus: LabeledCorpus,
    config: TrainConfig,
    sim_map: Optional[SimilarityMap] = None,
    epoch_callback=None,
) -> TrainResult:
    """Pre-train a backbone on the non-adaptation classes of the train split."""
    train_classes = [c for c in corpus.classes() if c not in set(config.adaptation_classes)]
    if len(train_classes) < 2:
        raise ValueError("need at least 2 training classes")
    train_corpus = corpus.subset(split="train", classes=set(train_classes))
    if len(train_corpus) == 0:
        raise ValueError("train split is empty; run split_corpus first")
    by_class = _class_index(train_corpus)

    if config.loss == "quadruplet" and sim_map is None:
        sim_map = load_fixture_map()

    rng = np.random.default_rng(config.seed)
    use_head = config.pretrain == "ce"
    net = init(config.arch(num_classes=len(train_classes) if use_head else None), config.seed)
    decay_mask = net.decay_mask()
    label_of = {c: i for i, c in enumerate(sorted(train_classes))}

    epoch_losses = []
    for epoch in range(config.epochs):
        step_losses = []
        for sel in _epoch_steps(use_head, train_corpus, config, rng):
            if use_head:
                loss, grads = _ce_batch(net, train_corpus, sel, label_of)
            else:
                k = min(config.episode_k_shot, min(len(v) for v in by_class.values()))
                episode = sample_episode(train_corpus, train_classes, k, config.n_query, rng)
                loss, grads = pn_episode_loss(net, episode)
            if config.loss != "ce":
                ploss, pgrads = _pairwise_step(
                    net, train_corpus, by_class, train_classes, config, sim_map, rng
                )
                loss = loss + config.pair_weight * ploss
                grads = grads + config.pair_weight * pgrads
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}", net, epoch
                )
            net.params = sgd_step(
                net.params, grads.astype(net.params.dtype), config.lr, config.decay, decay_mask
            )
            step_losses.append(loss)
        epoch_losses.append(float(np.mean(step_losses)))
        if epoch_callback is not None:
            epoch_callback(epoch, net)
    return TrainResult(net, epoch_losses, config, sorted(train_classes))


def _epoch_steps(use_head, train_corpus, config, rng):
    """Step plan for one epoch: minibatch index lists (ce) or episode slots."""
    if use_head:
        order = rng.permutation(len(train_corpus))
        return [
            order[s : s + config.batch_size]
            for s in range(0, len(order), config.batch_size)
        ]
    return [None] * config.episodes_per_epoch


def _ce_batch(net, train_corpus, sel, label_of):
    images = [train_corpus.records[i].image.pixels for i in sel]
    labels = np.array([label_of[train_corpus.records[i].label] for i in sel])
    logits, cache = net.forward_with_cache(images, with_head=True)
    loss, dlogits = losses_mod.cross_entropy_batch(logits, labels)
    return loss, net.backward_from(cache, dlogits)


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------


def base_support(corpus: LabeledCorpus, classes, per_class: int = 20) -> dict:
    """First-n train-split images per base class, for prototype building."""
    sub = corpus.subset(split="train", classes=set(classes))
    by_class = _class_index(sub)
    return {
        c: [sub.records[i].image.pixels for i in idx[:per_class]]
        for c, idx in sorted(by_class.items())
    }


def adaptation_support(corpus: LabeledCorpus, classes, k: int) -> dict:
    """First-k train-split images per adaptation class (the few-shot budget)."""
    sub = corpus.subset(split="train", classes=set(classes))
    by_class = _class_index(sub)
    missing = set(classes) - set(by_class)
    if missing:
        raise ValueError(f"no train samples for adaptation classes {sorted(missing)}")
    return {c: [sub.records[i].image.pixels for i in idx[:k]] for c, idx in sorted(by_class.items())}
