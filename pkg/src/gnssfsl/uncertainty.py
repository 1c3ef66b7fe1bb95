"""Deep-ensemble prediction and softmax-variance uncertainty decomposition.

An ensemble is M independently seeded copies of the classifier network; one
deterministic forward pass per member gives T = M softmax vectors per sample.
The per-sample covariance splits into a data (aleatoric) term, the mean of
diag(c) - c c^T over members, and a model (epistemic) term, the covariance of
the member outputs around their mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nncore import EmbeddingNetwork, softmax_normalize


@dataclass
class Ensemble:
    members: list

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member")
        heads = {m.config.num_classes for m in self.members}
        if len(heads) != 1 or None in heads:
            raise ValueError("all members need the same classifier head")

    @property
    def num_members(self) -> int:
        return len(self.members)

    @property
    def num_classes(self) -> int:
        return self.members[0].config.num_classes


@dataclass
class UncertaintyReport:
    aleatoric: np.ndarray  # K x K
    epistemic: np.ndarray  # K x K
    mean_softmax: np.ndarray  # K

    @property
    def aleatoric_trace(self) -> float:
        return float(np.trace(self.aleatoric))

    @property
    def epistemic_trace(self) -> float:
        return float(np.trace(self.epistemic))


def predict_member(member: EmbeddingNetwork, images) -> np.ndarray:
    """Softmax class probabilities for a batch, one member."""
    return softmax_normalize(member.infer(images, with_head=True))


def predict_ensemble(ensemble: Ensemble, image) -> list[np.ndarray]:
    """One softmax vector per member (T = M forward passes)."""
    return [predict_member(member, [image])[0] for member in ensemble.members]


def decompose_uncertainty(softmax_list) -> UncertaintyReport:
    """Split predictive covariance into aleatoric and epistemic K x K parts."""
    if len(softmax_list) == 0:
        raise ValueError("need at least one softmax vector")
    c = np.asarray(softmax_list, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"expected (T, K) probabilities, got shape {c.shape}")
    if np.any(c < -1e-9) or np.any(np.abs(c.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("inputs are not probability vectors")
    t, k = c.shape
    mean = c.mean(axis=0)

    outer = np.einsum("ti,tj->tij", c, c)
    aleatoric = np.zeros((k, k))
    aleatoric[np.diag_indices(k)] = mean
    aleatoric -= outer.mean(axis=0)

    dev = c - mean
    epistemic = np.einsum("ti,tj->ij", dev, dev) / t

    return UncertaintyReport(aleatoric, epistemic, mean)


def scalar_uncertainty(report: UncertaintyReport, kind: str) -> float:
    """Trace of the selected uncertainty matrix."""
    if kind == "aleatoric":
        return report.aleatoric_trace
    if kind == "epistemic":
        return report.epistemic_trace
    raise ValueError(f"kind must be 'aleatoric' or 'epistemic', got {kind!r}")


def ensemble_reports(ensemble: Ensemble, images) -> list[UncertaintyReport]:
    """Batched decomposition for a list/array of images."""
    per_member = np.stack(
        [predict_member(m, images) for m in ensemble.members]
    )  # (M, N, K)
    return [decompose_uncertainty(per_member[:, i, :]) for i in range(per_member.shape[1])]


def write_uncertainty_csv(
    path: str | Path,
    sample_ids,
    true_labels,
    predicted_labels,
    reports: list[UncertaintyReport],
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sample_id", "true_label", "predicted_label", "aleatoric_trace", "epistemic_trace"]
        )
        for sid, t, p, rep in zip(sample_ids, true_labels, predicted_labels, reports):
            writer.writerow(
                [sid, int(t), int(p), f"{rep.aleatoric_trace:.9f}", f"{rep.epistemic_trace:.9f}"]
            )
