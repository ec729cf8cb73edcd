"""Loss kernels for prototype-guided federated training.

Four ingredients combine into the per-batch training loss: plain cross
entropy, a self-distillation term against the client's own previous
model, an alignment term that measures how far the received global
prototypes sit from remembered embeddings, and an attract/repel term
that pulls current embeddings toward their class prototype while pushing
the batch away from every prototype at once.

Gradient routing is part of each kernel's contract: distillation
teachers, alignment embeddings, and attraction prototypes are constants
(detached inside the kernel), so gradients only ever reach the intended
side no matter what the caller watched.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor, as_tensor

__all__ = [
    "LossWeights",
    "GlobalPrototypes",
    "PrototypeCoverageWarning",
    "cross_entropy",
    "distill_loss",
    "align_loss",
    "attract_loss",
    "repel_loss",
    "attract_repel_loss",
    "local_loss",
]


class PrototypeCoverageWarning(UserWarning):
    """No class in the batch had a matching global prototype."""


@dataclass(frozen=True)
class LossWeights:
    """Mixing knobs for the combined local loss.

    ce_weight splits mass between cross entropy and distillation;
    align_weight and proto_weight scale the two prototype terms; balance
    splits the attract/repel pair; scale sits inside their squared
    distances; temperature softens the distillation softmax.
    """

    ce_weight: float = 0.9
    align_weight: float = 1.0
    proto_weight: float = 0.1
    balance: float = 0.5
    scale: float = 0.5
    temperature: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.ce_weight <= 1.0:
            raise ValueError("ce_weight must sit in [0, 1]")
        if self.align_weight < 0 or self.proto_weight < 0:
            raise ValueError("align_weight and proto_weight must be nonnegative")
        if not 0.0 < self.balance <= 1.0:
            raise ValueError("balance must sit in (0, 1]")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


ProtoVector = Union[Tensor, np.ndarray]


class GlobalPrototypes:
    """Per-class prototype vectors of one embedding width.

    Values may be plain arrays (the federation case) or live tensors
    (so the alignment kernel can be differentiated against them).
    """

    def __init__(self, embedding_dim: int):
        if embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        self.embedding_dim = embedding_dim
        self._table: dict[int, ProtoVector] = {}

    def set(self, label: int, vector: ProtoVector) -> None:
        if tuple(vector.shape) != (self.embedding_dim,):
            raise ShapeError(
                f"prototype for class {label} has shape {tuple(vector.shape)}, "
                f"expected ({self.embedding_dim},)"
            )
        self._table[int(label)] = vector

    def get(self, label: int) -> Optional[ProtoVector]:
        return self._table.get(int(label))

    def has(self, label: int) -> bool:
        return int(label) in self._table

    def classes(self) -> list[int]:
        return sorted(self._table)

    def __len__(self) -> int:
        return len(self._table)

    def copy(self) -> "GlobalPrototypes":
        fresh = GlobalPrototypes(self.embedding_dim)
        fresh._table = dict(self._table)
        return fresh

    def as_arrays(self) -> dict[int, np.ndarray]:
        return {
            c: (v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64))
            for c, v in self._table.items()
        }


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the labels under row softmax."""
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"logits must be a nonempty (n, C) matrix, got {logits.shape}")
    picked = dc.gather_labels(dc.log_softmax_t(logits, 1.0), labels)
    return dc.tmean(dc.neg(picked))


def distill_loss(teacher_logits: Tensor, student_logits: Tensor, temperature: float) -> Tensor:
    """Temperature-softened KL divergence from teacher to student,
    averaged over the batch and rescaled by temperature squared.

    The teacher side is detached: gradients flow through the student
    logits only.
    """
    teacher_logits = dc.detach(as_tensor(teacher_logits))
    student_logits = as_tensor(student_logits)
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(
            f"teacher {teacher_logits.shape} and student {student_logits.shape} differ"
        )
    if student_logits.ndim != 2 or student_logits.shape[0] < 1:
        raise ShapeError("logits must be a nonempty (n, C) matrix")
    n = student_logits.shape[0]
    p = dc.softmax_t(teacher_logits, temperature)
    log_p = dc.log_softmax_t(teacher_logits, temperature)
    log_q = dc.log_softmax_t(student_logits, temperature)
    kl_sum = dc.tsum(dc.mul(p, dc.sub(log_p, log_q)))
    return dc.mul(kl_sum, temperature * temperature / n)


def _usable_groups(
    embeddings_by_class: Mapping[int, Tensor], protos: GlobalPrototypes, caller: str
) -> list[tuple[Tensor, ProtoVector]]:
    groups = []
    for label in sorted(embeddings_by_class):
        emb = as_tensor(embeddings_by_class[label])
        if emb.ndim != 2 or emb.shape[0] == 0:
            continue
        if emb.shape[1] != protos.embedding_dim:
            raise ShapeError(
                f"class {label} embeddings are {emb.shape[1]}-wide, "
                f"prototypes are {protos.embedding_dim}-wide"
            )
        proto = protos.get(label)
        if proto is None:
            continue  # class without a prototype is skipped
        groups.append((emb, proto))
    if not groups:
        warnings.warn(
            f"{caller}: no batch class has a global prototype; returning 0",
            PrototypeCoverageWarning,
            stacklevel=3,
        )
    return groups


def align_loss(embeddings_by_class: Mapping[int, Tensor], protos: GlobalPrototypes) -> Tensor:
    """How far the received prototypes drifted from remembered embeddings.

    Per class: squared distance (mean over dimensions) between each
    remembered embedding and the class prototype, averaged over the
    class; classes are then averaged uniformly. Embeddings are detached;
    gradients reach only the prototype side.
    """
    groups = _usable_groups(embeddings_by_class, protos, "align_loss")
    if not groups:
        return as_tensor(0.0)
    total = None
    for emb, proto in groups:
        gap = dc.sub(dc.detach(emb), as_tensor(proto))
        term = dc.tmean(dc.square(gap))
        total = term if total is None else dc.add(total, term)
    return dc.mul(total, 1.0 / len(groups))


def attract_loss(
    embeddings_by_class: Mapping[int, Tensor], protos: GlobalPrototypes, scale: float
) -> Tensor:
    """Pull within-class embeddings toward their global prototype.

    Sum over classes of the class-mean squared distance, scaled; the
    prototypes are detached so gradients reach only the embeddings.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    groups = _usable_groups(embeddings_by_class, protos, "attract_loss")
    if not groups:
        return as_tensor(0.0)
    total = None
    for emb, proto in groups:
        gap = dc.sub(emb, dc.detach(as_tensor(proto)))
        term = dc.tmean(dc.square(gap))
        total = term if total is None else dc.add(total, term)
    return dc.mul(total, float(scale))


def repel_loss(
    embeddings: Tensor,
    protos: GlobalPrototypes,
    scale: float,
    classes: Optional[Iterable[int]] = None,
) -> Tensor:
    """Push the whole batch away from every class prototype at once.

    Log-sum-exp over classes of the negated, scaled batch-mean squared
    distance to each prototype; computed with a detached max shift so the
    exponentials never overflow. Moving embeddings away from a prototype
    lowers the loss.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    embeddings = as_tensor(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise ShapeError(f"embeddings must be a nonempty matrix, got {embeddings.shape}")
    if embeddings.shape[1] != protos.embedding_dim:
        raise ShapeError(
            f"embeddings are {embeddings.shape[1]}-wide, prototypes are "
            f"{protos.embedding_dim}-wide"
        )
    wanted = protos.classes() if classes is None else sorted(set(int(c) for c in classes))
    scores = []
    for label in wanted:
        proto = protos.get(label)
        if proto is None:
            continue
        gap = dc.sub(embeddings, as_tensor(proto))
        scores.append(dc.mul(dc.tmean(dc.square(gap)), -float(scale)))
    if not scores:
        warnings.warn(
            "repel_loss: no requested class has a global prototype; returning 0",
            PrototypeCoverageWarning,
            stacklevel=2,
        )
        return as_tensor(0.0)
    shift = max(s.item() for s in scores)  # constant: gradient-neutral shift
    total = None
    for s in scores:
        e = dc.exp(dc.sub(s, as_tensor(shift)))
        total = e if total is None else dc.add(total, e)
    return dc.add(dc.log(total), as_tensor(shift))


def attract_repel_loss(attract: Tensor, repel: Tensor, balance: float) -> Tensor:
    """Convex mix of the attract and repel terms."""
    if not 0.0 < balance <= 1.0:
        raise ValueError("balance must sit in (0, 1]")
    attract, repel = as_tensor(attract), as_tensor(repel)
    if attract.shape != () or repel.shape != ():
        raise ShapeError("component losses must be scalars")
    return dc.add(dc.mul(attract, float(balance)), dc.mul(repel, 1.0 - float(balance)))


def local_loss(
    ce: Tensor,
    distill: Optional[Tensor],
    align: Optional[Tensor],
    attract_repel: Optional[Tensor],
    weights: LossWeights,
    round_idx: int,
) -> Tensor:
    """Combined per-batch training loss.

    Round 1 is plain cross entropy (returned as-is, bit for bit); later
    rounds mix all four components by the configured weights.
    """
    ce = as_tensor(ce)
    if ce.shape != ():
        raise ShapeError("ce must be a scalar loss")
    if round_idx < 1:
        raise ValueError(f"round index must be >= 1, got {round_idx}")
    if round_idx == 1:
        return ce
    parts = {"distill": distill, "align": align, "attract_repel": attract_repel}
    for name, part in parts.items():
        if part is None:
            raise ValueError(f"{name} loss is required after round 1")
        if as_tensor(part).shape != ():
            raise ShapeError(f"{name} must be a scalar loss")
    out = dc.add(
        dc.mul(ce, weights.ce_weight),
        dc.mul(as_tensor(distill), 1.0 - weights.ce_weight),
    )
    out = dc.add(out, dc.mul(as_tensor(align), weights.align_weight))
    return dc.add(out, dc.mul(as_tensor(attract_repel), weights.proto_weight))
