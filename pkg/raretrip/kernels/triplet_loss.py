# Copyright 2025-present the Raretrip team. All rights reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

__all__ = [
    "EmbeddingBatch",
    "TripletIndex",
    "BatchAllResult",
    "BatchHardResult",
    "pairwise_squared_distances",
    "triplet_term",
    "triplet_indices",
    "batch_all_loss",
    "batch_hard_loss",
]

import itertools
from dataclasses import dataclass
from typing import List, NamedTuple, Tuple
import torch
from ..models._utils import (
    DTYPE,
    RaretripConfigError,
    ShapeError,
    NoValidTripletError,
    SingletonClassError,
)
from .utils import random_tensor, run_gradcheck


@dataclass(eq = False)
class EmbeddingBatch:
    """N embeddings of dimension d with binary labels."""
    embeddings : torch.Tensor
    labels     : torch.Tensor

    def __post_init__(self):
        self.embeddings = torch.as_tensor(self.embeddings, dtype = DTYPE)
        self.labels     = torch.as_tensor(self.labels).to(torch.int64)
        if self.embeddings.dim() != 2 or self.embeddings.shape[1] < 1:
            raise ShapeError(
                f"Raretrip: embeddings must have shape (N, d) with d >= 1, got {tuple(self.embeddings.shape)}."
            )
        if self.labels.dim() != 1 or self.labels.shape[0] != self.embeddings.shape[0]:
            raise ShapeError(
                f"Raretrip: expected {self.embeddings.shape[0]} labels, got shape {tuple(self.labels.shape)}."
            )
        if ((self.labels != 0) & (self.labels != 1)).any():
            raise ValueError("Raretrip: embedding labels must be binary (0 or 1).")
        pass
    pass

    @property
    def class_counts(self) -> Tuple[int, int]:
        k1 = int(self.labels.sum().item())
        return len(self.labels) - k1, k1
    pass

    def __len__(self): return self.embeddings.shape[0]
pass


class TripletIndex(NamedTuple):
    anchor   : int
    positive : int
    negative : int
pass


@dataclass(eq = False)
class BatchAllResult:
    loss             : float          # sum over every valid triplet
    mean_loss        : float          # sum over the active triplets / their count
    grad             : torch.Tensor   # d(loss)/d(embeddings)
    active_triplets  : int
    num_triplets     : int

    @property
    def mean_grad(self) -> torch.Tensor:
        return self.grad / max(1, self.active_triplets)
    pass

    @property
    def active_fraction(self) -> float:
        return self.active_triplets / self.num_triplets
    pass
pass


@dataclass(eq = False)
class BatchHardResult:
    loss             : float          # sum over anchors
    mean_loss        : float          # sum / number of anchors
    grad             : torch.Tensor
    anchors          : torch.Tensor   # anchors that took part
    hardest_positive : torch.Tensor   # per anchor, -1 for dropped anchors
    hardest_negative : torch.Tensor
    active_anchors   : int

    @property
    def num_anchors(self) -> int: return len(self.anchors)

    @property
    def mean_grad(self) -> torch.Tensor:
        return self.grad / max(1, self.num_anchors)
    pass

    @property
    def active_fraction(self) -> float:
        return self.active_anchors / max(1, self.num_anchors)
    pass
pass


def _check_margin(alpha : float) -> float:
    alpha = float(alpha)
    if not (alpha >= 0.0):
        raise RaretripConfigError(f"Raretrip: triplet margin must be >= 0, got {alpha}.")
    return alpha
pass


def pairwise_squared_distances(E : torch.Tensor) -> torch.Tensor:
    # Explicit differences rather than |a|^2 - 2ab + |b|^2, which cancels badly
    diff = E[:, None, :] - E[None, :, :]
    return (diff * diff).sum(dim = -1)
pass


def triplet_term(f_a, f_p, f_n, alpha : float) -> float:
    """max(0, |f_a - f_p|^2 - |f_a - f_n|^2 + alpha) with squared distances."""
    f_a = torch.as_tensor(f_a, dtype = DTYPE)
    f_p = torch.as_tensor(f_p, dtype = DTYPE)
    f_n = torch.as_tensor(f_n, dtype = DTYPE)
    if not (f_a.shape == f_p.shape == f_n.shape):
        raise ShapeError(
            f"Raretrip: triplet vectors differ in dimension: "\
            f"{tuple(f_a.shape)}, {tuple(f_p.shape)}, {tuple(f_n.shape)}."
        )
    alpha = _check_margin(alpha)
    d_ap = ((f_a - f_p) ** 2).sum().item()
    d_an = ((f_a - f_n) ** 2).sum().item()
    return max(0.0, d_ap - d_an + alpha)
pass


def _valid_triplet_mask(labels : torch.Tensor) -> torch.Tensor:
    # mask[a, p, n] = label(a) == label(p), a != p, label(n) != label(a)
    N = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    not_self = ~torch.eye(N, dtype = torch.bool)
    return (same & not_self)[:, :, None] & (~same)[:, None, :]
pass


def triplet_indices(labels) -> List[TripletIndex]:
    """Every valid (anchor, positive, negative), lexicographic order."""
    labels = torch.as_tensor(labels).to(torch.int64)
    return [TripletIndex(*t) for t in torch.nonzero(_valid_triplet_mask(labels), as_tuple = False).tolist()]
pass


def batch_all_loss(batch : EmbeddingBatch, alpha : float) -> BatchAllResult:
    """
        Sum of the triplet term over every valid triplet, anchors from both classes.
        For labels with counts k0, k1 there are k0 * k1 * (k0 + k1 - 2) triplets.

        Gradient of a single active triplet:
            d/df_a = 2 (f_n - f_p)
            d/df_p = 2 (f_p - f_a)
            d/df_n = 2 (f_a - f_n)
        Summed over triplets this is the gradient of sum_ab M_ab |f_a - f_b|^2 with
        M = (active count per (a, p)) - (active count per (a, n)), which needs no (T, d) buffer.
    """
    alpha = _check_margin(alpha)
    E, labels = batch.embeddings, batch.labels

    valid = _valid_triplet_mask(labels)
    num_triplets = int(valid.sum().item())
    if num_triplets == 0:
        k0, k1 = batch.class_counts
        raise NoValidTripletError(
            f"Raretrip: batch with class counts k0 = {k0}, k1 = {k1} has no valid triplet. "\
            "Recompose the batch with at least two samples of one class and one of the other."
        )
    pass

    D = pairwise_squared_distances(E)
    hinge  = D[:, :, None] - D[:, None, :] + alpha
    active = valid & (hinge > 0)
    loss   = hinge[active].sum().item()
    n_active = int(active.sum().item())

    weights = active.to(E.dtype)
    M = weights.sum(dim = 2) - weights.sum(dim = 1)
    degree = M.sum(dim = 1) + M.sum(dim = 0)
    grad = 2.0 * (degree[:, None] * E - (M + M.t()) @ E)

    return BatchAllResult(
        loss            = loss,
        mean_loss       = loss / n_active if n_active > 0 else 0.0,
        grad            = grad,
        active_triplets = n_active,
        num_triplets    = num_triplets,
    )
pass


def _lowest_index_extremum(values : torch.Tensor, mask : torch.Tensor, largest : bool) -> torch.Tensor:
    N = values.shape[1]
    fill = -float("inf") if largest else float("inf")
    masked = torch.where(mask, values, torch.full_like(values, fill))
    extreme = masked.amax(dim = 1) if largest else masked.amin(dim = 1)
    index = torch.arange(N).expand_as(values)
    hits = mask & (masked == extreme[:, None])
    return torch.where(hits, index, torch.full_like(index, N)).amin(dim = 1)
pass


def batch_hard_loss(batch : EmbeddingBatch, alpha : float, strict : bool = True) -> BatchHardResult:
    """
    One term per anchor: the farthest positive against the closest negative.
    Ties pick the lowest index. With strict = False, anchors whose class has a
    single member are dropped instead of raising.
    """
    alpha = _check_margin(alpha)
    E, labels = batch.embeddings, batch.labels
    N = len(batch)
    counts = batch.class_counts

    if min(counts) == 0:
        present = 0 if counts[0] > 0 else 1
        raise NoValidTripletError(
            f"Raretrip: every sample in the batch has label {present}, so no anchor has a negative. "\
            "Recompose the batch with both classes."
        )
    pass
    for label, count in enumerate(counts):
        if count == 1 and strict:
            raise SingletonClassError(
                f"Raretrip: class {label} has a single member in the batch, so its anchor has no positive."
            )
        pass
    pass

    keep = torch.tensor([counts[int(y)] >= 2 for y in labels], dtype = torch.bool)
    anchors = torch.nonzero(keep).flatten()
    if len(anchors) == 0:
        raise NoValidTripletError("Raretrip: no anchor has a positive in this batch. Recompose the batch.")
    pass

    D = pairwise_squared_distances(E)
    same = labels[:, None] == labels[None, :]
    not_self = ~torch.eye(N, dtype = torch.bool)
    hardest_positive = _lowest_index_extremum(D, same & not_self, largest = True)
    hardest_negative = _lowest_index_extremum(D, ~same, largest = False)
    hardest_positive = torch.where(keep, hardest_positive, torch.full_like(hardest_positive, -1))
    hardest_negative = torch.where(keep, hardest_negative, torch.full_like(hardest_negative, -1))

    a = anchors
    p = hardest_positive[a]
    n = hardest_negative[a]
    terms  = D[a, p] - D[a, n] + alpha
    active = terms > 0
    loss   = terms[active].sum().item()

    w = active.to(E.dtype)[:, None]
    grad = torch.zeros_like(E)
    grad.index_add_(0, a, 2.0 * w * (E[n] - E[p]))
    grad.index_add_(0, p, 2.0 * w * (E[p] - E[a]))
    grad.index_add_(0, n, 2.0 * w * (E[a] - E[n]))

    return BatchHardResult(
        loss             = loss,
        mean_loss        = loss / len(a),
        grad             = grad,
        anchors          = a,
        hardest_positive = hardest_positive,
        hardest_negative = hardest_negative,
        active_anchors   = int(active.sum().item()),
    )
pass


class Fast_BatchAll(torch.autograd.Function):
    @staticmethod
    def forward(ctx, E, labels, alpha):
        result = batch_all_loss(EmbeddingBatch(E.detach(), labels), alpha)
        ctx.save_for_backward(result.grad)
        return torch.tensor(result.loss, dtype = E.dtype)
    pass

    @staticmethod
    def backward(ctx, dloss):
        grad, = ctx.saved_tensors
        return dloss * grad, None, None
    pass
pass


class Fast_BatchHard(torch.autograd.Function):
    @staticmethod
    def forward(ctx, E, labels, alpha):
        result = batch_hard_loss(EmbeddingBatch(E.detach(), labels), alpha)
        ctx.save_for_backward(result.grad)
        return torch.tensor(result.loss, dtype = E.dtype)
    pass

    @staticmethod
    def backward(ctx, dloss):
        grad, = ctx.saved_tensors
        return dloss * grad, None, None
    pass
pass


# =============================================
# Brute-force references, written as plain loops on purpose
def brute_force_batch_all(E : torch.Tensor, labels, alpha : float):
    labels = [int(y) for y in labels]
    N = len(labels)
    total, count, active = 0.0, 0, 0
    for a, p, n in itertools.product(range(N), repeat = 3):
        if a == p or labels[a] != labels[p] or labels[n] == labels[a]: continue
        term = triplet_term(E[a], E[p], E[n], alpha)
        count  += 1
        active += term > 0
        total  += term
    pass
    return total, count, active
pass


def brute_force_hard_pairs(E : torch.Tensor, labels):
    labels = [int(y) for y in labels]
    N = len(labels)
    D = [[((E[i] - E[j]) ** 2).sum().item() for j in range(N)] for i in range(N)]
    pairs = []
    for a in range(N):
        best_p, best_n = None, None
        for j in range(N):
            if j != a and labels[j] == labels[a]:
                if best_p is None or D[a][j] > D[a][best_p]: best_p = j
            elif labels[j] != labels[a]:
                if best_n is None or D[a][j] < D[a][best_n]: best_n = j
        pass
        pairs.append((best_p, best_n))
    pass
    return pairs
pass


def kink_free_batch(N = 8, d = 4, alpha = 0.2, random_state = 3407, gap = 0.05):
    """
    Random batch in which every valid triplet term is at least gap away from
    the hinge and every batch-hard extremum is unique by at least gap, so
    finite differences with eps = 1e-3 never cross a kink.
    """
    labels = torch.tensor([i % 2 for i in range(N)])
    valid = _valid_triplet_mask(labels)
    same = labels[:, None] == labels[None, :]
    not_self = ~torch.eye(N, dtype = torch.bool)
    seed = random_state
    while True:
        E = random_tensor(N, d, seed = seed, requires_grad = False)
        D = pairwise_squared_distances(E)
        hinge = (D[:, :, None] - D[:, None, :] + alpha)[valid]
        ok = bool((hinge.abs() > gap).all())
        for mask, largest in ((same & not_self, True), (~same, False)):
            values = torch.where(mask, D, torch.full_like(D, float("nan")))
            for row in values:
                row = row[~torch.isnan(row)].sort(descending = largest).values
                if len(row) > 1 and (row[0] - row[1]).abs() <= gap: ok = False
            pass
        pass
        if ok: return E.requires_grad_(True), labels
        seed += 1
    pass
pass
# =============================================


def test_triplet_count():
    for k0 in range(2, 7):
        for k1 in range(2, 7):
            labels = torch.tensor([0] * k0 + [1] * k1)
            assert(len(triplet_indices(labels)) == k0 * k1 * (k0 + k1 - 2))
        pass
    pass
pass


def test_batch_all_oracle(N = 8, d = 4, alpha = 0.2, random_state = 3407):
    E = random_tensor(N, d, seed = random_state, requires_grad = False)
    labels = torch.tensor([i % 2 for i in range(N)])
    result = batch_all_loss(EmbeddingBatch(E, labels), alpha)
    total, count, active = brute_force_batch_all(E, labels, alpha)
    assert(abs(result.loss - total) <= 1e-12 * max(1.0, abs(total)))
    assert(result.num_triplets == count)
    assert(result.active_triplets == active)
pass


def test_batch_hard_oracle(N = 12, d = 4, random_state = 3407):
    E = random_tensor(N, d, seed = random_state, requires_grad = False)
    generator = torch.Generator().manual_seed(random_state)
    labels = torch.tensor([0, 1, 0, 1] + torch.randint(0, 2, (N - 4,), generator = generator).tolist())
    result = batch_hard_loss(EmbeddingBatch(E, labels), 0.2)
    pairs = brute_force_hard_pairs(E, labels)
    for a in range(N):
        assert((result.hardest_positive[a].item(), result.hardest_negative[a].item()) == pairs[a])
    pass
pass


def test_triplet_gradients(alpha = 0.2, random_state = 3407):
    E, labels = kink_free_batch(N = 8, d = 4, alpha = alpha, random_state = random_state)
    assert(run_gradcheck(lambda X: Fast_BatchAll.apply(X, labels, alpha), (E,)))
    assert(run_gradcheck(lambda X: Fast_BatchHard.apply(X, labels, alpha), (E,)))
pass


def testing_suite_triplet_loss():
    test_triplet_count()
    for random_state in range(20):
        test_batch_all_oracle(random_state = random_state)
        test_batch_hard_oracle(random_state = random_state)
        test_triplet_gradients(random_state = random_state)
    pass
pass
