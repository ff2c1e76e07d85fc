"""Loss, optimizer, epoch loop with best-validation checkpointing, and the
patient-disjoint fold protocol.

The loss is the smoothed negative Dice coefficient
    L = -(2*sum(p*g) + 1) / (sum(p) + sum(g) + 1)
over all voxels of one study; the +1 terms avoid division by zero and give a
perfect score to a correct empty segmentation. Optimization is RMSprop with
learning rate 1e-4 (rho=0.9, eps=1e-7 are our pinned defaults, recorded in
the run config).
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import unet
from .errors import NumericError


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def smoothed_dice_loss(p, g):
    """Smoothed negative Dice of a probability map against a binary mask.

    Returns (loss, grad wrt p). Sums are accumulated in float64 so the
    perfect-overlap cases come out exactly -1.0.
    """
    if p.shape != g.shape:
        raise ValueError(f"probability shape {p.shape} != mask shape {g.shape}")
    gf = g.astype(np.float64, copy=False)
    pf = p.astype(np.float64, copy=False)
    inter = float((pf * gf).sum())
    num = 2.0 * inter + 1.0
    den = float(pf.sum()) + float(gf.sum()) + 1.0
    loss = -num / den
    grad = ((num - 2.0 * gf * den) / den ** 2).astype(p.dtype)
    return loss, grad


# ---------------------------------------------------------------------------
# RMSprop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RmspropParams:
    lr: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-7

    def to_dict(self):
        return {"lr": self.lr, "rho": self.rho, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def rmsprop_update(w, g, v, hyper):
    """One element-wise RMSprop step: returns (new_w, new_v)."""
    v_new = hyper.rho * v + (1.0 - hyper.rho) * g * g
    w_new = w - hyper.lr * g / (np.sqrt(v_new) + hyper.eps)
    return w_new.astype(w.dtype, copy=False), v_new.astype(v.dtype, copy=False)


def rmsprop_step(store, grads, hyper):
    """Apply RMSprop to every parameter of the store (accumulators live in
    store.opt, created on first use). Single writer over the store."""
    for name, w in store.params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{w.shape} for {name!r}")
        v = store.opt.get(name)
        if v is None:
            v = np.zeros_like(w)
        w_new, v_new = rmsprop_update(w, g, v, hyper)
        store.params[name] = w_new
        store.opt[name] = v_new
    return store


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class TrainStudy(NamedTuple):
    study_id: str
    image: np.ndarray   # [X, Y, Z] raw intensities
    mask: np.ndarray    # [X, Y, Z] binary


class EpochStats(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float


def _prepare(study, config):
    """Normalize, pad to the pooling grid and lift to network layout."""
    img, _ = unet.pad_to_grid(unet.normalize_intensities(study.image, config),
                              config.levels)
    mask, _ = unet.pad_to_grid(np.ascontiguousarray(study.mask, dtype=np.uint8),
                               config.levels)
    return img[None, None], mask[None]


def validation_loss(weights, config, studies):
    """Mean smoothed-Dice loss over studies, infer-mode forward, fixed order."""
    losses = []
    for study in studies:
        img, mask = _prepare(study, config)
        prob = unet.forward(weights, config, img, mode="infer")
        loss, _ = smoothed_dice_loss(prob[:, 1], mask)
        losses.append(loss)
    return float(np.mean(losses))


def train(config, weights, train_set, val_set, epochs, seed,
          hyper=RmspropParams(), progress=None):
    """Epoch loop; returns (weights snapshot with minimal validation loss,
    per-epoch history). Fully deterministic given the seed: the shuffle and
    dropout streams both derive from it. Ties on the validation loss keep
    the earlier epoch.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must both be non-empty")
    history = []
    if epochs == 0:
        return weights.copy(), history

    seeds = np.random.SeedSequence(seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])

    best = None
    best_loss = np.inf
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(train_set))
        step_losses = []
        for idx in order:
            study = train_set[idx]
            img, mask = _prepare(study, config)
            drop_seed = int(dropout_rng.integers(0, 2 ** 63 - 1))
            prob, tape = unet.forward_train(weights, config, img, seed=drop_seed)
            loss, grad_p = smoothed_dice_loss(prob[:, 1], mask)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch} on study "
                    f"{study.study_id!r}")
            grad_prob = np.zeros_like(prob)
            grad_prob[:, 1] = grad_p
            grads = unet.backward(weights, config, tape, grad_prob)
            rmsprop_step(weights, grads, hyper)
            step_losses.append(loss)
        val = validation_loss(weights, config, val_set)
        if not np.isfinite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochStats(epoch, float(np.mean(step_losses)), val))
        if val < best_loss:
            best_loss = val
            best = weights.copy()
        if progress is not None:
            progress(history[-1])
    return best, history


# ---------------------------------------------------------------------------
# Fold protocol
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    assignment: dict   # study_id -> fold index
    patients: dict     # study_id -> patient_id

    def studies_in(self, fold):
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def fold_sizes(self):
        sizes = [0] * self.k
        for f in self.assignment.values():
            sizes[f] += 1
        return sizes

    def roles(self, n):
        return fold_roles(n, self.k)


def make_folds(studies, k, seed):
    """Patient-disjoint fold assignment with balanced study counts.

    studies is a list of (study_id, patient_id). Patients are shuffled
    deterministically, ordered by descending study count, and dealt greedily
    to the currently smallest fold, which keeps per-fold study counts within
    one of each other for the corpora used here (all studies of a patient
    land together, so exact balance is impossible in general).
    """
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    by_patient = {}
    for study_id, patient_id in studies:
        by_patient.setdefault(patient_id, []).append(study_id)
    if len(by_patient) < k:
        raise ValueError(
            f"need at least {k} distinct patients for {k} folds, "
            f"got {len(by_patient)}")
    patients = sorted(by_patient)
    rng = np.random.default_rng(seed)
    shuffled = [patients[i] for i in rng.permutation(len(patients))]
    ordered = sorted(shuffled, key=lambda p: -len(by_patient[p]))

    sizes = [0] * k
    assignment = {}
    for patient in ordered:
        fold = int(np.argmin(sizes))
        for study_id in by_patient[patient]:
            assignment[study_id] = fold
        sizes[fold] += len(by_patient[patient])
    return FoldPlan(k=k, assignment=assignment,
                    patients=dict(studies))


def fold_roles(n, k=5):
    """Rotation n: folds {n, n+1, ..., n+k-3} mod k train, n+k-2 validation,
    n+k-1 test. For k=5 that is {n, n+1, n+2} train, n+3 val, n+4 test."""
    if k < 3:
        raise ValueError(f"fold roles need k >= 3, got {k}")
    if not 0 <= n < k:
        raise ValueError(f"rotation must be in [0, {k}), got {n}")
    train = tuple(sorted((n + j) % k for j in range(k - 2)))
    val = (n + k - 2) % k
    test = (n + k - 1) % k
    return train, val, test
