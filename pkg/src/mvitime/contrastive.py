"""Cosine similarity, the NT-Xent objective and cross-subject features."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .augment import AugmentConfig, interleaved_pairing, view_batch
from .errors import (
    InvalidPairing,
    MissingStage,
    NonPositiveTemperature,
    RankDeficient,
    ZeroNorm,
)
from .ingest import STAGE_ORDER, EpochDataset, SleepStage


def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ZeroNorm("cosine similarity of a zero vector")
    return float(x @ y / (nx * ny))


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ZeroNorm(f"row {bad[0]} has zero norm", row=int(bad[0]))
    return v / norms[:, None]


def similarity_matrix(vectors) -> np.ndarray:
    u = _unit_rows(np.asarray(vectors, dtype=np.float64))
    s = u @ u.T
    np.fill_diagonal(s, 1.0)
    return s


def check_pairing(pairing, size: int | None = None) -> np.ndarray:
    p = np.asarray(pairing, dtype=np.int64)
    n = len(p)
    if size is not None and n != size:
        raise InvalidPairing(f"pairing has {n} entries, batch has {size} rows")
    if n < 2 or n % 2:
        raise InvalidPairing(f"pairing needs an even number >= 2 of rows, got {n}")
    if p.min() < 0 or p.max() >= n:
        raise InvalidPairing("pairing index out of range")
    idx = np.arange(n)
    if np.any(p == idx):
        raise InvalidPairing("pairing has a fixed point")
    if np.any(p[p] != idx):
        raise InvalidPairing("pairing is not an involution")
    return p


def positive_target(pairing, size: int | None = None) -> np.ndarray:
    """Binary matrix with a single 1 per row at the positive partner."""
    p = check_pairing(pairing, size)
    g = np.zeros((len(p), len(p)), dtype=np.int64)
    g[np.arange(len(p)), p] = 1
    return g


# ---- NT-Xent ----------------------------------------------------------------------

def _nt_xent_parts(v: torch.Tensor, pairing: torch.Tensor, tau: float):
    norms = v.norm(dim=1, keepdim=True)
    if torch.any(norms == 0):
        row = int(torch.nonzero(norms[:, 0] == 0)[0])
        raise ZeroNorm(f"row {row} has zero norm", row=row)
    u = v / norms
    z = (u @ u.T) / tau
    eye = torch.eye(len(v), dtype=torch.bool, device=v.device)
    z = z.masked_fill(eye, float("-inf"))
    log_norm = torch.logsumexp(z, dim=1)
    rows = torch.arange(len(v), device=v.device)
    loss = (log_norm - z[rows, pairing]).mean()
    probs = torch.exp(z - log_norm[:, None])
    return loss, u, norms, probs


def _nt_xent_grad(u, norms, probs, pairing, tau):
    n = len(u)
    dz = probs.clone()
    dz[torch.arange(n), pairing] -= 1.0
    ds = dz / (n * tau)
    du = (ds + ds.T) @ u
    return (du - u * (u * du).sum(dim=1, keepdim=True)) / norms


class NTXent(torch.autograd.Function):
    """NT-Xent with an explicit backward pass (self-terms excluded)."""

    @staticmethod
    def forward(ctx, vectors, pairing, temperature):
        loss, u, norms, probs = _nt_xent_parts(vectors, pairing, temperature)
        ctx.save_for_backward(u, norms, probs, pairing)
        ctx.temperature = temperature
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        u, norms, probs, pairing = ctx.saved_tensors
        grad = _nt_xent_grad(u, norms, probs, pairing, ctx.temperature)
        return grad_out * grad, None, None


def _validate_loss_inputs(n_rows: int, temperature: float):
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    if n_rows < 4:
        raise InvalidPairing(f"NT-Xent needs at least 4 rows, got {n_rows}")


def nt_xent(vectors: torch.Tensor, pairing, temperature: float = 0.5) -> torch.Tensor:
    """Differentiable loss for training; ``pairing`` defaults to interleaved."""
    _validate_loss_inputs(len(vectors), temperature)
    if pairing is None:
        pairing = interleaved_pairing(len(vectors) // 2)
    p = torch.as_tensor(check_pairing(pairing, len(vectors)), device=vectors.device)
    return NTXent.apply(vectors, p, float(temperature))


def nt_xent_loss(vectors, pairing, temperature: float = 0.5):
    """Loss and its gradient with respect to ``vectors`` (float64 numpy)."""
    v = np.asarray(vectors, dtype=np.float64)
    _validate_loss_inputs(len(v), temperature)
    p = torch.as_tensor(check_pairing(pairing, len(v)))
    with torch.no_grad():
        vt = torch.as_tensor(v)
        loss, u, norms, probs = _nt_xent_parts(vt, p, float(temperature))
        grad = _nt_xent_grad(u, norms, probs, p, float(temperature))
    return float(loss), grad.numpy()


# ---- PCA ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PCABasis:
    mean: np.ndarray
    components: np.ndarray  # p x k, orthonormal columns
    explained_variance: np.ndarray
    rank_deficient: bool = False
    source_subjects: tuple = ()

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.components.T + self.mean

    @classmethod
    def identity(cls, p: int) -> "PCABasis":
        return cls(np.zeros(p), np.eye(p), np.ones(p))


def pca_fit(x, k: int, rtol: float = 1e-10, source_subjects=()) -> PCABasis:
    """Top-k principal axes of the rows of ``x`` via SVD of the centred matrix.

    If fewer than ``k`` components carry variance, the available ones are
    returned and the basis is flagged ``rank_deficient``.
    """
    x = np.asarray(x, dtype=np.float64)
    m, p = x.shape
    if m < 2 or not 1 <= k <= min(m, p):
        raise ValueError(f"need m >= 2 and 1 <= k <= min(m, p); got m={m}, p={p}, k={k}")
    mean = x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x - mean, full_matrices=False)
    tol = rtol * (sv[0] if sv.size else 0.0) * max(m, p)
    rank = int(np.sum(sv > tol))
    deficient = rank < k
    if deficient:
        if rank == 0:
            raise RankDeficient("data has no variance")
        warnings.warn(f"requested {k} components, numerical rank is {rank}", stacklevel=2)
        k = rank
    comps = vt[:k].T.copy()
    # Deterministic sign: largest-magnitude loading of each axis is positive.
    lead = np.argmax(np.abs(comps), axis=0)
    comps *= np.sign(comps[lead, np.arange(k)])
    var = sv[:k] ** 2 / (m - 1)
    return PCABasis(mean, comps, var, deficient, tuple(source_subjects))


# ---- cross-subject features --------------------------------------------------------

@dataclass(frozen=True)
class SubjectFeature:
    subject_id: str
    vector: np.ndarray = field(repr=False)


def stage_representatives(data: EpochDataset, subject_id: str) -> dict[SleepStage, np.ndarray]:
    """First epoch (in temporal order) of every stage the subject has."""
    idx = np.flatnonzero(data.subjects == subject_id)
    idx = idx[np.lexsort((data.start_s[idx], data.recordings[idx]))]
    found = {}
    for i in idx:
        stage = SleepStage(int(data.y[i]))
        if stage not in found:
            found[stage] = data.x[i]
    return found


def stage_matrix(epochs_by_stage: Mapping, subject_id: str = "") -> np.ndarray:
    """L x 5 matrix whose columns are the W, S1, S2, S3, REM epochs."""
    missing = [s.name for s in STAGE_ORDER if s not in epochs_by_stage]
    if missing:
        raise MissingStage(
            f"subject {subject_id or '?'} lacks stages {missing}", subjects=[subject_id]
        )
    cols = [np.asarray(getattr(epochs_by_stage[s], "samples", epochs_by_stage[s]), dtype=np.float64)
            for s in STAGE_ORDER]
    return np.stack(cols, axis=1)


def fit_stage_pca(stage_matrices: Sequence[np.ndarray], k: int = 1, subjects=()) -> PCABasis:
    """PCA over the five stage channels, pooled across training subjects' samples."""
    return pca_fit(np.concatenate(stage_matrices, axis=0), k, source_subjects=subjects)


def subject_feature(epochs_by_stage: Mapping, pca_basis: PCABasis, subject_id: str = "") -> SubjectFeature:
    """Project a subject's five stage epochs onto ``pca_basis``.

    The L x 5 stage matrix is reduced along its stage axis; the k projected
    signals are laid end to end (component-major), so one component yields a
    single 30-s-long feature and the identity basis gives the plain
    W|S1|S2|S3|REM concatenation.
    """
    m = stage_matrix(epochs_by_stage, subject_id)
    z = pca_basis.transform(m)
    return SubjectFeature(subject_id, z.T.reshape(-1))


def subject_features(data: EpochDataset, subjects=None, k: int = 1, basis: PCABasis | None = None):
    """Fit the stage PCA on ``subjects`` (training only) and build their features."""
    subjects = list(subjects) if subjects is not None else data.subject_ids()
    reps = {s: stage_representatives(data, s) for s in subjects}
    missing = [s for s, r in reps.items() if len(r) < len(STAGE_ORDER)]
    if missing:
        raise MissingStage(f"subjects lacking at least one stage: {missing}", subjects=missing)
    mats = {s: stage_matrix(r, s) for s, r in reps.items()}
    if basis is None:
        basis = fit_stage_pca(list(mats.values()), k, subjects)
    feats = [SubjectFeature(s, basis.transform(m).T.reshape(-1)) for s, m in mats.items()]
    return feats, basis


def build_cross_subject_batch(features: Sequence[SubjectFeature], config: AugmentConfig,
                              rng: np.random.Generator):
    """Crop/permute views of each subject feature, partners paired by subject."""
    if len(features) < 2:
        raise MissingStage("cross-subject contrast needs at least two subjects")
    dims = {len(f.vector) for f in features}
    if len(dims) != 1:
        raise ValueError(f"subject features differ in length: {sorted(dims)}")
    stacked = np.stack([f.vector for f in features])
    return view_batch(stacked, config, rng)


def uniform_loss(n_rows: int) -> float:
    """NT-Xent value when every similarity is equal."""
    return math.log(n_rows - 1)
