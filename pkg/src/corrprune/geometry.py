"""Epipolar geometry: Sampson terms, weighted eight-point, poses, metrics, RANSAC.

Conventions: rows are ``(x, y, x', y')`` in normalized image coordinates,
homogeneous points ``t = (x, y, 1)`` and ``t' = (x', y', 1)``, and an
essential matrix satisfies ``t'^T E t = 0`` for inliers.  For a pose
``X2 = R X1 + t`` the essential matrix is ``[t]_x R``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .correspondence import as_coords
from .exceptions import CheiralityError, ContractError, EstimationFailure, UnderConstrainedError

SAMPSON_EPS = 1e-12
DEFAULT_LABEL_THRESHOLD = 1e-4

__all__ = [
    "skew", "essential_from_pose", "constraint_rows", "SampsonTerms", "sampson_terms",
    "sampson_ratio", "regression_loss", "weighted_eight_point", "geometric_labels",
    "pose_candidates", "cheirality_counts", "decompose_essential", "PoseErrorRecord",
    "pose_error", "rotation_angle", "pose_auc", "ransac_eight_point",
]


def skew(v):
    """Cross-product matrix of a 3-vector."""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(R, t):
    """``[t]_x R`` scaled to unit Frobenius norm."""
    E = skew(t) @ np.asarray(R, dtype=np.float64)
    return E / np.linalg.norm(E)


def constraint_rows(coords):
    """Per-row vectors ``chi`` with ``chi . vec(E) = t'^T E t`` (E row-major)."""
    coords = np.asarray(coords)
    x, y, xp, yp = np.moveaxis(coords, -1, 0)
    one = np.ones_like(x)
    return np.stack([xp * x, xp * y, xp, yp * x, yp * y, yp, x, y, one], axis=-1)


def _homogeneous(coords):
    one = np.ones(coords.shape[:-1] + (1,), dtype=coords.dtype)
    return (np.concatenate([coords[..., 0:2], one], axis=-1),
            np.concatenate([coords[..., 2:4], one], axis=-1))


@dataclass
class SampsonTerms:
    numerator: np.ndarray
    denominator: np.ndarray
    ratio: np.ndarray
    clamped: np.ndarray


def _denominator(E, t, tp):
    Et = t @ np.swapaxes(E, -1, -2)
    Etp = tp @ E
    return Et[..., 0] ** 2 + Et[..., 1] ** 2 + Etp[..., 0] ** 2 + Etp[..., 1] ** 2


def sampson_terms(E, corr):
    """Numerator ``(t'^T E t)^2`` and first-order denominator per row.

    Batched when ``E`` is (..., 3, 3) and coords (..., N, 4).  Rows whose
    denominator falls below 1e-12 are clamped and flagged.
    """
    coords = as_coords(corr)
    E = np.asarray(E, dtype=np.float64)
    t, tp = _homogeneous(coords)
    resid = np.einsum("...ni,...ij,...nj->...n", tp, E, t)
    num = resid ** 2
    den = _denominator(E, t, tp)
    clamped = den < SAMPSON_EPS
    return SampsonTerms(num, den, num / np.maximum(den, SAMPSON_EPS), clamped)


def sampson_ratio(E, corr):
    return sampson_terms(E, corr).ratio


def regression_loss(E_hat, E_gt, corr, denominator="groundtruth", row_weights=None):
    """Sum over rows of ``(t'^T E_hat t)^2 / denom``.

    ``denominator="groundtruth"`` takes the first-order denominator from
    ``E_gt``; ``"estimate"`` takes it from ``E_hat``.  Optional
    ``row_weights`` multiply the per-row terms (e.g. a 0/1 inlier mask).
    Differentiable in ``E_hat`` when it is a Tensor; batched over leading axes.
    """
    if denominator not in ("groundtruth", "estimate"):
        raise ContractError(f"unknown denominator {denominator!r}")
    tensor_in = isinstance(E_hat, dm.Tensor)
    E_hat = dm._wrap(E_hat)
    coords = as_coords(corr).astype(E_hat.dtype, copy=False)
    lead = coords.shape[:-2]
    X = constraint_rows(coords)
    e = dm.reshape(E_hat, lead + (9, 1))
    resid = dm.reshape(dm.matmul(X, e), coords.shape[:-1])
    num = resid * resid
    t, tp = _homogeneous(coords)
    if denominator == "groundtruth":
        den = np.maximum(_denominator(np.asarray(E_gt, dtype=coords.dtype), t, tp), SAMPSON_EPS)
    else:
        Et = dm.matmul(t, dm.transpose(E_hat, tuple(range(len(lead))) + (len(lead) + 1, len(lead))))
        Etp = dm.matmul(tp, E_hat)
        sel = np.array([0, 1])
        a = dm.gather(Et, sel, axis=-1)
        b = dm.gather(Etp, sel, axis=-1)
        den = dm.sum(a * a, axis=-1) + dm.sum(b * b, axis=-1) + SAMPSON_EPS
    terms = num / den
    if row_weights is not None:
        terms = terms * np.asarray(row_weights, dtype=coords.dtype).reshape(coords.shape[:-1])
    loss = dm.sum(terms, axis=-1)
    if tensor_in:
        return loss
    value = loss.value
    return float(value) if value.ndim == 0 else value


def weighted_eight_point(corr, weights):
    """Essential matrix from the smallest eigenvector of ``sum_i w_i chi_i chi_i^T``.

    Batched over leading axes.  Differentiable in ``weights`` when it is a
    Tensor.  The result has unit Frobenius norm; its sign puts the
    largest-magnitude entry positive.
    """
    tensor_in = isinstance(weights, dm.Tensor)
    w = dm._wrap(weights)
    coords = as_coords(corr)
    if w.shape != coords.shape[:-1]:
        raise ContractError(f"weights shape {w.shape} does not match rows {coords.shape[:-1]}")
    wv = w.value
    if not np.all(np.isfinite(wv)) or np.any(wv < 0):
        raise ContractError("weights must be finite and non-negative")
    positive = (wv > 0).sum(axis=-1)
    if np.any(positive < 8):
        raise UnderConstrainedError(
            f"need at least 8 positively weighted rows, got {int(np.min(positive))}")
    X = constraint_rows(coords.astype(w.dtype, copy=False))
    lead = coords.shape[:-2]
    Xw = dm.mul(X, dm.reshape(w, w.shape + (1,)))
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    M = dm.matmul(dm.transpose(Xw, perm), X)
    vec, _ = dm.sym_smallest_eigenpair(M)
    E = dm.reshape(vec, lead + (3, 3))
    return E if tensor_in else E.value


def geometric_labels(corr, E_gt, threshold=DEFAULT_LABEL_THRESHOLD):
    """1 where the Sampson ratio under ``E_gt`` is below ``threshold``."""
    return (sampson_ratio(E_gt, corr) < threshold).astype(np.int8)


# ------------------------------------------------------------------- poses

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def pose_candidates(E):
    """The four (R, t) pairs consistent with ``E`` (rank-2 projection implied)."""
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def _depths(R, t, coords):
    t1, t2 = _homogeneous(coords)
    a = t1 @ R.T
    b = -t2
    aa = np.einsum("ni,ni->n", a, a)
    bb = np.einsum("ni,ni->n", b, b)
    ab = np.einsum("ni,ni->n", a, b)
    at = a @ t
    bt = b @ t
    det = aa * bb - ab * ab
    ok = det > 1e-12 * aa * bb
    safe = np.where(ok, det, 1.0)
    lam1 = (-at * bb + bt * ab) / safe
    lam2 = (-bt * aa + at * ab) / safe
    return lam1, lam2, ok


def cheirality_counts(E, corr):
    """Number of rows triangulated in front of both cameras, per candidate."""
    coords = as_coords(corr)
    counts = []
    for R, t in pose_candidates(E):
        lam1, lam2, ok = _depths(R, t, coords)
        counts.append(int(np.sum(ok & (lam1 > 0) & (lam2 > 0))))
    return counts


def decompose_essential(E, corr_inliers):
    """Rotation and unit translation selected by cheirality voting."""
    coords = as_coords(corr_inliers)
    if len(coords) < 1:
        raise ContractError("cheirality voting needs at least one row")
    counts = cheirality_counts(E, coords)
    best = int(np.argmax(counts))
    if counts[best] == 0:
        raise CheiralityError("no pose candidate has points in front of both cameras")
    return pose_candidates(E)[best]


@dataclass(frozen=True)
class PoseErrorRecord:
    rotation: float
    translation: float
    pose: float


def rotation_angle(R):
    """Rotation angle in degrees, stable near 0 and 180."""
    R = np.asarray(R, dtype=np.float64)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arctan2(np.linalg.norm(vee) / 2.0, cos)))


def pose_error(R_hat, t_hat, R_gt, t_gt):
    """Angular rotation error, sign-agnostic translation direction error, max."""
    rot = rotation_angle(np.asarray(R_hat).T @ np.asarray(R_gt))
    a = np.asarray(t_hat, dtype=np.float64)
    b = np.asarray(t_gt, dtype=np.float64)
    if not (np.linalg.norm(a) > 0 and np.linalg.norm(b) > 0):
        raise ContractError("translations must be nonzero")
    trans = float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), abs(a @ b))))
    return PoseErrorRecord(rot, trans, max(rot, trans))


def pose_auc(errors, thresholds=(5.0, 10.0, 20.0)):
    """Normalized area under the cumulative pose-error curve per threshold.

    The recall curve runs through (0, 0) and (e_(k), k/n) for the sorted
    errors and is linear in between, including the segment that crosses the
    threshold.  Failures enter as ``inf``; the segment towards an infinite
    error is flat.
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ContractError("pose_auc needs at least one error")
    if np.any(errors < 0) or np.any(np.isnan(errors)):
        raise ContractError("pose errors must be non-negative")
    errs = np.concatenate([[0.0], np.sort(errors)])
    recall = np.arange(errs.size) / errors.size
    finite = np.isfinite(errs)
    aucs = []
    for thr in thresholds:
        last = int(np.searchsorted(errs, thr, side="left"))
        at_thr = np.interp(thr, errs[finite], recall[finite])
        xs = np.concatenate([errs[:last], [thr]])
        ys = np.concatenate([recall[:last], [at_thr]])
        area = np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0)
        aucs.append(float(area / thr))
    return aucs


# ------------------------------------------------------------------ RANSAC

def _minimal_solutions(X, samples):
    A = X[samples]
    M = np.swapaxes(A, -1, -2) @ A
    _, vecs = np.linalg.eigh(M)
    return vecs[..., :, 0].reshape(-1, 3, 3)


def _sq_distances(coords):
    sq = np.einsum("ni,ni->n", coords, coords)
    d2 = sq[:, None] + sq[None, :] - 2.0 * coords @ coords.T
    np.fill_diagonal(d2, np.inf)
    return d2


class _Sampler:
    """Draws 8-row minimal samples.

    "local" picks a seed row and 7 of its ``local_size`` nearest neighbours in
    the joint 4-D coordinate space.  Inliers sit near a 3-D manifold while
    outliers fill the 4-D box, so small neighbourhoods are inlier-enriched.
    "guided" does the same inside a pool of the densest rows (smallest
    distance to their 4th neighbour), which concentrates inliers further.
    "mixed" picks one of uniform, local and guided per draw.
    """

    KINDS = ("uniform", "local", "guided", "mixed")

    def __init__(self, coords, kind, local_size, pool_size=None):
        if kind not in self.KINDS:
            raise ContractError(f"unknown sampler {kind!r}")
        self.n = len(coords)
        self.kind = kind
        self.size = min(local_size, self.n - 1)
        if kind == "uniform" or self.size < 7:
            self.kind = "uniform"
            return
        d2 = _sq_distances(coords)
        order = np.argsort(d2, axis=1, kind="stable")
        self.local = order[:, :self.size]
        m = pool_size or max(64, self.n // 8)
        m = min(self.n, max(m, self.size + 1))
        density = d2[np.arange(self.n), order[:, min(3, self.n - 2)]]
        self.pool = np.argsort(density, kind="stable")[:m]
        sub = d2[np.ix_(self.pool, self.pool)]
        self.pool_local = self.pool[np.argsort(sub, axis=1, kind="stable")[:, :self.size]]

    def _neighbourhood(self, rng, m, seeds, table):
        picks = np.argsort(rng.random((m, self.size)), axis=1)[:, :7]
        return np.concatenate([seeds[:, None], table[np.arange(m)[:, None], picks]], axis=1)

    def draw(self, rng, m):
        uniform = np.argpartition(rng.random((m, self.n)), 7, axis=1)[:, :8]
        if self.kind == "uniform":
            return uniform
        seeds = rng.integers(self.n, size=m)
        local = self._neighbourhood(rng, m, seeds, self.local[seeds])
        slot = rng.integers(len(self.pool), size=m)
        guided = self._neighbourhood(rng, m, self.pool[slot], self.pool_local[slot])
        if self.kind == "local":
            return local
        if self.kind == "guided":
            return guided
        which = rng.integers(3, size=m)[:, None]
        return np.where(which == 0, uniform, np.where(which == 1, local, guided))


def _fit_rows(X, mask):
    A = X[mask]
    _, vecs = np.linalg.eigh(A.T @ A)
    return vecs[:, 0].reshape(3, 3)


def _count_inliers(Es, t, tp, threshold):
    resid = np.einsum("ni,mij,nj->mn", tp, Es, t)
    den = np.maximum(_denominator(Es, t, tp), SAMPSON_EPS)
    return (resid ** 2 / den < threshold).sum(axis=1)


def _inner_samples(E, count, X, coords, threshold, rng, draws=64, widen=4.0, rounds=4):
    """Minimal samples redrawn from the consensus set of the current best model.

    A wrong model that shares most of its consensus with the true one is
    escaped once a draw contains only true inliers; each gain restarts the
    draws from the new consensus set.
    """
    t, tp = _homogeneous(coords)
    for _ in range(rounds):
        pool = np.flatnonzero(sampson_ratio(E, coords) < threshold * widen)
        if len(pool) < 9:
            break
        picks = np.argpartition(rng.random((draws, len(pool))), 7, axis=1)[:, :8]
        Es = _minimal_solutions(X, pool[picks])
        counts = _count_inliers(Es, t, tp, threshold)
        i = int(np.argmax(counts))
        if counts[i] <= count:
            break
        count, E = _refine(Es[i], int(counts[i]), X, coords, threshold)
    return count, E


def _refine(E, count, X, coords, threshold, rounds=8, widen=16.0, polish=20):
    """Iterated least-squares refits on the consensus set.

    The consensus threshold shrinks geometrically from ``widen * threshold``
    to ``threshold``; refits then repeat at the final threshold until the
    inlier count stops growing.  A refit is kept only if it gains inliers.
    """
    schedule = [widen ** (1.0 - r / max(rounds - 1, 1)) for r in range(rounds)]
    schedule += [1.0] * polish
    stalled = 0
    for scale in schedule:
        mask = sampson_ratio(E, coords) < threshold * scale
        if mask.sum() < 8:
            break
        cand = _fit_rows(X, mask)
        c = int((sampson_ratio(cand, coords) < threshold).sum())
        if c > count:
            E, count = cand, c
        elif scale == 1.0:
            stalled += 1
            if stalled >= 2:
                break
    return count, E


def ransac_eight_point(corr, iterations=2000, threshold=DEFAULT_LABEL_THRESHOLD, seed=0,
                       sampler="mixed", local_size=10, local_refine=True, chunk=256):
    """Robust essential matrix by hypothesize-and-verify over 8-row samples.

    ``sampler``: "uniform" draws rows uniformly; "local" draws a seed row and
    seven of its ``local_size`` nearest neighbours in the joint 4-D
    coordinate space; "mixed" alternates per iteration at random.  The best
    model by Sampson inlier count is refit on its consensus set with uniform
    weights.  With ``local_refine`` every new best hypothesis is polished by
    iterated least-squares refits on its (progressively tightened) consensus
    set and by minimal samples redrawn from that set before the search
    continues.  Returns ``(E, mask)``; raises
    :class:`EstimationFailure` when no hypothesis reaches eight inliers.
    """
    coords = as_coords(corr)
    n = len(coords)
    if n < 8:
        raise ContractError("RANSAC needs at least 8 rows")
    if iterations < 1:
        raise ContractError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    X = constraint_rows(coords)
    t, tp = _homogeneous(coords)
    draw = _Sampler(coords, sampler, local_size).draw

    best_count, best_E = -1, None
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        done += m
        samples = draw(rng, m)
        Es = _minimal_solutions(X, samples)
        counts = _count_inliers(Es, t, tp, threshold)
        i = int(np.argmax(counts))
        if counts[i] > best_count:
            best_count, best_E = int(counts[i]), Es[i]
            if local_refine:
                best_count, best_E = _refine(best_E, best_count, X, coords, threshold)
                best_count, best_E = _inner_samples(best_E, best_count, X, coords, threshold,
                                                    rng)

    if best_count < 8:
        raise EstimationFailure(f"best hypothesis has only {best_count} inliers")
    mask = sampson_ratio(best_E, coords) < threshold
    E = weighted_eight_point(coords[mask], np.ones(int(mask.sum())))
    refit_mask = sampson_ratio(E, coords) < threshold
    if refit_mask.sum() >= 8:
        mask = refit_mask
    else:
        E = best_E / np.linalg.norm(best_E)
    return E, mask
