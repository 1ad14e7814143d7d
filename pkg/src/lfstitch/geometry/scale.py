"""Depth clustering of feature displacements and similarity-based scale.

Scale is always measured on the farthest-depth cluster, the features with
the least parallax, since distant structure is least affected by the
translation between cameras.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import LightField
from ..errors import DegenerateGeometryError, EstimationError, InsufficientFeaturesError
from ..features import CorrespondenceSet, match_pair

MAX_K = 5
GMM_RESTARTS = 20
GMM_ITERS = 200
GMM_TOL = 1e-8
VAR_FLOOR = 0.05**2
SILHOUETTE_MIN = 0.5
MIN_CLUSTER_MATCHES = 10
MIN_PAIR_FRACTION = 0.25
MIN_CLUSTER_FRACTION = 0.1
REFINE_ITERS = 3


@dataclass
class DepthClustering:
    centroids: np.ndarray  # sorted ascending, px
    labels: np.ndarray
    chosen_k: int
    silhouette: float = float("nan")

    @property
    def farthest(self) -> int:
        """Label of the smallest-displacement cluster with real support.

        Clusters holding under ``MIN_CLUSTER_FRACTION`` of the features (and
        fewer than 3) are stray tracks, not a depth layer, and are skipped.
        """
        counts = np.bincount(self.labels, minlength=len(self.centroids))
        need = max(3, math.ceil(MIN_CLUSTER_FRACTION * len(self.labels)))
        for k in np.argsort(self.centroids, kind="stable"):
            if counts[k] >= need:
                return int(k)
        return int(np.argmax(counts))


@dataclass
class SimilarityTransform:
    scale: float
    rotation2d: float
    translation: np.ndarray
    residual_rms: float = 0.0
    n_points: int = 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.rotation2d), math.sin(self.rotation2d)
        R = np.array([[c, -s], [s, c]])
        return self.scale * np.asarray(x, float) @ R.T + self.translation


# --- 1-D Gaussian mixtures ---------------------------------------------------


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        tot = d2.sum()
        if tot <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / tot)])
    return np.array(centers)


def fit_gmm_1d(x: np.ndarray, k: int, restarts: int = GMM_RESTARTS, seed: int = 0):
    """EM for a 1-D ``k``-component mixture; best of ``restarts`` by likelihood.

    Returns ``(means, variances, weights, log_likelihood)``. All restarts run
    as one batch.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    rng = np.random.default_rng(seed)
    mu = np.stack([_kmeanspp(x, k, rng) for _ in range(restarts)])  # (R, k)
    # a few Lloyd steps finish the k-means initialization
    for _ in range(10):
        lab = np.argmin(np.abs(x[None, :, None] - mu[:, None, :]), axis=2)
        onehot = lab[:, :, None] == np.arange(k)[None, None, :]
        cnt = onehot.sum(1)
        mu = np.where(cnt > 0, (onehot * x[None, :, None]).sum(1) / np.maximum(cnt, 1), mu)
    # restarts whose k-means partitions coincide would run identical EM
    mu = np.unique(np.sort(mu, axis=1), axis=0)
    restarts = len(mu)
    # centred data keeps the moment-based variance update well conditioned
    x0 = x.mean()
    xc = x - x0
    xc2 = xc * xc
    mu = mu - x0
    var = np.full((restarts, k), max(x.var(), VAR_FLOOR))
    w = np.full((restarts, k), 1.0 / k)
    ll = np.full(restarts, -np.inf)
    active = np.arange(restarts)
    it = 0
    for _ in range(GMM_ITERS):
        m_, v_, w_ = mu[active], var[active], w[active]
        prec = 1.0 / v_
        c = np.log(np.maximum(w_, 1e-300)) - 0.5 * np.log(2 * np.pi * v_) - 0.5 * m_ * m_ * prec
        logp = (m_ * prec)[:, :, None] * xc + (-0.5 * prec)[:, :, None] * xc2 + c[:, :, None]  # (R, k, n)
        mx = logp.max(axis=1, keepdims=True)
        e = np.exp(logp - mx)
        tot = e.sum(axis=1, keepdims=True)
        new_ll = (mx + np.log(tot))[:, 0, :].sum(axis=1)
        resp = e / tot
        nk = resp.sum(axis=2) + 1e-300
        m_new = (resp @ xc) / nk
        mu[active] = m_new
        var[active] = np.maximum((resp @ xc2) / nk - m_new**2, VAR_FLOOR)
        w[active] = nk / n
        done = np.abs(new_ll - ll[active]) <= GMM_TOL * np.maximum(np.abs(new_ll), 1.0)
        ll[active] = new_ll
        active = active[~done]
        if active.size == 0:
            break
        it += 1
        if it % 10 == 0 and active.size > 1:
            # restarts that reached the same parameters follow the same path
            key = np.round(np.hstack([mu[active], var[active], w[active]]), 10)
            _, first = np.unique(key, axis=0, return_index=True)
            drop = np.setdiff1d(np.arange(active.size), first)
            ll[active[drop]] = -np.inf
            active = active[np.sort(first)]
    mu = mu + x0
    b = int(np.argmax(ll))
    order = np.argsort(mu[b])
    return mu[b][order], var[b][order], w[b][order], float(ll[b])


def silhouette_score(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette of a 1-D hard clustering; singletons score 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        return float("nan")
    D = np.abs(x[:, None] - x[None, :])
    onehot = labels[:, None] == uniq[None, :]
    sums = D @ onehot
    counts = onehot.sum(0)
    own = np.searchsorted(uniq, labels)
    own_n = counts[own]
    a = sums[np.arange(len(x)), own] / np.maximum(own_n - 1, 1)
    other = sums / counts[None, :]
    other[np.arange(len(x)), own] = np.inf
    b = other.min(axis=1)
    s = np.where(own_n > 1, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
    return float(s.mean())


def cluster_values(x: np.ndarray, max_k: int = MAX_K, seed: int = 0) -> DepthClustering:
    x = np.asarray(x, dtype=np.float64)
    best_k, best_s, best_mu = 1, -np.inf, np.array([x.mean()])
    for k in range(2, max_k + 1):
        if len(np.unique(x)) < k:
            break
        mu, var, w, _ = fit_gmm_1d(x, k, seed=seed + k)
        logp = -0.5 * ((x[:, None] - mu) ** 2 / var + np.log(var)) + np.log(np.maximum(w, 1e-300))
        hard = np.argmax(logp, axis=1)
        s = silhouette_score(x, hard)
        if np.isfinite(s) and s > best_s:
            best_k, best_s, best_mu = k, s, mu
    if best_s < SILHOUETTE_MIN:
        best_k, best_mu = 1, np.array([x.mean()])
    labels = np.argmin(np.abs(x[:, None] - best_mu[None, :]), axis=1)
    # drop centroids that attract no point so labels stay contiguous
    used = np.unique(labels)
    mu = best_mu[used]
    labels = np.searchsorted(used, labels)
    return DepthClustering(mu, labels, len(mu), best_s if best_k > 1 else float("nan"))


def cluster_depths(matches: CorrespondenceSet, seed: int = 0) -> DepthClustering:
    """Cluster features by displacement magnitude ``|q - p|``."""
    if len(matches) < MIN_CLUSTER_MATCHES:
        raise InsufficientFeaturesError(
            f"depth clustering needs {MIN_CLUSTER_MATCHES} correspondences, got {len(matches)}"
        )
    return cluster_values(np.linalg.norm(matches.q - matches.p, axis=1), seed=seed)


# --- similarity ----------------------------------------------------------------


def estimate_similarity(matches: CorrespondenceSet, center=None) -> SimilarityTransform:
    """Least-squares ``q = s R p + t`` (Umeyama); coordinates relative to ``center``."""
    p, q = matches.p, matches.q
    if len(p) < 3:
        raise InsufficientFeaturesError(f"similarity needs 3 correspondences, got {len(p)}")
    if center is not None:
        c = np.asarray(center, dtype=np.float64)
        p, q = p - c, q - c
    mp, mq = p.mean(0), q.mean(0)
    P, Q = p - mp, q - mq
    if np.ptp(p, axis=0).max() < 2.0:
        raise DegenerateGeometryError("similarity points span less than 2 px")
    var_p = (P**2).sum() / len(p)
    C = Q.T @ P / len(p)
    U, d, Vt = np.linalg.svd(C)
    D = np.diag([1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    s = float(np.trace(np.diag(d) @ D) / var_p)
    t = mq - s * R @ mp
    resid = q - (s * p @ R.T + t)
    rms = float(np.sqrt((resid**2).sum(1).mean()))
    return SimilarityTransform(s, float(math.atan2(R[1, 0], R[0, 0])), t, rms, len(p))


def similarity_residuals(sim: SimilarityTransform, matches: CorrespondenceSet, center=None) -> np.ndarray:
    c = np.zeros(2) if center is None else np.asarray(center, dtype=np.float64)
    return np.linalg.norm(matches.q - (sim.apply(matches.p - c) + c), axis=1)


def farthest_similarity(
    img1, img2, center=None, seed: int = 0, matches: CorrespondenceSet | None = None, refine: int = REFINE_ITERS
):
    """Similarity on the farthest-depth cluster of the tracked features.

    Raw displacement magnitudes mix parallax with the radial motion of a
    scale change, so after the first fit the features are re-clustered on
    their residual to it: the far layer then sits at zero and every other
    layer keeps only its parallax relative to it.
    """
    m = matches if matches is not None else match_pair(img1, img2)
    cl = cluster_depths(m, seed=seed)
    mask = cl.labels == cl.farthest
    sim = estimate_similarity(m.subset(mask), center)
    for _ in range(refine):
        rc = cluster_values(similarity_residuals(sim, m, center), seed=seed)
        new = rc.labels == rc.farthest
        if np.array_equal(new, mask) or new.sum() < 3:
            break
        try:
            sim = estimate_similarity(m.subset(new), center)
        except EstimationError:
            break
        mask, cl = new, rc
    return sim, cl, m


def _geomean(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.exp(np.log(v).mean()))


def consecutive_pairs(lf: LightField) -> dict[str, list]:
    S, T = lf.n_s, lf.n_t
    return {
        "s": [((s, t), (s + 1, t)) for t in range(T) for s in range(S - 1)],
        "t": [((s, t), (s, t + 1)) for s in range(S) for t in range(T - 1)],
    }


@dataclass
class WithinScale:
    scale: float
    per_axis: dict
    pair_scales: dict
    n_pairs: int
    n_ok: int


def estimate_scale_within_axes(lf: LightField, seed: int = 0) -> WithinScale:
    """Per-step scale between consecutive views, per angular axis and overall."""
    pairs = consecutive_pairs(lf)
    total = sum(len(v) for v in pairs.values())
    if total == 0:
        raise InsufficientFeaturesError("light field has a single view; no consecutive pairs")
    center = lf.intrinsics.principal_point
    found = {"s": [], "t": []}
    for axis, plist in pairs.items():
        for a, b in plist:
            try:
                sim, _, _ = farthest_similarity(lf.view(*a), lf.view(*b), center, seed)
            except EstimationError:
                continue
            found[axis].append(sim.scale)
    n_ok = len(found["s"]) + len(found["t"])
    if n_ok < MIN_PAIR_FRACTION * total:
        raise InsufficientFeaturesError(f"only {n_ok}/{total} view pairs gave a scale estimate")
    per_axis = {k: (_geomean(v) if v else 1.0) for k, v in found.items()}
    return WithinScale(_geomean(found["s"] + found["t"]), per_axis, found, total, n_ok)


def estimate_scale_within(lf: LightField, seed: int = 0) -> float:
    """Geometric mean of per-pair scales over all consecutive view pairs."""
    return estimate_scale_within_axes(lf, seed).scale


def scale_between_views(img_ref: np.ndarray, img: np.ndarray, center, seed: int = 0) -> float:
    sim, _, _ = farthest_similarity(img_ref, img, center, seed)
    return sim.scale


def estimate_scale_between(lf_ref: LightField, lf2: LightField, seed: int = 0) -> float:
    """Scale of ``lf2``'s middle view relative to the reference's middle view."""
    return scale_between_views(lf_ref.middle_view(), lf2.middle_view(), lf_ref.intrinsics.principal_point, seed)
