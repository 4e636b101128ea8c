"""Scoring backends and evaluation metrics.

Speaker verification: EER, minimum normalized DCF, and an LDA -> length
normalization -> two-covariance PLDA backend.  Frame representations: DTW
with an angular frame distance and ABX error rates.  Also the per-utterance /
unified reconstruction settings and label-agreement (NMI) for synthetic
oracles.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from . import model as M
from .data import FeatureSequence
from .errors import FormatError

# ---------------------------------------------------------------- detection metrics


def _check_scores(target_scores, nontarget_scores) -> tuple[np.ndarray, np.ndarray]:
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if tar.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one non-target score")
    return tar, non


def operating_points(target_scores, nontarget_scores):
    """``(thresholds, P_fa, P_miss)`` for accept-if-score >= threshold.

    Thresholds are every distinct score in ascending order followed by +inf.
    """
    tar, non = _check_scores(target_scores, nontarget_scores)
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    p_miss = np.searchsorted(tar, thresholds, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return thresholds, p_fa, p_miss


def eer_crossing(p_fa: np.ndarray, p_miss: np.ndarray) -> float:
    """Equal error rate by linear interpolation at the first ``P_miss >= P_fa`` point."""
    d = p_miss - p_fa
    i = int(np.argmax(d >= 0))
    if d[i] == 0 or i == 0:
        return float(p_miss[i])
    fa0, fa1, mi0, mi1 = p_fa[i - 1], p_fa[i], p_miss[i - 1], p_miss[i]
    s = (fa0 - mi0) / ((mi1 - mi0) - (fa1 - fa0))
    return float(mi0 + s * (mi1 - mi0))


def compute_eer(target_scores, nontarget_scores) -> float:
    _, p_fa, p_miss = operating_points(target_scores, nontarget_scores)
    return eer_crossing(p_fa, p_miss)


def compute_mdcf(target_scores, nontarget_scores, p_target: float = 0.01,
                 c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum detection cost over thresholds, normalized by the best trivial system."""
    _, p_fa, p_miss = operating_points(target_scores, nontarget_scores)
    cost = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    return float(np.min(cost) / min(c_miss * p_target, c_fa * (1.0 - p_target)))


# ---------------------------------------------------------------- PLDA backend


@dataclass
class PldaModel:
    """Two-covariance model: class mean ``y ~ N(mu, between)``, ``x | y ~ N(y, within)``."""

    mu: np.ndarray
    between: np.ndarray
    within: np.ndarray
    _q: np.ndarray = field(init=False, repr=False)
    _p: np.ndarray = field(init=False, repr=False)
    _const: float = field(init=False, repr=False)

    def __post_init__(self):
        d = self.mu.size
        total = self.between + self.within
        joint = np.block([[total, self.between], [self.between, total]])
        j_inv = np.linalg.inv(joint)
        self._q = np.linalg.inv(total) - j_inv[:d, :d]
        self._p = -j_inv[:d, d:]
        self._const = -0.5 * np.linalg.slogdet(joint)[1] + np.linalg.slogdet(total)[1]

    def score(self, a, b) -> float:
        """Log-likelihood ratio of same-class versus different-class."""
        return float(self.score_pairs(np.atleast_2d(a), np.atleast_2d(b))[0])

    def score_pairs(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64) - self.mu
        b = np.asarray(b, dtype=np.float64) - self.mu
        qa = np.einsum("ij,jk,ik->i", a, self._q, a)
        qb = np.einsum("ij,jk,ik->i", b, self._q, b)
        cross = np.einsum("ij,jk,ik->i", a, self._p, b)
        return 0.5 * qa + 0.5 * qb + cross + self._const


def _group(x: np.ndarray, labels) -> list[np.ndarray]:
    labels = np.asarray(labels)
    return [x[labels == c] for c in np.unique(labels)]


def fit_two_covariance(x, labels, n_iter: int = 10) -> PldaModel:
    """EM estimate of the two-covariance model, initialized from class scatter."""
    x = np.asarray(x, dtype=np.float64)
    groups = _group(x, labels)
    n, d = x.shape
    counts = np.array([len(g) for g in groups])
    sums = np.stack([g.sum(axis=0) for g in groups])
    means = sums / counts[:, None]
    mu = means.mean(axis=0)
    between = np.cov(means.T, bias=True).reshape(d, d)
    within = sum((g - m).T @ (g - m) for g, m in zip(groups, means)) / n
    second = x.T @ x
    for _ in range(n_iter):
        lb = np.linalg.inv(between)
        lw = np.linalg.inv(within)
        ys = np.empty_like(means)
        acc_yy = np.zeros((d, d))
        acc_w = np.zeros((d, d))
        for count in np.unique(counts):
            idx = np.flatnonzero(counts == count)
            cov = np.linalg.inv(lb + count * lw)
            y = (cov @ (lb @ mu[:, None] + lw @ sums[idx].T)).T
            ys[idx] = y
            yy = len(idx) * cov + y.T @ y
            acc_yy += yy
            acc_w += count * yy - y.T @ sums[idx] - sums[idx].T @ y
        mu = ys.mean(axis=0)
        between = acc_yy / len(groups) - np.outer(mu, mu)
        within = (second + acc_w) / n
        between = 0.5 * (between + between.T)
        within = 0.5 * (within + within.T)
    return PldaModel(mu, between, within)


@dataclass
class BackendModel:
    mean: np.ndarray
    lda: np.ndarray
    plda: PldaModel

    def transform(self, x) -> np.ndarray:
        """Center, project and length-normalize embeddings (rows)."""
        z = (np.atleast_2d(np.asarray(x, dtype=np.float64)) - self.mean) @ self.lda
        return z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)


def fit_lda(x: np.ndarray, labels, out_dim: int, ridge: float = 1e-4) -> np.ndarray:
    """LDA projection (in_dim x out_dim); within-class scatter gets ``ridge * trace / dim`` added."""
    n, d = x.shape
    if out_dim > d:
        raise ValueError(f"LDA output dim {out_dim} exceeds input dim {d}")
    groups = _group(x, labels)
    mean = x.mean(axis=0)
    sw = sum((g - g.mean(axis=0)).T @ (g - g.mean(axis=0)) for g in groups) / n
    sb = sum(len(g) * np.outer(g.mean(axis=0) - mean, g.mean(axis=0) - mean) for g in groups) / n
    tr = np.trace(sw)
    if not tr > 0:
        raise np.linalg.LinAlgError("within-class scatter is singular")
    _, vecs = scipy.linalg.eigh(sb, sw + ridge * tr / d * np.eye(d))
    return vecs[:, ::-1][:, :out_dim]


def backend_fit(embeddings, labels, lda_dim: int = 150, n_iter: int = 10) -> BackendModel:
    """Global mean removal, LDA, length normalization, then two-covariance PLDA."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("backend needs at least two speakers")
    if np.any(counts < 2):
        raise ValueError("every speaker needs at least two embeddings")
    mean = x.mean(axis=0)
    lda = fit_lda(x - mean, labels, lda_dim)
    partial = BackendModel(mean, lda, None)  # type: ignore[arg-type]
    z = partial.transform(x)
    return BackendModel(mean, lda, fit_two_covariance(z, labels, n_iter))


def backend_score(model: BackendModel, enroll_vec, test_vec) -> float:
    return model.plda.score(model.transform(enroll_vec)[0], model.transform(test_vec)[0])


def backend_score_pairs(model: BackendModel, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
    return model.plda.score_pairs(model.transform(enroll), model.transform(test))


def cosine_scores(enroll: np.ndarray, test: np.ndarray, center=None) -> np.ndarray:
    """Row-wise cosine similarity, optionally after subtracting ``center``."""
    a = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
    b = np.atleast_2d(np.asarray(test, dtype=np.float64))
    if center is not None:
        a, b = a - center, b - center
    an = np.maximum(np.linalg.norm(a, axis=1), 1e-12)
    bn = np.maximum(np.linalg.norm(b, axis=1), 1e-12)
    return np.sum(a * b, axis=1) / (an * bn)


# ---------------------------------------------------------------- trials


@dataclass
class TrialSet:
    trials: list[tuple[str, str, bool]]

    def __post_init__(self):
        labels = {t[2] for t in self.trials}
        if labels != {True, False}:
            raise ValueError("trial set needs at least one target and one non-target trial")

    def __len__(self) -> int:
        return len(self.trials)


def make_trials(utt_ids: Sequence[str], classes: Mapping[str, object], n_trials: int,
                seed: int = 0, target_fraction: float = 0.5) -> TrialSet:
    """Random same/different-class pairs of distinct utterances."""
    rng = np.random.default_rng(seed)
    by_class: dict[object, list[str]] = defaultdict(list)
    for u in utt_ids:
        by_class[classes[u]].append(u)
    eligible = [c for c, us in by_class.items() if len(us) >= 2]
    keys = list(by_class)
    if not eligible or len(keys) < 2:
        raise ValueError("need two classes and a class with at least two utterances")
    n_target = int(round(n_trials * target_fraction))
    out = []
    for _ in range(n_target):
        us = by_class[eligible[rng.integers(len(eligible))]]
        i, j = rng.choice(len(us), size=2, replace=False)
        out.append((us[i], us[j], True))
    for _ in range(n_trials - n_target):
        ci, cj = rng.choice(len(keys), size=2, replace=False)
        a, b = by_class[keys[ci]], by_class[keys[cj]]
        out.append((a[rng.integers(len(a))], b[rng.integers(len(b))], False))
    return TrialSet(out)


def score_trials(trials: TrialSet, embeddings: Mapping[str, np.ndarray], backend: BackendModel | None = None,
                 center=None) -> np.ndarray:
    a = np.stack([embeddings[t[0]] for t in trials.trials])
    b = np.stack([embeddings[t[1]] for t in trials.trials])
    if backend is not None:
        return backend_score_pairs(backend, a, b)
    return cosine_scores(a, b, center)


def trial_metrics(trials: TrialSet, scores, p_target: float = 0.01) -> dict[str, float]:
    scores = np.asarray(scores)
    is_target = np.array([t[2] for t in trials.trials])
    return {
        "eer": compute_eer(scores[is_target], scores[~is_target]),
        "mdcf": compute_mdcf(scores[is_target], scores[~is_target], p_target),
    }


def read_trials(path) -> TrialSet:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise FormatError(f"{path}:{n}: expected 'enroll_id test_id target|nontarget'")
        out.append((parts[0], parts[1], parts[2] == "target"))
    return TrialSet(out)


def write_trials(path, trials: TrialSet) -> None:
    lines = [f"{a} {b} {'target' if t else 'nontarget'}" for a, b, t in trials.trials]
    Path(path).write_text("\n".join(lines) + "\n")


def write_scores(path, trials: TrialSet, scores) -> None:
    lines = [f"{a} {b} {s:.10g}" for (a, b, _), s in zip(trials.trials, scores)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_report(path, values: Mapping[str, float]) -> None:
    Path(path).write_text("".join(f"{k}={v:.6g}\n" for k, v in values.items()))


def read_report(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            out[k.strip()] = float(v)
    return out


# ---------------------------------------------------------------- DTW / ABX


def angular_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise ``arccos(cosine) / pi`` between rows of ``a`` and rows of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return np.arccos(np.clip(an @ bn.T, -1.0, 1.0)) / np.pi


def dtw_distance(seq_a, seq_b, frame_metric=angular_distance) -> float:
    """Path-length-normalized DTW with steps (1,0), (0,1), (1,1).

    The alignment minimizing the accumulated frame cost is found by dynamic
    programming; its cost is divided by the number of aligned frame pairs.
    """
    seq_a = np.atleast_2d(np.asarray(seq_a))
    seq_b = np.atleast_2d(np.asarray(seq_b))
    if seq_a.shape[0] == 0 or seq_b.shape[0] == 0:
        raise ValueError("DTW needs non-empty sequences")
    cost = frame_metric(seq_a, seq_b).tolist()
    n, m = len(cost), len(cost[0])
    acc = [[0.0] * m for _ in range(n)]
    length = [[0] * m for _ in range(n)]
    for i in range(n):
        row, prev = acc[i], acc[i - 1] if i else None
        lrow, lprev = length[i], length[i - 1] if i else None
        for j in range(m):
            c = cost[i][j]
            if i == 0 and j == 0:
                row[j], lrow[j] = c, 1
                continue
            best, blen = np.inf, 0
            if i and j and prev[j - 1] < best:
                best, blen = prev[j - 1], lprev[j - 1]
            if i and prev[j] < best:
                best, blen = prev[j], lprev[j]
            if j and row[j - 1] < best:
                best, blen = row[j - 1], lrow[j - 1]
            row[j], lrow[j] = best + c, blen + 1
    return acc[n - 1][m - 1] / length[n - 1][m - 1]


@dataclass
class AbxTask:
    """ABX triples ``(A, B, X, condition)`` with optional item categories."""

    triples: list[tuple[str, str, str, str]]
    categories: dict[str, str] | None = None

    def __post_init__(self):
        for a, b, x, cond in self.triples:
            if self.categories is None:
                continue
            try:
                ca, cb, cx = self.categories[a], self.categories[b], self.categories[x]
            except KeyError as exc:
                raise ValueError(f"triple ({a}, {b}, {x}): unknown item {exc}") from None
            if not (ca == cx and ca != cb):
                raise ValueError(f"triple ({a}, {b}, {x}) needs cat(A) == cat(X) != cat(B)")


def read_abx_task(path, categories_path=None) -> AbxTask:
    triples = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise FormatError(f"{path}:{n}: expected 'A_utt B_utt X_utt condition'")
        triples.append(tuple(parts))
    categories = None
    if categories_path is not None:
        categories = {}
        for line in Path(categories_path).read_text().splitlines():
            parts = line.split()
            if parts:
                categories[parts[0]] = parts[1]
    return AbxTask(triples, categories)


def abx_error_rate(task: AbxTask, representations: Mapping[str, np.ndarray],
                   distance=dtw_distance, table=None) -> dict[str, float]:
    """ABX error per condition.

    A triple scores 1 when X is farther from A than from B, 0.5 on a tie and
    0 otherwise.  Scores are averaged within each (category of A, category
    of B) pair, then the pair averages are averaged with equal weight.
    ``table`` may hold precomputed ``(item, X) -> distance`` entries.
    """
    cache: dict[tuple[str, str], float] = dict(table or {})

    def dist(u, v):
        key = (u, v)
        if key not in cache:
            cache[key] = distance(representations[u], representations[v])
        return cache[key]

    groups: dict[str, dict[tuple, list[float]]] = defaultdict(lambda: defaultdict(list))
    for a, b, x, cond in task.triples:
        dax, dbx = dist(a, x), dist(b, x)
        err = 1.0 if dax > dbx else (0.5 if dax == dbx else 0.0)
        key = (task.categories[a], task.categories[b]) if task.categories else ()
        groups[cond][key].append(err)
    return {cond: float(np.mean([np.mean(v) for v in pairs.values()])) for cond, pairs in groups.items()}


# ---------------------------------------------------------------- reconstruction settings


def reconstruct(params: M.ModelParams, dataset: Sequence[FeatureSequence], setting: str,
                train_corpus: Sequence[FeatureSequence] | None = None) -> list[FeatureSequence]:
    """Decode every utterance from its soft mixture posterior.

    ``per_utt`` conditions on the utterance's own ``mu_omega``; ``unified``
    conditions every utterance on the mean ``mu_omega`` of ``train_corpus``.
    """
    if setting not in ("per_utt", "unified"):
        raise ValueError(f"unknown setting {setting!r}")
    if setting == "unified":
        if not train_corpus:
            raise ValueError("the unified setting needs a non-empty training corpus")
        shared = M.embed_batch(params, [s.frames for s in train_corpus]).mean(axis=0)
        vecs = [shared] * len(dataset)
    else:
        vecs = list(M.embed_batch(params, [s.frames for s in dataset]))
    out = []
    for seq, vec in zip(dataset, vecs):
        pi = M.tokenize_frames(params, seq.frames, "infer").probs
        out.append(seq.replace(M.decode_frames(params, vec, pi, "infer")))
    return out


def class_mean_gap(sequences: Sequence[FeatureSequence], classes: Mapping[str, object]) -> float:
    """Mean pairwise L2 distance between per-class average frames."""
    by_class: dict[object, list[np.ndarray]] = defaultdict(list)
    for s in sequences:
        by_class[classes[s.utt_id]].append(s.frames)
    means = np.stack([np.concatenate(v).mean(axis=0) for v in by_class.values()]).astype(np.float64)
    diffs = means[:, None, :] - means[None, :, :]
    iu = np.triu_indices(len(means), 1)
    return float(np.linalg.norm(diffs, axis=2)[iu].mean())


# ---------------------------------------------------------------- label agreement


def clustering_nmi(labels_a, labels_b) -> float:
    """Normalized mutual information with arithmetic-mean normalization."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label sequences must be 1-D and of equal length")
    if a.size == 0:
        raise ValueError("label sequences must be non-empty")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= a.size
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])))
    ha = float(-np.sum(pa * np.log(pa)))
    hb = float(-np.sum(pb * np.log(pb)))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    return max(0.0, min(1.0, mi / (0.5 * (ha + hb))))
