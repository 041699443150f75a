"""Open-set evaluation: 10-fold pair verification and rank-1 identification.

All decisions are cosine-based and therefore invariant to positive rescaling
of the embeddings. Tie-breaking is fixed: nearest-neighbor ties go to the
lowest sample index, and identification ties count against the mate
(competitor-first), so results are reproducible to the bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError

AGE_GAP_BUCKETS = ("low", "mid", "high")  # thirds of the [0, 1] gap range


@dataclass(frozen=True)
class VerificationPair:
    sample_a: int
    sample_b: int
    same: bool
    age_gap: float

    def __post_init__(self):
        if self.sample_a == self.sample_b:
            raise ConfigError("a pair must reference two distinct samples")


@dataclass
class EvalReport:
    protocol: str
    accuracy: float
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0):
            raise ConfigError(f"accuracy out of range: {self.accuracy}")

    def to_record(self) -> dict:
        return {"protocol": self.protocol, "accuracy": self.accuracy,
                "details": self.details}


def _unit_rows(x: np.ndarray, what: str = "embedding") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms <= 0).any():
        raise DegenerateInputError(f"zero-norm {what}")
    return x / norms


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of two vectors, clamped to [-1, 1] against rounding."""
    u = _unit_rows(np.asarray(u).reshape(-1))
    v = _unit_rows(np.asarray(v).reshape(-1))
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


def age_gap_bucket(gap: float) -> str:
    return AGE_GAP_BUCKETS[min(int(gap * 3), 2)]


def make_verification_pairs(identities: np.ndarray, ages: np.ndarray, seed: int,
                            max_pairs_per_bucket: int | None = None
                            ) -> list[VerificationPair]:
    """Label-balanced pair list, balanced separately inside each age-gap third.

    Positives enumerate all same-identity pairs; negatives are sampled to match
    the positive count of each bucket.
    """
    identities = np.asarray(identities)
    ages = np.asarray(ages, dtype=np.float64)
    rng = np.random.default_rng(seed)
    pos_by_bucket: dict[str, list[VerificationPair]] = {b: [] for b in AGE_GAP_BUCKETS}
    for ident in np.unique(identities):
        idx = np.flatnonzero(identities == ident)
        for i in range(len(idx)):
            for j in range(i + 1, len(idx)):
                a, b = int(idx[i]), int(idx[j])
                gap = float(abs(ages[a] - ages[b]))
                pos_by_bucket[age_gap_bucket(gap)].append(
                    VerificationPair(a, b, True, gap))
    pairs: list[VerificationPair] = []
    n = len(identities)
    for bucket in AGE_GAP_BUCKETS:
        pos = pos_by_bucket[bucket]
        if max_pairs_per_bucket is not None and len(pos) > max_pairs_per_bucket:
            keep = rng.choice(len(pos), size=max_pairs_per_bucket, replace=False)
            pos = [pos[int(k)] for k in sorted(keep)]
        negs: list[VerificationPair] = []
        seen: set[tuple[int, int]] = set()
        tries = 0
        while len(negs) < len(pos) and tries < 500 * max(1, len(pos)):
            tries += 1
            a, b = int(rng.integers(n)), int(rng.integers(n))
            if a == b or identities[a] == identities[b]:
                continue
            key = (min(a, b), max(a, b))
            if key in seen:
                continue
            gap = float(abs(ages[a] - ages[b]))
            if age_gap_bucket(gap) != bucket:
                continue
            seen.add(key)
            negs.append(VerificationPair(a, b, False, gap))
        k = min(len(pos), len(negs))
        pairs.extend(pos[:k])
        pairs.extend(negs[:k])
    return pairs


def _resolve_embeddings(pairs: list[VerificationPair], embedder
                        ) -> tuple[dict[int, int], np.ndarray]:
    """Embeddings for exactly the samples the pairs reference, plus an index map."""
    indices = sorted({p.sample_a for p in pairs} | {p.sample_b for p in pairs})
    position = {s: i for i, s in enumerate(indices)}
    if callable(embedder):
        rows = np.asarray(embedder(np.array(indices)), dtype=np.float64)
    else:
        rows = np.asarray(embedder, dtype=np.float64)[indices]
    return position, rows


def _best_threshold(sims: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Exact accuracy-maximizing threshold over all midpoint candidates.

    Decision rule: same iff similarity >= threshold. Ties in accuracy resolve
    to the lowest candidate threshold.
    """
    order = np.argsort(sims, kind="stable")
    s = sims[order]
    pos = labels[order].astype(np.int64)
    m = len(s)
    neg_prefix = np.concatenate([[0], np.cumsum(1 - pos)])
    pos_prefix = np.concatenate([[0], np.cumsum(pos)])
    total_pos = pos_prefix[-1]
    # k = number of lowest-similarity pairs classified "different"
    acc = (neg_prefix + (total_pos - pos_prefix)) / m
    candidates = np.empty(m + 1)
    candidates[0] = s[0] - 1.0
    candidates[m] = s[-1] + 1.0
    candidates[1:m] = (s[:-1] + s[1:]) / 2.0
    valid = np.ones(m + 1, dtype=bool)
    valid[1:m] = s[:-1] < s[1:]  # no threshold fits between equal similarities
    acc = np.where(valid, acc, -1.0)
    k = int(np.argmax(acc))  # first max -> lowest threshold
    return float(candidates[k]), float(acc[k])


def _pair_similarities(pairs: list[VerificationPair], position: dict[int, int],
                       emb: np.ndarray) -> np.ndarray:
    unit = _unit_rows(emb)
    a = np.array([position[p.sample_a] for p in pairs])
    b = np.array([position[p.sample_b] for p in pairs])
    return np.clip((unit[a] * unit[b]).sum(axis=1), -1.0, 1.0)


def _fold_assignment(pairs: list[VerificationPair], folds: int) -> np.ndarray:
    """Canonical, order-independent striping; label-balanced across folds."""
    def key(i):
        p = pairs[i]
        return (min(p.sample_a, p.sample_b), max(p.sample_a, p.sample_b), p.sample_a)

    fold = np.zeros(len(pairs), dtype=np.int64)
    for want_same in (True, False):
        members = sorted((i for i, p in enumerate(pairs) if p.same == want_same), key=key)
        for rank, i in enumerate(members):
            fold[i] = rank % folds
    return fold


def verify_10fold(pairs: list[VerificationPair], embedder, folds: int = 10
                  ) -> EvalReport:
    """Cross-fold verification: per fold, the threshold is fit on the other folds.

    Reported accuracy is the mean of the held-out fold accuracies.
    """
    if len(pairs) < folds:
        raise ConfigError(f"need at least {folds} pairs, got {len(pairs)}")
    position, emb = _resolve_embeddings(pairs, embedder)
    sims = _pair_similarities(pairs, position, emb)
    labels = np.array([p.same for p in pairs])
    fold = _fold_assignment(pairs, folds)
    per_fold = []
    thresholds = []
    for f in range(folds):
        train = fold != f
        test = ~train
        if not test.any():
            per_fold.append(1.0)
            thresholds.append(0.0)
            continue
        th, _ = _best_threshold(sims[train], labels[train])
        pred = sims[test] >= th
        per_fold.append(float((pred == labels[test]).mean()))
        thresholds.append(th)
    counts = {"pairs": len(pairs), "positives": int(labels.sum()),
              "negatives": int((~labels).sum()),
              "fold_sizes": [int((fold == f).sum()) for f in range(folds)]}
    return EvalReport("verify_10fold", float(np.mean(per_fold)),
                      {"per_fold": per_fold, "thresholds": thresholds, **counts})


def verify_by_age_gap(pairs: list[VerificationPair], embedder, folds: int = 10
                      ) -> dict[str, EvalReport]:
    """Run the 10-fold protocol separately inside each age-gap third."""
    out = {}
    for bucket in AGE_GAP_BUCKETS:
        subset = [p for p in pairs if age_gap_bucket(p.age_gap) == bucket]
        if len(subset) >= folds:
            out[bucket] = verify_10fold(subset, embedder, folds)
    return out


def rank1_loo(embeddings: np.ndarray, identities: np.ndarray) -> EvalReport:
    """Leave-one-out rank-1: correct iff the nearest other sample shares identity.

    Similarity ties resolve to the lowest sample index. Identities with a single
    sample are excluded from querying and counted in the report.
    """
    identities = np.asarray(identities)
    unit = _unit_rows(embeddings)
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    _, counts = np.unique(identities, return_counts=True)
    singleton_ids = set(np.unique(identities)[counts == 1].tolist())
    evaluated = 0
    correct = 0
    excluded = 0
    for q in range(len(identities)):
        if identities[q] in singleton_ids:
            excluded += 1
            continue
        nn = int(np.argmax(sims[q]))  # first max -> lowest index
        evaluated += 1
        correct += int(identities[nn] == identities[q])
    acc = correct / evaluated if evaluated else 0.0
    return EvalReport("rank1_loo", acc,
                      {"evaluated": evaluated, "correct": correct,
                       "excluded_singletons": excluded})


def rank1_distractors(probes: np.ndarray, probe_ids: np.ndarray,
                      gallery: np.ndarray, gallery_ids: np.ndarray,
                      distractors: np.ndarray) -> EvalReport:
    """Identification against a distractor pool.

    A probe is correct iff its gallery mate is strictly more similar than every
    distractor and every non-mate gallery entry (ties count against the mate).
    """
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if len(np.unique(gallery_ids)) != len(gallery_ids):
        raise ConfigError("gallery identities must be unique")
    missing = set(probe_ids.tolist()) - set(gallery_ids.tolist())
    if missing:
        raise ConfigError(f"probes without a gallery mate: {sorted(missing)[:5]}")
    pu = _unit_rows(probes, "probe")
    gu = _unit_rows(gallery, "gallery entry")
    du = _unit_rows(distractors, "distractor") if len(distractors) else \
        np.zeros((0, pu.shape[1]))
    g_sims = pu @ gu.T
    d_sims = pu @ du.T if len(du) else np.full((len(pu), 1), -np.inf)
    mate_col = np.array([int(np.flatnonzero(gallery_ids == pid)[0]) for pid in probe_ids])
    correct = 0
    for i in range(len(pu)):
        mate = g_sims[i, mate_col[i]]
        others = np.delete(g_sims[i], mate_col[i])
        rival = max(others.max() if others.size else -np.inf, d_sims[i].max())
        correct += int(mate > rival)
    acc = correct / len(pu) if len(pu) else 0.0
    return EvalReport("rank1_distractors", acc,
                      {"probes": len(pu), "gallery": len(gu),
                       "distractors": int(len(du)), "correct": correct})


def save_embeddings(prefix, embeddings: np.ndarray, identities=None, ages=None,
                    source_checkpoint: str = "") -> Path:
    """Binary matrix (.bin, float32 row-major) plus a JSON header (.json)."""
    prefix = Path(prefix)
    emb = np.ascontiguousarray(embeddings, dtype=np.float32)
    prefix.with_suffix(".bin").write_bytes(emb.tobytes())
    header = {"count": int(emb.shape[0]), "dim": int(emb.shape[1]),
              "dtype": "float32", "source_checkpoint": source_checkpoint}
    if identities is not None:
        header["identities"] = [int(i) for i in identities]
    if ages is not None:
        header["ages"] = [float(a) for a in ages]
    prefix.with_suffix(".json").write_text(json.dumps(header, sort_keys=True, indent=1))
    return prefix


def load_embeddings(prefix) -> tuple[np.ndarray, dict]:
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    raw = prefix.with_suffix(".bin").read_bytes()
    emb = np.frombuffer(raw, dtype=np.dtype(header["dtype"])).reshape(
        header["count"], header["dim"]).copy()
    return emb, header
