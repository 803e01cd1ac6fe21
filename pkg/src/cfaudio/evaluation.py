"""Evaluation protocols: retrieval, zero-shot classification, and the
fact-versus-counterfactual similarity audit, plus embedding export and 2D
projection for figures.

All metrics use cosine similarity. Ties are broken by stable lowest index
everywhere, so reports are exactly reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from .errors import ConfigHashMismatchError, EvaluationError
from .manifest import DatasetManifest
from .trainer import FeatureExtractor, ModelBundle

TIE_POLICY = "ties broken by stable lowest corpus index"


@dataclass(frozen=True)
class RetrievalReport:
    top_k: dict[int, float]
    n_queries: int
    tie_policy: str = TIE_POLICY


@dataclass(frozen=True)
class ZeroShotReport:
    accuracy: float
    per_class: dict[str, float]
    template: str


@dataclass(frozen=True)
class AuditReport:
    """Count of items whose audio is strictly closer to its factual caption
    than to its counterfactual, with an exact binomial 95% interval."""

    win_count: int
    n: int
    fraction: float
    ci_low: float
    ci_high: float
    tie_count: int


def _unit_rows(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EvaluationError("zero-norm embedding")
    return M / norms


def binomial_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Exact (Clopper-Pearson) two-sided binomial confidence interval."""
    if not 0 <= successes <= n:
        raise EvaluationError("successes must lie in [0, n]")
    alpha = 1.0 - confidence
    lo = 0.0 if successes == 0 else float(stats.beta.ppf(alpha / 2, successes, n - successes + 1))
    hi = 1.0 if successes == n else float(stats.beta.ppf(1 - alpha / 2, successes + 1, n - successes))
    return lo, hi


def retrieval_eval(
    text_queries: np.ndarray,
    audio_corpus: np.ndarray,
    true_indices: Sequence[int],
    ks: Sequence[int],
) -> RetrievalReport:
    """Text-to-audio retrieval accuracy at each cutoff in ``ks``.

    Each query must name exactly one ground-truth corpus index. The true
    item's rank counts corpus items with strictly higher cosine plus tied
    items at lower index, so accuracy is deterministic under ties.
    """
    queries = _unit_rows(text_queries)
    corpus = _unit_rows(audio_corpus)
    if len(true_indices) != len(queries):
        raise EvaluationError("need one ground-truth index per query")
    if not ks or any(k < 1 for k in ks):
        raise EvaluationError("cutoffs must be positive")
    m = len(corpus)
    ranks = np.empty(len(queries), dtype=np.int64)
    for i, target in enumerate(true_indices):
        if target is None or not 0 <= target < m:
            raise EvaluationError(f"query {i} has no ground-truth audio in the corpus")
        sims = corpus @ queries[i]
        s_true = sims[target]
        ranks[i] = 1 + int((sims > s_true).sum()) + int((sims[:target] == s_true).sum())
    top_k = {int(k): float((ranks <= k).mean()) for k in ks}
    return RetrievalReport(top_k=top_k, n_queries=len(queries))


def zero_shot_classify(
    audio_embeddings: np.ndarray,
    true_labels: Sequence[str],
    class_labels: Sequence[str],
    template: str,
    text_cache,
) -> ZeroShotReport:
    """Zero-shot classification against templated class-label embeddings.

    Each clip is assigned the class whose templated text embedding has the
    highest cosine with the clip's audio embedding (lowest index wins ties).
    """
    if len(class_labels) < 2:
        raise EvaluationError("need at least two classes")
    if len(set(class_labels)) != len(class_labels):
        raise EvaluationError("duplicate class labels")
    if "{label}" not in template:
        raise EvaluationError("template is missing its {label} slot")
    unknown = sorted(set(true_labels) - set(class_labels))
    if unknown:
        raise EvaluationError(f"true labels not in class list: {', '.join(unknown)}")

    prompts = [template.replace("{label}", label) for label in class_labels]
    class_emb = _unit_rows(text_cache.encode(prompts).numpy())
    audio = _unit_rows(audio_embeddings)
    predictions = np.argmax(audio @ class_emb.T, axis=1)

    true_arr = np.asarray(true_labels)
    pred_arr = np.asarray([class_labels[p] for p in predictions])
    per_class: dict[str, float] = {}
    for label in class_labels:
        members = true_arr == label
        if members.any():
            per_class[label] = float((pred_arr[members] == label).mean())
    return ZeroShotReport(
        accuracy=float((pred_arr == true_arr).mean()), per_class=per_class, template=template
    )


def fact_cf_audit(
    audio_embeddings: np.ndarray,
    fact_embeddings: np.ndarray,
    cf_embeddings: np.ndarray,
) -> AuditReport:
    """Count items where cos(audio, fact) strictly exceeds cos(audio, cf)."""
    a = _unit_rows(audio_embeddings)
    t = _unit_rows(fact_embeddings)
    t_cf = _unit_rows(cf_embeddings)
    if not (len(a) == len(t) == len(t_cf)):
        raise EvaluationError("audit inputs must be three aligned lists")
    cos_fact = (a * t).sum(axis=1)
    cos_cf = (a * t_cf).sum(axis=1)
    wins = int((cos_fact > cos_cf).sum())
    ties = int((cos_fact == cos_cf).sum())
    n = len(a)
    lo, hi = binomial_interval(wins, n)
    return AuditReport(
        win_count=wins, n=n, fraction=wins / n, ci_low=lo, ci_high=hi, tie_count=ties
    )


def label_similarity_audit(
    class_labels: Sequence[str], template: str, text_cache
) -> tuple[np.ndarray, dict[str, tuple[float, float]]]:
    """Pairwise cosine matrix of templated class labels (diagnostic only).

    Returns the matrix and, per label, mean and std of its similarity to all
    other labels. High off-diagonal values flag label sets too generic for
    templated zero-shot classification to separate.
    """
    if len(class_labels) < 2:
        raise EvaluationError("need at least two labels")
    if len(set(class_labels)) != len(class_labels):
        raise EvaluationError("duplicate class labels")
    if "{label}" not in template:
        raise EvaluationError("template is missing its {label} slot")
    emb = _unit_rows(text_cache.encode([template.replace("{label}", l) for l in class_labels]).numpy())
    matrix = emb @ emb.T
    summary = {}
    for i, label in enumerate(class_labels):
        others = np.delete(matrix[i], i)
        summary[label] = (float(others.mean()), float(others.std()))
    return matrix, summary


# --------------------------------------------------------------------------
# embedding a manifest through a trained model


@dataclass
class EmbeddedManifest:
    """Embeddings of a manifest: one audio row per entry, plus caption rows.

    ``row_targets[r]`` is the audio-row index the caption row ``r`` belongs
    to. With ``all_captions=False`` there is exactly one caption row per
    entry (the first caption), so rows align with entries.
    """

    entry_ids: list[str]
    audio: np.ndarray
    fact: np.ndarray
    cf: np.ndarray | None
    row_targets: np.ndarray
    row_ids: list[str]


def embed_manifest(
    bundle: ModelBundle, manifest: DatasetManifest, all_captions: bool = False
) -> EmbeddedManifest:
    """Embed every clip and caption of a manifest with a trained model.

    Audio clips are center-cropped (or zero-padded) to the configured
    segment length, so the result is deterministic.
    """
    extractor = FeatureExtractor(bundle.config.frontend)
    features = [
        extractor.features(str(manifest.resolve_audio(entry)), rng=None)
        for entry in manifest.entries
    ]
    with torch.no_grad():
        audio = bundle.model(torch.from_numpy(np.stack(features))).numpy()

    captions: list[str] = []
    cfs: list[str | None] = []
    targets: list[int] = []
    row_ids: list[str] = []
    for e_idx, entry in enumerate(manifest.entries):
        indices = range(len(entry.captions)) if all_captions else range(1)
        for c_idx in indices:
            captions.append(entry.captions[c_idx])
            cfs.append(entry.counterfactuals[c_idx] if entry.counterfactuals else None)
            targets.append(e_idx)
            row_ids.append(f"{entry.id}#{c_idx}" if all_captions else entry.id)

    fact = bundle.text_cache.encode(captions).numpy()
    cf_matrix = None
    if all(c is not None for c in cfs):
        cf_matrix = bundle.text_cache.encode([c for c in cfs]).numpy()
    return EmbeddedManifest(
        entry_ids=[e.id for e in manifest.entries],
        audio=audio,
        fact=fact,
        cf=cf_matrix,
        row_targets=np.asarray(targets),
        row_ids=row_ids,
    )


def export_embeddings(
    bundle: ModelBundle,
    manifest: DatasetManifest,
    out_path: str | Path,
    expected_hash: str | None = None,
) -> int:
    """Write aligned embedding records ``{id, role, vector}`` as JSONL.

    Roles are ``audio``, ``fact`` and (when present) ``counterfactual``, one
    of each per entry. Refuses to run when ``expected_hash`` does not match
    the checkpoint's config hash.
    """
    if expected_hash is not None and expected_hash != bundle.config_hash:
        raise ConfigHashMismatchError(expected_hash, bundle.config_hash)
    embedded = embed_manifest(bundle, manifest)
    count = 0
    with open(out_path, "w", encoding="utf-8") as f:
        for i, entry_id in enumerate(embedded.entry_ids):
            rows = [("audio", embedded.audio[i]), ("fact", embedded.fact[i])]
            if embedded.cf is not None:
                rows.append(("counterfactual", embedded.cf[i]))
            for role, vector in rows:
                f.write(
                    json.dumps({"id": entry_id, "role": role, "vector": vector.tolist()}) + "\n"
                )
                count += 1
    return count


def load_embedding_dump(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    ids, roles, vectors = [], [], []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            record = json.loads(line)
            ids.append(record["id"])
            roles.append(record["role"])
            vectors.append(record["vector"])
    return ids, roles, np.asarray(vectors, dtype=np.float64)


def project_2d(vectors: np.ndarray, method: str = "tsne", seed: int = 0) -> np.ndarray:
    """Project embeddings to 2D: seeded t-SNE by default, PCA as fallback.

    Projections are for figures only; metric assertions belong in the
    original embedding space. Deterministic for a fixed seed.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(vectors)
    if method == "tsne" and n > 5:
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(2.0, (n - 1) / 3.0))
        return TSNE(
            n_components=2, random_state=seed, perplexity=perplexity, init="pca"
        ).fit_transform(vectors)
    if method not in ("tsne", "pca"):
        raise EvaluationError(f"unknown projection method {method!r}")
    centered = vectors - vectors.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    # fix sign so the largest-magnitude loading is positive
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return centered @ components.T


ROLE_COLORS = {"audio": "tab:green", "fact": "tab:red", "counterfactual": "tab:blue"}


def save_projection_plot(
    coords: np.ndarray, roles: Sequence[str], out_path: str | Path, title: str = ""
) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    roles_arr = np.asarray(roles)
    for role in ("fact", "counterfactual", "audio"):
        members = roles_arr == role
        if members.any():
            ax.scatter(
                coords[members, 0],
                coords[members, 1],
                s=12,
                c=ROLE_COLORS.get(role, "gray"),
                label=role,
                alpha=0.8,
            )
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
