"""Retrieval evaluation: feature extraction, distance matrices, CMC/mAP under
the usual and merged-gallery ("mixing") protocols, cross-dataset runs, and
result export.

The usual protocol drops queries that have no valid gallery match (after the
same-camera exclusion); the mixing protocol first merges the query set into
the gallery, never ranking a query against its own tracklet. Average
precision is the non-interpolated mean of precision at each correct hit;
ranking ties break by gallery position (stable sort).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SyntheticDataset, constrained_random_sample, make_batch
from .errors import ConfigError, DomainError, IoError, ProtocolError, ShapeError
from .model import AsaNet


@dataclass
class FeatureSet:
    features: np.ndarray      # (n, d) float64
    identities: np.ndarray    # (n,)
    cameras: np.ndarray       # (n,)
    tracklet_ids: np.ndarray  # (n,)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class RankingResult:
    distances: np.ndarray          # (Q, G') distance matrix actually ranked
    ranked_lists: list[np.ndarray]  # per evaluated query: gallery tracklet ids
    ranked_correct: list[np.ndarray]
    query_ids: np.ndarray          # tracklet ids of evaluated queries
    cmc: np.ndarray
    mean_ap: float
    per_query_ap: np.ndarray
    num_queries_total: int
    num_queries_evaluated: int


def extract_features(model: AsaNet, dataset: SyntheticDataset, split: str,
                     seed: int = 99, batch_size: int = 32) -> FeatureSet:
    """Deterministic eval-mode descriptors for every tracklet of a split."""
    model.eval_mode()
    indices = dataset.split(split)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    t = model.config.frames_per_clip
    rows = []
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        batch = make_batch(dataset, chunk, t, rng)
        out = model.forward_batch(batch.frames)
        rows.append(out.final_feat.data)
    feats = np.concatenate(rows) if rows else np.zeros((0, model.config.final_width))
    return FeatureSet(
        features=feats,
        identities=dataset.labels(indices),
        cameras=dataset.cameras(indices),
        tracklet_ids=np.array(indices),
    )


def distance_matrix(query: np.ndarray, gallery: np.ndarray,
                    metric: str = "cosine") -> np.ndarray:
    """(Q, G) distances: cosine (1 - cos) or squared Euclidean."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ShapeError(f"feature widths differ: {query.shape} vs {gallery.shape}")
    if metric == "cosine":
        qn = np.linalg.norm(query, axis=1)
        gn = np.linalg.norm(gallery, axis=1)
        if np.any(qn == 0) or np.any(gn == 0):
            raise DomainError("cosine distance undefined for zero-norm feature")
        return 1.0 - (query / qn[:, None]) @ (gallery / gn[:, None]).T
    if metric == "euclidean":
        sq_q = (query * query).sum(axis=1)
        sq_g = (gallery * gallery).sum(axis=1)
        sq = sq_q[:, None] + sq_g[None, :] - 2.0 * query @ gallery.T
        return np.maximum(sq, 0.0)
    raise ConfigError(f"unknown metric {metric!r}")


def average_precision(correct: np.ndarray) -> float:
    """Non-interpolated AP over a ranked binary relevance vector."""
    hits = np.flatnonzero(correct)
    if hits.size == 0:
        return 0.0
    precisions = (np.arange(hits.size) + 1) / (hits + 1)
    return float(precisions.mean())


def cmc_map(query: FeatureSet, gallery: FeatureSet, *, setup: str = "usual",
            same_camera_rule: bool = True, metric: str = "cosine") -> RankingResult:
    """Rank every query against the gallery and score CMC and mAP.

    setup "usual" drops queries without a valid match; "mixing" merges the
    query set into the gallery first (each query's own tracklet is excluded
    from its ranking)."""
    if setup not in ("usual", "mixing"):
        raise ConfigError(f"unknown setup {setup!r}")
    if setup == "mixing":
        gallery = FeatureSet(
            features=np.concatenate([gallery.features, query.features]),
            identities=np.concatenate([gallery.identities, query.identities]),
            cameras=np.concatenate([gallery.cameras, query.cameras]),
            tracklet_ids=np.concatenate([gallery.tracklet_ids, query.tracklet_ids]),
        )
    dist = distance_matrix(query.features, gallery.features, metric)

    per_ap = []
    cmc_rows = []
    ranked_lists = []
    ranked_correct = []
    kept_queries = []
    for qi in range(len(query)):
        valid = gallery.tracklet_ids != query.tracklet_ids[qi]
        if same_camera_rule:
            same_id_cam = (gallery.identities == query.identities[qi]) & (
                gallery.cameras == query.cameras[qi]
            )
            valid &= ~same_id_cam
        candidates = np.flatnonzero(valid)
        matches = gallery.identities[candidates] == query.identities[qi]
        if not matches.any():
            continue  # dropped under "usual"; cannot be scored under either setup
        order = candidates[np.argsort(dist[qi, candidates], kind="stable")]
        correct = gallery.identities[order] == query.identities[qi]
        per_ap.append(average_precision(correct))
        first_hit = int(np.flatnonzero(correct)[0])
        row = np.zeros(order.size)
        row[first_hit:] = 1.0
        cmc_rows.append(row)
        ranked_lists.append(gallery.tracklet_ids[order])
        ranked_correct.append(correct)
        kept_queries.append(qi)

    if not kept_queries:
        raise ProtocolError("no query with a valid gallery match after filtering")

    max_rank = max(len(r) for r in cmc_rows)
    cmc = np.zeros(max_rank)
    for row in cmc_rows:
        cmc[: len(row)] += row
        cmc[len(row):] += row[-1]  # a matched query stays matched past its list
    cmc /= len(cmc_rows)

    return RankingResult(
        distances=dist,
        ranked_lists=ranked_lists,
        ranked_correct=ranked_correct,
        query_ids=query.tracklet_ids[kept_queries],
        cmc=cmc,
        mean_ap=float(np.mean(per_ap)),
        per_query_ap=np.array(per_ap),
        num_queries_total=len(query),
        num_queries_evaluated=len(kept_queries),
    )


def evaluate_dataset(model: AsaNet, dataset: SyntheticDataset, *,
                     setup: str = "usual", same_camera_rule: bool = True,
                     metric: str = "cosine", seed: int = 99) -> RankingResult:
    """Extract query/gallery descriptors and rank them."""
    query = extract_features(model, dataset, "query", seed=seed)
    gallery = extract_features(model, dataset, "gallery", seed=seed)
    return cmc_map(query, gallery, setup=setup,
                   same_camera_rule=same_camera_rule, metric=metric)


def cross_dataset_eval(model: AsaNet, dataset_b: SyntheticDataset, *,
                       setup: str = "usual", same_camera_rule: bool = True,
                       metric: str = "cosine", seed: int = 99) -> RankingResult:
    """Evaluate weights trained on one dataset against another's splits."""
    cfg = model.config
    if tuple(dataset_b.image_shape) != (cfg.image_height, cfg.image_width):
        raise ConfigError(
            f"dataset geometry {dataset_b.image_shape} does not match the model "
            f"{(cfg.image_height, cfg.image_width)}"
        )
    return evaluate_dataset(model, dataset_b, setup=setup,
                            same_camera_rule=same_camera_rule, metric=metric,
                            seed=seed)


def intra_identity_pose_ratio(features: np.ndarray, identities, poses,
                              metric: str = "cosine") -> float:
    """Mean same-pose over mean cross-pose distance among same-identity pairs.

    Values near 1 mean pose no longer separates an identity's features."""
    identities = np.asarray(identities)
    poses = np.asarray(poses)
    dist = distance_matrix(features, features, metric)
    within, cross = [], []
    n = len(identities)
    for i in range(n):
        for j in range(i + 1, n):
            if identities[i] != identities[j]:
                continue
            (within if poses[i] == poses[j] else cross).append(dist[i, j])
    if not within or not cross:
        raise ProtocolError("need both same-pose and cross-pose same-identity pairs")
    return float(np.mean(within) / np.mean(cross))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _cmc_svg(cmc: np.ndarray) -> str:
    """Self-contained SVG line plot of the CMC curve."""
    width, height, pad = 420, 300, 40
    n = len(cmc)
    xs = [pad + (width - 2 * pad) * (i / max(n - 1, 1)) for i in range(n)]
    ys = [height - pad - (height - 2 * pad) * v for v in cmc]
    points = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    return f"""<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">
<rect width="{width}" height="{height}" fill="white"/>
<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>
<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>
<text x="{width // 2}" y="{height - 8}" font-size="12" text-anchor="middle">rank</text>
<text x="12" y="{height // 2}" font-size="12" transform="rotate(-90 12 {height // 2})" text-anchor="middle">CMC</text>
<text x="{pad - 6}" y="{height - pad + 4}" font-size="10" text-anchor="end">0</text>
<text x="{pad - 6}" y="{pad + 4}" font-size="10" text-anchor="end">1</text>
<polyline fill="none" stroke="#2060c0" stroke-width="2" points="{points}"/>
</svg>
"""


def export_results(result: RankingResult, out_dir, top_k: int = 20) -> dict:
    """Write metrics.json, cmc.csv, ranked_lists.csv and cmc.svg."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = {
            "mAP": result.mean_ap,
            "cmc": {
                str(r): float(result.cmc[min(r - 1, len(result.cmc) - 1)])
                for r in (1, 5, 10, 20)
            },
            "num_queries_total": result.num_queries_total,
            "num_queries_evaluated": result.num_queries_evaluated,
        }
        with open(out_dir / "metrics.json", "w") as fh:
            json.dump(metrics, fh, indent=1)
        with open(out_dir / "cmc.csv", "w") as fh:
            fh.write("rank,value\n")
            for r, v in enumerate(result.cmc, start=1):
                fh.write(f"{r},{v:.10g}\n")
        with open(out_dir / "ranked_lists.csv", "w") as fh:
            header = (["query_id"] + [f"g{i+1}" for i in range(top_k)]
                      + [f"c{i+1}" for i in range(top_k)])
            fh.write(",".join(header) + "\n")
            for qid, ranked, correct in zip(result.query_ids, result.ranked_lists,
                                            result.ranked_correct):
                ids = [str(t) for t in ranked[:top_k]]
                flags = [str(int(c)) for c in correct[:top_k]]
                ids += [""] * (top_k - len(ids))
                flags += [""] * (top_k - len(flags))
                fh.write(",".join([str(qid)] + ids + flags) + "\n")
        (out_dir / "cmc.svg").write_text(_cmc_svg(result.cmc))
    except OSError as exc:
        raise IoError(f"cannot write results to {out_dir}: {exc}") from exc
    return metrics


def save_features(feature_set: FeatureSet, out_dir) -> None:
    """Dump descriptors as features.bin + features.json for offline scoring."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        data = np.ascontiguousarray(feature_set.features, dtype="<f8")
        (out_dir / "features.bin").write_bytes(data.tobytes())
        manifest = {
            "count": int(data.shape[0]),
            "dim": int(data.shape[1]),
            "dtype": "<f8",
            "identities": feature_set.identities.tolist(),
            "cameras": feature_set.cameras.tolist(),
            "tracklet_ids": feature_set.tracklet_ids.tolist(),
        }
        with open(out_dir / "features.json", "w") as fh:
            json.dump(manifest, fh, indent=1)
    except OSError as exc:
        raise IoError(f"cannot write features to {out_dir}: {exc}") from exc


def load_features(path) -> FeatureSet:
    path = Path(path)
    manifest = json.loads((path / "features.json").read_text())
    raw = (path / "features.bin").read_bytes()
    feats = np.frombuffer(raw, dtype=manifest["dtype"]).reshape(
        manifest["count"], manifest["dim"]
    )
    return FeatureSet(
        features=feats.astype(np.float64),
        identities=np.array(manifest["identities"]),
        cameras=np.array(manifest["cameras"]),
        tracklet_ids=np.array(manifest["tracklet_ids"]),
    )
