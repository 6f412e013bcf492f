"""Exhaustive cosine retrieval over material embeddings and evaluation harnesses."""
import csv
from dataclasses import dataclass

import numpy as np

from . import encoder
from .errors import DimensionMismatch, DuplicateId, NonUnitNorm, ZeroVector
from .synthdata import CONDITIONS, view_subset
from .trainer import TEST, TrainConfig, train

UNIT_TOL = 1e-5
TOP_K = (1, 5)

CONDITION_TITLES = {
    "main": "Main Evaluation",
    "unseen_shape": "Unseen Shapes",
    "unseen_lighting": "Unseen Lighting",
}


class MaterialIndex:
    """Immutable ``(ids, N x D)`` table of unit material embeddings."""

    def __init__(self, ids, matrix):
        self.ids = tuple(ids)
        matrix = np.array(matrix, dtype=np.float64)
        matrix.setflags(write=False)
        self.matrix = matrix
        # position of each row in ascending-id order, used to break score ties
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))

    def __len__(self):
        return len(self.ids)


def _check_unit(v, what):
    norms = np.linalg.norm(np.atleast_2d(v), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise NonUnitNorm(f"{what} must have unit norm (got {norms.min():.6g}..{norms.max():.6g})")


def build_index(pairs):
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot build an empty index")
    ids = [mid for mid, _ in pairs]
    seen = set()
    for mid in ids:
        if mid in seen:
            raise DuplicateId(f"material id {mid!r} appears twice")
        seen.add(mid)
    matrix = np.stack([np.asarray(e, dtype=np.float64) for _, e in pairs])
    if matrix.ndim != 2:
        raise DimensionMismatch("embeddings must be 1-D vectors of equal length")
    _check_unit(matrix, "indexed embeddings")
    return MaterialIndex(ids, matrix)


def _scores(queries, matrix, chunk=64):
    """``(Q, N)`` cosine scores of unit rows.

    Each score is the numpy sum of one elementwise product row, so it is
    bit-identical to scoring that single pair on its own, whatever the batch.
    """
    queries = np.atleast_2d(queries)
    out = np.empty((len(queries), len(matrix)))
    for i in range(0, len(queries), chunk):
        out[i:i + chunk] = (queries[i:i + chunk, None, :] * matrix[None, :, :]).sum(axis=2)
    return out


def _order(scores, id_rank):
    """Row-wise descending score order with ties broken by ascending id."""
    scores = np.atleast_2d(scores)
    keys = np.broadcast_to(id_rank, scores.shape)
    return np.lexsort((keys, -scores), axis=-1)


def rank(index, query, k):
    """Top ``min(k, N)`` ``(material_id, score)`` pairs by cosine similarity."""
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.matrix.shape[1],):
        raise DimensionMismatch(f"query has shape {query.shape}, index rows have {index.matrix.shape[1]}")
    _check_unit(query, "query")
    scores = _scores(query, index.matrix)[0]
    order = _order(scores, index._id_rank)[0][:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def rank_many(index, queries, k):
    queries = np.asarray(queries, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if queries.ndim != 2 or queries.shape[1] != index.matrix.shape[1]:
        raise DimensionMismatch(f"queries have shape {queries.shape}, index rows have {index.matrix.shape[1]}")
    _check_unit(queries, "queries")
    scores = _scores(queries, index.matrix)
    order = _order(scores, index._id_rank)[:, :k]
    return [[(index.ids[i], float(s[i])) for i in row] for row, s in zip(order, scores)]


def topk_accuracy(rankings, truths, k):
    if len(rankings) != len(truths):
        raise DimensionMismatch(f"{len(rankings)} rankings but {len(truths)} truths")
    if not rankings:
        raise ValueError("no rankings to score")
    hits = sum(1 for ranked, truth in zip(rankings, truths) if truth in [mid for mid, _ in ranked[:k]])
    return 100.0 * hits / len(rankings)


def baseline_score(part_desc, views, mode):
    """Max (``v1_max``) or mean (``v2_mean``) cosine between a part and a material's views."""
    part = np.asarray(part_desc, dtype=np.float64)
    views = np.atleast_2d(np.asarray(views, dtype=np.float64))
    if views.shape[1] != part.shape[0]:
        raise DimensionMismatch(f"part has {part.shape[0]} dims, views have {views.shape[1]}")
    pn = np.linalg.norm(part)
    vn = np.linalg.norm(views, axis=1)
    if not pn > 1e-12 or np.any(vn <= 1e-12):
        raise ZeroVector("baseline scoring needs nonzero vectors")
    cos = np.clip(views @ part / (vn * pn), -1.0, 1.0)
    if mode in ("v1", "v1_max"):
        return float(cos.max())
    if mode in ("v2", "v2_mean"):
        return float(cos.mean())
    raise ValueError(f"unknown baseline mode {mode!r}")


def baseline_scores(descriptors, views, mode):
    """Vectorized :func:`baseline_score`: ``(P, D)`` parts vs ``(N, V, D)`` materials."""
    parts = np.asarray(descriptors, dtype=np.float64)
    views = np.asarray(views, dtype=np.float64)
    parts = parts / np.linalg.norm(parts, axis=1, keepdims=True)
    views = views / np.linalg.norm(views, axis=2, keepdims=True)
    cos = np.clip(np.einsum("pd,nvd->pnv", parts, views), -1.0, 1.0)
    return cos.max(axis=2) if mode in ("v1", "v1_max") else cos.mean(axis=2)


@dataclass(frozen=True)
class MetricsRow:
    method: str
    condition: str
    top1: float
    top5: float
    count: int


def _ranked_ids(scores, ids, id_rank, k):
    order = _order(scores, id_rank)[:, :k]
    return [[ids[i] for i in row] for row in order]


def _accuracies(ranked, truths):
    out = []
    for k in TOP_K:
        hits = sum(1 for r, t in zip(ranked, truths) if t in r[:k])
        out.append(100.0 * hits / len(truths))
    return out


def material_embeddings(params, n_heads, views, chunk=256):
    out = [encoder.encode_materials(params, views[i:i + chunk], n_heads) for i in range(0, len(views), chunk)]
    return np.concatenate(out).astype(np.float64)


def evaluate(method, manifest, split=TEST, condition="main", params=None, n_heads=None, view_rows=None):
    """Rank every part of ``split``/``condition`` against all materials.

    ``method`` is ``"matclip"`` (needs ``params`` and ``n_heads``), ``"v1"`` or
    ``"v2"``.
    """
    parts = [p for p in manifest.parts if p.split == split and p.condition == condition]
    if not parts:
        raise ValueError(f"no parts in split {split!r} with condition {condition!r}")
    views = manifest.views if view_rows is None else manifest.views[:, list(view_rows)]
    descriptors = manifest.descriptors[[p.descriptor_row for p in parts]]
    if method == "matclip":
        if params is None or n_heads is None:
            raise ValueError("matclip evaluation needs trained parameters")
        index = build_index(zip(manifest.material_ids, material_embeddings(params, n_heads, views)))
        queries = encoder.encode_parts(params, descriptors).astype(np.float64)
        queries /= np.linalg.norm(queries, axis=1, keepdims=True)
        scores = _scores(queries, index.matrix)
    elif method in ("v1", "v2"):
        index = MaterialIndex(manifest.material_ids, np.zeros((len(manifest.material_ids), 1)))
        scores = baseline_scores(descriptors, views, method)
    else:
        raise ValueError(f"unknown method {method!r}")
    ranked = _ranked_ids(scores, index.ids, index._id_rank, max(TOP_K))
    top1, top5 = _accuracies(ranked, [p.truth_material_id for p in parts])
    return MetricsRow(method=method, condition=condition, top1=top1, top5=top5, count=len(parts))


def available_conditions(manifest, split=TEST):
    present = {p.condition for p in manifest.parts if p.split == split}
    return [c for c in CONDITIONS if c in present]


# --- ablation ----------------------------------------------------------------

def ablation_label(shape_count, env_count, n_shapes, n_env):
    if shape_count == n_shapes and env_count == n_env:
        return "Full Model"
    if shape_count == 1:
        shape = "Plane Shape"
    elif shape_count == n_shapes:
        shape = "All Shapes"
    else:
        shape = f"{shape_count} Shapes"
    if env_count == 1:
        env = "1 Environment Map"
    elif env_count == n_env:
        env = "All Environment Maps"
    else:
        env = f"{env_count} Environment Maps"
    return f"{shape}, {env}"


def train_and_evaluate(model_config, train_config, manifest, view_rows=None, init_seed=None):
    """Train from a fresh init on ``view_rows`` and return (params, main-condition metrics)."""
    n_views = manifest.n_views if view_rows is None else len(view_rows)
    cfg = encoder.EncoderConfig(**{**model_config.__dict__, "n_views": n_views})
    seed = train_config.seed if init_seed is None else init_seed
    init = encoder.init_params(cfg, seed)
    state, _ = train(train_config, manifest, init, cfg.n_heads, view_rows=view_rows)
    row = evaluate("matclip", manifest, params=state.params, n_heads=cfg.n_heads, view_rows=view_rows)
    return state.params, row


def ablate(model_config, train_config, manifest, subsets):
    """Retrain on each ``(shape_count, env_count)`` view subset; returns ``[(label, top1)]``."""
    cfg = manifest.config
    rows = []
    for shape_count, env_count in subsets:
        view_rows = view_subset(cfg.n_env, cfg.n_shapes, env_count, shape_count)
        _, metrics = train_and_evaluate(model_config, train_config, manifest, view_rows)
        rows.append((ablation_label(shape_count, env_count, cfg.n_shapes, cfg.n_env), metrics.top1))
    return rows


# --- reports -----------------------------------------------------------------

METRICS_HEADER = ["method", "condition", "top1", "top5", "count"]


def write_metrics_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.method, r.condition, f"{r.top1:.2f}", f"{r.top5:.2f}", r.count])


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: expected columns {METRICS_HEADER}, got {reader.fieldnames}")
        return [MetricsRow(r["method"], r["condition"], float(r["top1"]), float(r["top5"]), int(r["count"]))
                for r in reader]


def metrics_markdown(rows):
    """Table with one row per method and a T-1 / T-5 column pair per condition."""
    conditions = [c for c in CONDITIONS if any(r.condition == c for r in rows)]
    methods = list(dict.fromkeys(r.method for r in rows))
    cell = {(r.method, r.condition): r for r in rows}
    head = ["Method"] + [f"{CONDITION_TITLES[c]} {m}" for c in conditions for m in ("T-1 [%]", "T-5 [%]")]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] + [":---:"] * (len(head) - 1)) + "|"]
    for m in methods:
        vals = []
        for c in conditions:
            r = cell.get((m, c))
            vals += [f"{r.top1:.2f}", f"{r.top5:.2f}"] if r else ["-", "-"]
        lines.append("| " + " | ".join([m] + vals) + " |")
    return "\n".join(lines) + "\n"


def ablation_markdown(rows):
    lines = ["| Model Name | Val. Acc. [%] |", "|---|:---:|"]
    lines += [f"| {label} | {top1:.2f} |" for label, top1 in rows]
    return "\n".join(lines) + "\n"


