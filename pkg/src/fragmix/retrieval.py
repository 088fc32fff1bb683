"""Descriptor sets, PCA whitening, cosine ranking and leave-one-out mAP / Top-1."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._accel import njit, pick
from .errors import ConfigError, DataError, DimensionError
from .numerics import no_grad

log = logging.getLogger(__name__)

LABEL_SCHEMA = ("fragment_id", "writer_id", "page_id")
LABEL_KINDS = ("writer", "page")
DEFAULT_WHITEN_DIM = 256
WHITEN_EPS = 1e-8
_MAGIC = b"FRAGMIX-DESCRIPTORS 1\n"


@dataclass
class DescriptorSet:
    matrix: np.ndarray
    fragment_ids: list[str]
    writer_ids: list[str]
    page_ids: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise DimensionError(f"descriptor matrix must be 2-D, got {self.matrix.shape}")
        n = self.matrix.shape[0]
        for name in ("fragment_ids", "writer_ids", "page_ids"):
            if len(getattr(self, name)) != n:
                raise DataError(f"{name} has {len(getattr(self, name))} entries for {n} descriptors")
        if len(set(self.fragment_ids)) != n:
            raise DataError("fragment ids in a descriptor set must be unique")
        if not np.all(np.isfinite(self.matrix)):
            raise DataError("descriptor matrix contains NaN or Inf")

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def labels(self, kind: str) -> list[str]:
        if kind == "writer":
            return self.writer_ids
        if kind == "page":
            return self.page_ids
        raise ConfigError(f"label kind must be one of {LABEL_KINDS}, got {kind!r}")

    def check_normalized(self, tol: float = 1e-4) -> None:
        norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
        worst = float(np.abs(norms - 1).max()) if len(norms) else 0.0
        if worst > tol:
            raise DataError(f"descriptor rows must be l2-normalised (worst deviation {worst:.3g})")


# -- extraction -------------------------------------------------------------------


def extract_descriptors(model, images: np.ndarray, records, batch_size: int = 32, meta: dict | None = None):
    """Run the model in eval mode over ``images`` (N x C x H x W), one row per record."""
    if len(images) != len(records):
        raise DataError(f"{len(images)} images for {len(records)} records")
    rows = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = np.asarray(images[i : i + batch_size], dtype=model.dtype)
            rows.append(model.forward(x)["descriptor"].data.astype(np.float32))
    matrix = np.concatenate(rows) if rows else np.zeros((0, model.cfg.descriptor_dim), np.float32)
    info = {"model_config": model.cfg.to_dict()}
    info.update(meta or {})
    ds = DescriptorSet(
        matrix,
        [r.fragment_id for r in records],
        [r.writer_id for r in records],
        [r.page_id for r in records],
        info,
    )
    ds.check_normalized()
    return ds


# -- whitening --------------------------------------------------------------------


@dataclass
class WhitenTransform:
    mean: np.ndarray
    projection: np.ndarray  # (d, D), rows scaled by 1/sqrt(eigenvalue + eps)
    eigenvalues: np.ndarray
    eps: float = WHITEN_EPS

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Centred, rotated and scaled coordinates (before re-normalisation)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.mean.shape[0]:
            raise DimensionError(f"whitening fitted on dim {self.mean.shape[0]}, got input {x.shape}")
        return (x - self.mean) @ self.projection.T


def fit_whiten(data, d: int = DEFAULT_WHITEN_DIM, eps: float = WHITEN_EPS) -> WhitenTransform:
    """PCA whitening: keep the top ``d`` covariance eigenvectors, scale by ``1/sqrt(lambda + eps)``.

    Components whose eigenvalue does not exceed ``eps`` get a zero row, so
    degenerate directions contribute nothing.
    """
    x = np.asarray(data.matrix if isinstance(data, DescriptorSet) else data, dtype=np.float64)
    n, dim = x.shape
    if n < 2:
        raise ConfigError("whitening needs at least 2 descriptors")
    bound = min(n - 1, dim)
    if not 1 <= d <= bound:
        raise ConfigError(f"whitening dim {d} must be in [1, min(N-1, D)] = [1, {bound}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d]
    evals = np.clip(evals[order], 0.0, None)
    vecs = evecs[:, order]
    # deterministic sign: largest-magnitude entry of each eigenvector positive
    signs = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(d)])
    vecs = vecs * np.where(signs == 0, 1.0, signs)
    scale = np.where(evals > eps, 1.0 / np.sqrt(evals + eps), 0.0)
    return WhitenTransform(mean, vecs.T * scale[:, None], evals, eps)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def apply_whiten(t: WhitenTransform, ds: DescriptorSet) -> DescriptorSet:
    if ds.dim != t.mean.shape[0]:
        raise DimensionError(f"whitening fitted on dim {t.mean.shape[0]}, descriptors have dim {ds.dim}")
    out = _normalize_rows(t.transform(ds.matrix))
    meta = dict(ds.meta)
    meta["whitened_dim"] = t.dim
    return DescriptorSet(out, ds.fragment_ids, ds.writer_ids, ds.page_ids, meta)


# -- ranking ----------------------------------------------------------------------


def _ap_numpy(sim: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """AP and top-1 per query; rows/cols already in tie-break (fragment id) order."""
    n = sim.shape[0]
    s = sim.copy()
    np.fill_diagonal(s, -np.inf)
    order = np.argsort(-s, axis=1, kind="stable")[:, : n - 1]
    rel = labels[order] == labels[:, None]
    hits = rel.sum(axis=1)
    prec = np.cumsum(rel, axis=1) / np.arange(1, n, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        ap = np.where(hits > 0, (prec * rel).sum(axis=1) / hits, np.nan)
    top1 = np.where(hits > 0, rel[:, 0].astype(np.float64), np.nan)
    return ap, top1


@njit
def _ap_loops(sim, labels, ap, top1):
    n = sim.shape[0]
    for q in range(n):
        row = np.empty(n - 1)
        idx = np.empty(n - 1, dtype=np.int64)
        m = 0
        for j in range(n):
            if j != q:
                row[m] = -sim[q, j]
                idx[m] = j
                m += 1
        order = np.argsort(row, kind="mergesort")
        hits = 0
        acc = 0.0
        first = 0.0
        for r in range(n - 1):
            if labels[idx[order[r]]] == labels[q]:
                hits += 1
                acc += hits / (r + 1.0)
                if r == 0:
                    first = 1.0
        if hits > 0:
            ap[q] = acc / hits
            top1[q] = first
        else:
            ap[q] = np.nan
            top1[q] = np.nan
    return ap, top1


def _ap_numba(sim: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = sim.shape[0]
    return _ap_loops(np.ascontiguousarray(sim), labels, np.empty(n), np.empty(n))


_ap_kernel = pick(_ap_numba, _ap_numpy)


@dataclass
class RetrievalReport:
    label_kind: str
    fragment_ids: list[str]
    average_precision: np.ndarray  # NaN for queries without a relevant item
    top1_hits: np.ndarray
    mAP: float
    top1: float
    query_count: int
    valid_queries: int
    meta: dict = field(default_factory=dict)

    @property
    def excluded_queries(self) -> int:
        return self.query_count - self.valid_queries


def cosine_similarity(matrix: np.ndarray) -> np.ndarray:
    x = _normalize_rows(np.asarray(matrix, dtype=np.float64))
    return x @ x.T


def ranked_indices(ds: DescriptorSet, query: int) -> np.ndarray:
    """Gallery indices for one query, best first, query itself excluded; ties by fragment id."""
    sim = cosine_similarity(ds.matrix)[query]
    others = np.array([j for j in range(len(ds)) if j != query], dtype=np.int64)
    ids = np.asarray(ds.fragment_ids, dtype=object).astype(str)[others]
    order = np.lexsort((ids, -sim[others]))
    return others[order]


def rank_leave_one_out(ds: DescriptorSet, label_kind: str = "writer", kernel=None) -> RetrievalReport:
    """Every descriptor queries all others by cosine similarity.

    Ties are broken by ascending fragment id. Queries with no relevant item
    are excluded from the aggregates and counted in the report.
    """
    n = len(ds)
    if n < 2:
        raise ConfigError("leave-one-out ranking needs at least 2 descriptors")
    names = ds.labels(label_kind)
    _, label_ints = np.unique(np.asarray(names, dtype=object).astype(str), return_inverse=True)
    perm = np.argsort(np.asarray(ds.fragment_ids, dtype=object).astype(str), kind="stable")
    sim = cosine_similarity(ds.matrix)[np.ix_(perm, perm)]
    ap_p, top_p = (kernel or _ap_kernel)(sim, label_ints[perm].astype(np.int64))
    ap = np.empty(n)
    top = np.empty(n)
    ap[perm] = ap_p
    top[perm] = top_p
    valid = ~np.isnan(ap)
    nvalid = int(valid.sum())
    if nvalid == 0:
        log.warning("%s retrieval: no query has a relevant item; aggregates set to 0", label_kind)
        m_ap = t1 = 0.0
    else:
        m_ap, t1 = float(ap[valid].mean()), float(top[valid].mean())
    if nvalid < n:
        log.info("%s retrieval: %d of %d queries have no relevant item", label_kind, n - nvalid, n)
    return RetrievalReport(label_kind, list(ds.fragment_ids), ap, top, m_ap, t1, n, nvalid)


def evaluate_descriptors(
    ds: DescriptorSet,
    label_kinds=LABEL_KINDS,
    whiten: bool = True,
    whiten_dim: int = DEFAULT_WHITEN_DIM,
    eps: float = WHITEN_EPS,
) -> dict[str, RetrievalReport]:
    """Optional gallery-fitted PCA whitening, then one leave-one-out ranking per label kind."""
    meta = {"whiten": bool(whiten), "whiten_fit": "evaluation gallery" if whiten else "none"}
    if whiten:
        bound = min(len(ds) - 1, ds.dim)
        d = min(whiten_dim, bound)
        if d < whiten_dim:
            log.warning("whitening dim %d exceeds min(N-1, D) = %d; using %d", whiten_dim, bound, d)
        meta["whiten_dim_requested"] = whiten_dim
        meta["whiten_dim"] = d
        ds = apply_whiten(fit_whiten(ds, d, eps), ds)
    reports = {}
    for kind in label_kinds:
        rep = rank_leave_one_out(ds, kind)
        rep.meta.update(meta)
        rep.meta["descriptor_dim"] = ds.dim
        reports[kind] = rep
    return reports


def evaluate(model, images, records, whiten: bool = True, whiten_dim: int = DEFAULT_WHITEN_DIM):
    """Extract descriptors once, rank for writer and page labels."""
    ds = extract_descriptors(model, images, records)
    return evaluate_descriptors(ds, whiten=whiten, whiten_dim=whiten_dim)


# -- files ------------------------------------------------------------------------


def save_descriptors(path, ds: DescriptorSet) -> None:
    """Header manifest, little-endian f32 matrix, then a TSV label table."""
    header = {
        "n": len(ds),
        "d": ds.dim,
        "dtype": "<f4",
        "label_schema": list(LABEL_SCHEMA),
        "checkpoint_hash": ds.meta.get("checkpoint_hash"),
        "meta": ds.meta,
    }
    hbytes = json.dumps(header, indent=1, sort_keys=True).encode()
    table = "\t".join(LABEL_SCHEMA) + "\n"
    table += "".join(f"{f}\t{w}\t{p}\n" for f, w, p in zip(ds.fragment_ids, ds.writer_ids, ds.page_ids))
    blob = _MAGIC + f"{len(hbytes)}\n".encode() + hbytes
    blob += ds.matrix.astype("<f4").tobytes() + table.encode()
    Path(path).write_bytes(blob)


def load_descriptors(path) -> DescriptorSet:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise DataError(f"{path}: not a fragmix descriptor file")
    rest = blob[len(_MAGIC) :]
    nl = rest.find(b"\n")
    hlen = int(rest[:nl])
    header = json.loads(rest[nl + 1 : nl + 1 + hlen])
    body = rest[nl + 1 + hlen :]
    n, d = header["n"], header["d"]
    nbytes = n * d * 4
    matrix = np.frombuffer(body[:nbytes], dtype="<f4").reshape(n, d).astype(np.float32)
    lines = body[nbytes:].decode().splitlines()
    if not lines or tuple(lines[0].split("\t")) != LABEL_SCHEMA:
        raise DataError(f"{path}: label table header missing or malformed")
    rows = [ln.split("\t") for ln in lines[1:]]
    if len(rows) != n:
        raise DataError(f"{path}: {len(rows)} label rows for {n} descriptors")
    f, w, p = (list(col) for col in zip(*rows)) if rows else ([], [], [])
    return DescriptorSet(matrix, f, w, p, header.get("meta", {}))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def format_report_kv(report: RetrievalReport) -> str:
    """Machine-parseable ``key=value`` lines (one report)."""
    items = {
        "label_kind": report.label_kind,
        "mAP": f"{report.mAP:.10f}",
        "top1": f"{report.top1:.10f}",
        "queries": report.query_count,
        "valid_queries": report.valid_queries,
        "excluded_queries": report.excluded_queries,
    }
    for k in sorted(report.meta):
        v = report.meta[k]
        items[k] = json.dumps(v) if not isinstance(v, str) else v
    return "".join(f"{k}={v}\n" for k, v in items.items())


def parse_report_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def format_table(reports: dict[str, RetrievalReport], row_label: str = "Ours") -> str:
    """Writer/page mAP and Top-1 in percent, laid out as a two-group results table."""
    w, p = reports.get("writer"), reports.get("page")

    def cells(r):
        return ("n.a.", "n.a.") if r is None else (f"{100 * r.mAP:.1f}", f"{100 * r.top1:.1f}")

    rows = [
        ("", "Writer", "", "Page", ""),
        ("", "mAP", "Top-1", "mAP", "Top-1"),
        (row_label, *cells(w), *cells(p)),
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    widths = [max(widths[0], 8)] + [max(x, 6) for x in widths[1:]]

    def fmt(r):
        return (
            f"{r[0]:<{widths[0]}} | {r[1]:>{widths[1]}} {r[2]:>{widths[2]}} | "
            f"{r[3]:>{widths[3]}} {r[4]:>{widths[4]}}"
        )

    rule = "-" * len(fmt(rows[2]))
    return "\n".join([fmt(rows[0]), fmt(rows[1]), rule, fmt(rows[2])]) + "\n"
