"""Retrieval metrics, modality-gap statistics, PCA projection and report files."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .data import MultimodalPair
from .errors import ArgumentError, ContractError
from .model import Model, embed_batch, forward_logits_batch
from .prompting import build_embedding_instruction, build_language_instruction
from .trainer import lm_targets

KS = (1, 5, 10)
UNIT_TOL = 1e-9
EMBED_CHUNK = 64


@dataclass
class DirectionRecall:
    r1: float
    r5: float
    r10: float
    p1: float


@dataclass
class RetrievalReport:
    n: int
    i2t: DirectionRecall
    t2i: DirectionRecall


@dataclass
class GapReport:
    centroid_gap: float
    matched_cos: float
    mismatched_cos: float


# -- metrics ----------------------------------------------------------------
def _check_unit(h: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(h, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"rows of {name} are not unit-norm")


def similarity_matrix(hv: np.ndarray, ht: np.ndarray) -> np.ndarray:
    """Cosine similarities between unit rows: ``hv @ ht.T``."""
    hv, ht = np.asarray(hv, dtype=np.float64), np.asarray(ht, dtype=np.float64)
    if hv.ndim != 2 or ht.ndim != 2 or hv.shape[1] != ht.shape[1]:
        raise ArgumentError(f"incompatible embedding shapes {hv.shape} and {ht.shape}")
    _check_unit(hv, "hv")
    _check_unit(ht, "ht")
    return hv @ ht.T


def diagonal_ranks(s: np.ndarray) -> np.ndarray:
    """0-based rank of ``s[i, i]`` within row ``i`` (descending, ties to lower index)."""
    s = np.asarray(s)
    diag = np.diag(s)[:, None]
    idx = np.arange(s.shape[1])[None, :]
    ahead = (s > diag) | ((s == diag) & (idx < np.arange(s.shape[0])[:, None]))
    return ahead.sum(axis=1)


def _direction(ranks: np.ndarray, ks: Sequence[int]) -> DirectionRecall:
    r = {k: float(np.mean(ranks < k)) for k in ks}
    return DirectionRecall(r[1], r[5], r[10], r[1])


def recall_at_k(s: np.ndarray) -> RetrievalReport:
    """Recall@{1,5,10} and Precision@1 for both directions; pair ``i`` matches ``i``."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] == 0:
        raise ArgumentError(f"recall needs a non-empty square score matrix, got {s.shape}")
    return RetrievalReport(s.shape[0], _direction(diagonal_ranks(s), KS), _direction(diagonal_ranks(s.T), KS))


def modality_gap(hv: np.ndarray, ht: np.ndarray) -> GapReport:
    hv, ht = np.asarray(hv, dtype=np.float64), np.asarray(ht, dtype=np.float64)
    if hv.shape != ht.shape or hv.ndim != 2:
        raise ArgumentError(f"gap needs matched embedding sets, got {hv.shape} and {ht.shape}")
    n = hv.shape[0]
    if n == 0:
        raise ArgumentError("gap of an empty set")
    _check_unit(hv, "hv")
    _check_unit(ht, "ht")
    s = hv @ ht.T
    matched = float(np.trace(s) / n)
    mismatched = float((s.sum() - np.trace(s)) / (n * (n - 1))) if n > 1 else float("nan")
    gap = float(np.linalg.norm(hv.mean(axis=0) - ht.mean(axis=0)))
    return GapReport(gap, matched, mismatched)


def pca_2d(h: np.ndarray) -> np.ndarray:
    """Project centered rows onto the top two principal axes.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 2:
        raise ArgumentError("pca_2d needs at least two rows")
    centered = h - h.mean(axis=0)
    cov = centered.T @ centered / (h.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order]
    if comps.shape[1] < 2:
        comps = np.pad(comps, ((0, 0), (0, 2 - comps.shape[1])))
    for j in range(comps.shape[1]):
        k = np.argmax(np.abs(comps[:, j]))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    return centered @ comps


# -- model-driven evaluation --------------------------------------------------
def _chunks(items: Sequence, size: int) -> list[Sequence]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def embed_pairs(m: Model, pairs: Sequence[MultimodalPair], modality: str, threads: int = 1) -> np.ndarray:
    """Embeddings of ``pairs`` for ``modality`` in {image, text, both}; rows follow ``pairs``.

    Chunking is fixed, so results do not depend on ``threads``.
    """
    v = m.vocab
    if modality == "image":
        insts = [build_embedding_instruction(v, image=p.patches) for p in pairs]
    elif modality == "text":
        insts = [build_embedding_instruction(v, text=p.caption) for p in pairs]
    elif modality == "both":
        insts = [build_embedding_instruction(v, image=p.patches, text=p.caption) for p in pairs]
    else:
        raise ArgumentError(f"unknown modality {modality!r}")
    if not insts:
        return np.zeros((0, m.config.d_model))
    chunks = _chunks(insts, EMBED_CHUNK)

    def run(chunk):
        return embed_batch(m, chunk).data

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def caption_nll(m: Model, pairs: Sequence[MultimodalPair]) -> float:
    """Token-weighted mean next-token NLL of the captions (answer tokens + EOS)."""
    total, count = 0.0, 0
    for chunk in _chunks(list(pairs), EMBED_CHUNK):
        insts = [build_language_instruction(m.vocab, p) for p in chunk]
        logits = forward_logits_batch(m, insts).data
        targets, mask = lm_targets(insts)
        z = logits[:, :-1]
        z = z - z.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, targets[:, 1:, None], axis=-1)[..., 0]
        total -= float(picked[mask[:, 1:]].sum())
        count += int(mask[:, 1:].sum())
    return total / count


def caption_perplexity(m: Model, pairs: Sequence[MultimodalPair]) -> float:
    return math.exp(caption_nll(m, pairs))


def evaluate_embeddings(hv: np.ndarray, ht: np.ndarray) -> tuple[RetrievalReport, GapReport]:
    return recall_at_k(similarity_matrix(hv, ht)), modality_gap(hv, ht)


def evaluate_model(m: Model, pairs: Sequence[MultimodalPair], threads: int = 1):
    hv = embed_pairs(m, pairs, "image", threads)
    ht = embed_pairs(m, pairs, "text", threads)
    report, gap = evaluate_embeddings(hv, ht)
    return report, gap, hv, ht


# -- report files -------------------------------------------------------------
def report_dict(report: RetrievalReport, gap: GapReport | None = None) -> dict:
    out = {"n": report.n, "i2t": asdict(report.i2t), "t2i": asdict(report.t2i)}
    if gap is not None:
        out["gap"] = asdict(gap)
    return out


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_report_json(report: RetrievalReport, gap: GapReport | None, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_json_safe(report_dict(report, gap)), indent=2) + "\n", encoding="utf-8")


def write_coords_csv(coords_img: np.ndarray, coords_txt: np.ndarray, path: str | Path) -> None:
    lines = ["modality,x,y"]
    lines += [f"image,{x!r},{y!r}" for x, y in coords_img.tolist()]
    lines += [f"text,{x!r},{y!r}" for x, y in coords_txt.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


SVG_SIZE = 800
SVG_MARGIN = 60
IMAGE_FILL = "#1f77b4"
TEXT_FILL = "#ff7f0e"


def render_scatter_svg(coords_img: np.ndarray, coords_txt: np.ndarray, title: str = "") -> str:
    pts = np.concatenate([coords_img, coords_txt]) if len(coords_img) + len(coords_txt) else np.zeros((0, 2))
    lo = pts.min(axis=0) if len(pts) else np.zeros(2)
    hi = pts.max(axis=0) if len(pts) else np.ones(2)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    inner = SVG_SIZE - 2 * SVG_MARGIN

    def xy(p):
        u = (p - lo) / span
        return SVG_MARGIN + u[0] * inner, SVG_SIZE - SVG_MARGIN - u[1] * inner

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_SIZE}" height="{SVG_SIZE}" '
        f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
        f'<rect x="0" y="0" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{SVG_SIZE / 2}" y="30" text-anchor="middle" font-size="18">{escape(title)}</text>')
    out.append('<g id="points">')
    for fill, coords in ((IMAGE_FILL, coords_img), (TEXT_FILL, coords_txt)):
        for p in coords:
            x, y = xy(p)
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{fill}" fill-opacity="0.7"/>')
    out.append("</g>")
    # legend uses rect markers so circle count stays 2N
    out.append('<g id="legend" font-size="14">')
    for k, (fill, label) in enumerate(((IMAGE_FILL, "image"), (TEXT_FILL, "text"))):
        y = SVG_MARGIN + 22 * k
        out.append(f'<rect x="{SVG_SIZE - 150}" y="{y - 10}" width="12" height="12" fill="{fill}"/>')
        out.append(f'<text x="{SVG_SIZE - 130}" y="{y}">{label}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_reports(report: RetrievalReport, gap: GapReport, hv: np.ndarray, ht: np.ndarray,
                 json_path=None, svg_path=None, csv_path=None, title: str = "") -> np.ndarray:
    """Write the JSON report, PCA scatter SVG and coordinate CSV; returns the joint coordinates."""
    coords = pca_2d(np.concatenate([hv, ht]))
    n = len(hv)
    if json_path is not None:
        write_report_json(report, gap, json_path)
    if svg_path is not None:
        Path(svg_path).write_text(render_scatter_svg(coords[:n], coords[n:], title), encoding="utf-8")
    if csv_path is not None:
        write_coords_csv(coords[:n], coords[n:], csv_path)
    return coords
