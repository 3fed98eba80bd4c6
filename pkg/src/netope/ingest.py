"""Real-network datasets: feature/edge loading and PCA context reduction."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import FormatError, NumericError, ParameterError
from .graph import NetworkGraph, read_edge_list, write_edge_list

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawNetworkDataset:
    features: np.ndarray
    graph: NetworkGraph
    stats: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def d_raw(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_edges(self) -> int:
        return self.graph.n_edges


def read_features(path: Union[str, Path]) -> np.ndarray:
    """Header-less numeric CSV, one row per unit; ragged rows are a format error."""
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
            try:
                rows.append(np.array(parts, dtype=float))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise FormatError(f"{path}: no feature rows")
    return np.vstack(rows)


def load_dataset(features_path: Union[str, Path], edges_path: Union[str, Path]) -> RawNetworkDataset:
    """Load features and edges, then drop self-loops and duplicates and symmetrize."""
    X = read_features(features_path)
    n = X.shape[0]
    pairs, stats = read_edge_list(edges_path, n=n)
    graph = NetworkGraph.from_edges(n, pairs)
    stats = dict(stats)
    stats["duplicates"] = int(stats["lines"] - stats["self_loops"] - graph.n_edges)
    if stats["self_loops"]:
        logger.warning("dropped %d self-loop line(s) from %s", stats["self_loops"], edges_path)
    logger.info("loaded n=%d |E|=%d d_raw=%d", n, graph.n_edges, X.shape[1])
    return RawNetworkDataset(X, graph, stats)


# --------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PCAResult:
    scores: np.ndarray  # (n, k)
    components: np.ndarray  # (d, k), unit columns
    eigenvalues: np.ndarray  # (k,) descending
    mean: np.ndarray
    total_variance: float

    @property
    def variance_captured(self) -> float:
        return float(self.eigenvalues.sum() / self.total_variance) if self.total_variance > 0 else 1.0


def top_eigenpairs(
    C: np.ndarray,
    k: int,
    oversample: int = 10,
    tol: float = 1e-12,
    max_iter: int = 5000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``k`` eigenpairs of a symmetric PSD matrix by subspace iteration.

    Iterates an orthonormal block of ``k + oversample`` vectors with
    Rayleigh-Ritz extraction until the top-``k`` residuals
    ``||C v - lambda v||`` fall below ``tol * ||C||``.
    """
    d = C.shape[0]
    if not 1 <= k <= d:
        raise ParameterError(f"k must lie in [1, {d}], got {k}")
    m = min(d, k + oversample)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, m)))
    scale = max(np.linalg.norm(C, 2) if d <= 64 else np.abs(C).sum(axis=1).max(), np.finfo(float).tiny)
    for _ in range(max_iter):
        Z = C @ Q
        # Rayleigh-Ritz on the current block
        T = Q.T @ Z
        evals, evecs = np.linalg.eigh((T + T.T) / 2)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        V = Q @ evecs
        resid = np.linalg.norm(Z @ evecs[:, :k] - V[:, :k] * evals[:k], axis=0)
        # with a full basis the Ritz pairs are exact
        if np.all(resid <= tol * scale) or m == d:
            return evals[:k], V[:, :k]
        Q, _ = np.linalg.qr(Z @ evecs)
    raise NumericError(f"subspace iteration did not converge in {max_iter} iterations")


def _fix_signs(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def pca(features: np.ndarray, k: int, scale: bool = False, **kwargs) -> PCAResult:
    """Center (optionally standardize) and project onto the top-``k`` components.

    Each component's largest-magnitude loading is made positive.
    """
    X = np.asarray(features, dtype=float)
    n, d = X.shape
    if not 1 <= k <= min(n, d):
        raise ParameterError(f"k must lie in [1, min(n, d)={min(n, d)}], got {k}")
    mean = X.mean(axis=0)
    Xc = X - mean
    if scale:
        sd = Xc.std(axis=0)
        Xc = Xc / np.where(sd > 0, sd, 1.0)
    C = Xc.T @ Xc / max(n - 1, 1)
    evals, V = top_eigenpairs(C, k, **kwargs)
    V = _fix_signs(V)
    return PCAResult(Xc @ V, V, np.maximum(evals, 0.0), mean, float(np.trace(C)))


def pca_reduce(features: np.ndarray, k: int, scale: bool = False) -> np.ndarray:
    return pca(features, k, scale).scores


def pca_rank_order(features: np.ndarray, component: int = 1) -> np.ndarray:
    """Units sorted by their first principal score, ties broken by unit index."""
    if component != 1:
        raise ParameterError("only the first principal component is supported")
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if np.allclose(X, X[0]):
        return np.arange(X.shape[0])
    scores = pca(X, 1).scores[:, 0]
    return np.lexsort((np.arange(X.shape[0]), scores))


# --------------------------------------------------------------------------
# on-disk prepared dataset: contexts.csv, edges.txt, manifest.json


def write_prepared(out_dir: Union[str, Path], contexts: np.ndarray, graph: NetworkGraph, manifest: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "contexts.csv", contexts, delimiter=",", fmt="%.17g")
    write_edge_list(graph, out / "edges.txt")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_prepared(in_dir: Union[str, Path]) -> tuple[np.ndarray, NetworkGraph, dict]:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    X = read_features(d / "contexts.csv")
    pairs, _ = read_edge_list(d / "edges.txt", n=X.shape[0])
    return X, NetworkGraph.from_edges(X.shape[0], pairs), manifest


def ingest(features_path, edges_path, k: int, out_dir, scale: bool = False) -> dict:
    """Load, reduce to ``k`` dimensions and write the prepared dataset; returns the manifest."""
    raw = load_dataset(features_path, edges_path)
    res = pca(raw.features, k, scale=scale)
    manifest = {
        "n": raw.n,
        "edges": raw.n_edges,
        "d_raw": raw.d_raw,
        "k": k,
        "variance_captured": res.variance_captured,
        "self_loops_dropped": raw.stats.get("self_loops", 0),
        "duplicates_dropped": raw.stats.get("duplicates", 0),
        "scaled": scale,
    }
    write_prepared(out_dir, res.scores, raw.graph, manifest)
    return manifest
