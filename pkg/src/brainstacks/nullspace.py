"""Null-space projectors built from frozen-stack output deltas.

Before a new domain trains, the aggregate delta of all frozen stacks is
sampled at every injection site on earlier domains' validation tokens.  The
top right singular vectors ``V`` of that sample matrix span the directions
the frozen stacks write to; the active stack's output is then projected
onto the orthogonal complement, ``delta - delta V V^T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, DimensionError, NumericError, StateError

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-8


@dataclass
class DeltaMatrix:
    site: str
    D: np.ndarray
    source_domains: list[str]


@dataclass
class Projector:
    site: str
    V: np.ndarray
    singular_values: np.ndarray
    n_samples: int

    @property
    def k_dirs(self) -> int:
        return self.V.shape[1]

    @property
    def h_dim(self) -> int:
        return self.V.shape[0]

    @property
    def P(self) -> np.ndarray:
        V = self.V.astype(np.float64)
        return V @ V.T


def randomized_svd(
    D: np.ndarray,
    k: int,
    oversample: int = 8,
    power_iters: int = 2,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` right singular vectors and values of ``D`` [n, h].

    Uses a Gaussian sketch with power iterations when ``n > 2k`` and an exact
    SVD with truncation otherwise.  Columns of the returned ``V`` [h, k] are
    sign-normalized so the largest-magnitude entry is positive.
    """
    D = np.asarray(D, dtype=np.float64)
    n, h = D.shape
    if k < 1 or k > min(n, h):
        raise ValueError(f"k={k} must lie in [1, min(n, h)={min(n, h)}]")
    if n > 2 * k:
        rng = np.random.Generator(np.random.Philox(seed))
        width = min(k + oversample, min(n, h))
        omega = rng.standard_normal((h, width))
        Q, _ = np.linalg.qr(D @ omega)
        for _ in range(power_iters):
            Z, _ = np.linalg.qr(D.T @ Q)
            Q, _ = np.linalg.qr(D @ Z)
        _, s, vt = np.linalg.svd(Q.T @ D, full_matrices=False)
    else:
        _, s, vt = np.linalg.svd(D, full_matrices=False)
    V = vt[:k].T.copy()
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    return V * signs, s[:k].copy()


def build_projector(V: np.ndarray, site: str = "", singular_values=None, n_samples: int = 0) -> Projector:
    """Wrap orthonormal columns ``V`` [h, K] as a projector ``P = V V^T``."""
    V = np.asarray(V)
    if V.ndim != 2:
        raise DimensionError(f"V must be 2-D, got shape {V.shape}")
    Vd = V.astype(np.float64)
    gram = Vd.T @ Vd
    dev = float(np.max(np.abs(gram - np.eye(V.shape[1])))) if V.size else 0.0
    if dev > 1e-4:
        raise NumericError(f"V columns are not orthonormal (max Gram deviation {dev:.2e})")
    sv = np.zeros(V.shape[1]) if singular_values is None else np.asarray(singular_values, dtype=np.float64)
    return Projector(site=site, V=V, singular_values=sv, n_samples=n_samples)


def project(delta, projector: Projector | np.ndarray):
    """Remove the component of ``delta`` (last dim h) lying in span(V).

    Accepts either a :class:`Projector` or a dense ``P`` matrix.  Tensors stay
    differentiable.
    """
    if isinstance(projector, Projector):
        V = projector.V
        h = V.shape[0]
    else:
        V = None
        P = np.asarray(projector)
        h = P.shape[0]
    if delta.shape[-1] != h:
        raise DimensionError(f"delta last dim {delta.shape[-1]} does not match projector dim {h}")
    if isinstance(delta, Tensor):
        if V is None:
            P = P.astype(delta.dtype)

            def apply(a):
                return a - a @ P

        else:
            Vd = V.astype(delta.dtype)

            def apply(a):
                return a - (a @ Vd) @ Vd.T

        # the map is symmetric, so the backward applies the same projection
        return ad._result(apply(delta.data), (delta,), lambda g: (apply(g),))
    delta = np.asarray(delta)
    if V is None:
        return delta - delta @ P
    return delta - (delta @ V) @ V.T


def collect_deltas(
    model,
    prev_val_batches: list,
    n_samples: int,
    seed: int = 0,
    source_domains: list[str] | None = None,
    weights: dict[str, float] | None = None,
) -> dict[str, DeltaMatrix]:
    """Sample the frozen stacks' aggregate output delta at every site.

    Args:
        model: A :class:`~brainstacks.model.BaseModel` with frozen stacks.
        prev_val_batches: Batches (``Batch`` objects) from earlier domains'
            validation sets.
        n_samples: Rows to draw uniformly (seeded) from valid token positions.
        weights: Domain gate weights during capture; all stacks on by default.

    Returns:
        Mapping from site id to its delta matrix of shape [n_samples, d_out].
    """
    if not any(layer.frozen for layer in model.stacked_layers()):
        raise StateError("collect_deltas needs at least one frozen stack")
    captured: dict[str, list[np.ndarray]] = {}
    total_valid = 0
    saved = model.domain_weights()
    model.set_domain_weights(weights or {})
    try:
        with ad.no_grad():
            for batch in prev_val_batches:
                model.set_capture(True)
                model.forward(batch.tokens, mode="eval")
                valid = batch.valid.reshape(-1).astype(bool)
                total_valid += int(valid.sum())
                for layer in model.stacked_layers():
                    d = layer.captured
                    if d is None:
                        d = np.zeros((valid.size, layer.d_out), dtype=np.float32)
                    captured.setdefault(layer.site_id, []).append(d.reshape(-1, layer.d_out)[valid])
    finally:
        model.set_capture(False)
        model.set_domain_weights(saved)
    if total_valid < n_samples:
        raise DataError(f"need {n_samples} token positions, only {total_valid} available")
    rng = np.random.Generator(np.random.Philox(seed))
    rows = np.sort(rng.choice(total_valid, size=n_samples, replace=False))
    out = {}
    for site, chunks in captured.items():
        D = np.concatenate(chunks, axis=0)[rows]
        out[site] = DeltaMatrix(site=site, D=D, source_domains=list(source_domains or []))
    return out


def projectors_from_deltas(
    deltas: dict[str, DeltaMatrix],
    k_dirs: int,
    seed: int = 0,
    oversample: int = 8,
    power_iters: int = 2,
) -> dict[str, Projector]:
    """Build one projector per site; degenerate (near-zero) sites are skipped."""
    projectors = {}
    for i, (site, dm) in enumerate(sorted(deltas.items())):
        if np.linalg.norm(dm.D) < DEGENERATE_NORM:
            log.warning("skipping projector at %s: aggregate delta is ~0", site)
            continue
        k = min(k_dirs, *dm.D.shape)
        V, s = randomized_svd(dm.D, k, oversample, power_iters, seed=seed + i)
        # stored and applied in float32 so a reloaded projector acts identically
        projectors[site] = build_projector(V.astype(np.float32), site=site, singular_values=s, n_samples=dm.D.shape[0])
    return projectors


def subspace_leakage(D: np.ndarray, projector: Projector) -> float:
    """``||D V|| / ||D||`` -- the share of ``D`` inside the projector's span."""
    norm = np.linalg.norm(D)
    if norm == 0:
        return 0.0
    return float(np.linalg.norm(np.asarray(D, dtype=np.float64) @ projector.V) / norm)


def principal_angles_deg(V1: np.ndarray, V2: np.ndarray) -> np.ndarray:
    """Principal angles (degrees) between the column spans of V1 and V2."""
    Q1, _ = np.linalg.qr(V1)
    Q2, _ = np.linalg.qr(V2)
    cos = np.clip(np.linalg.svd(Q1.T @ Q2, compute_uv=False), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


@dataclass
class OrthogonalityReport:
    cross: list[dict] = field(default_factory=list)
    spectra: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    capacity: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"cross": self.cross, "spectra": self.spectra, "capacity": self.capacity}


def orthogonality_report(projectors_by_domain: dict[str, dict[str, Projector]], top: int = 3) -> OrthogonalityReport:
    """Cross-domain |cos| between top principal directions, spectra, capacity."""
    report = OrthogonalityReport()
    domains = list(projectors_by_domain)
    for d in domains:
        projs = projectors_by_domain[d]
        report.spectra[d] = {site: [float(v) for v in p.singular_values] for site, p in sorted(projs.items())}
        if projs:
            report.capacity[d] = float(np.mean([p.k_dirs / p.h_dim for p in projs.values()]))
    for i, a in enumerate(domains):
        for b in domains[i + 1 :]:
            pa, pb = projectors_by_domain[a], projectors_by_domain[b]
            for site in sorted(set(pa) & set(pb)):
                va = pa[site].V[:, :top]
                vb = pb[site].V[:, :top]
                cos = np.clip(np.abs(va.T @ vb), 0.0, 1.0)
                report.cross.append(
                    {
                        "site": site,
                        "domain_a": a,
                        "domain_b": b,
                        "abs_cos": cos.round(6).tolist(),
                        "max_abs_cos": float(cos.max()),
                        "mean_abs_cos": float(cos.mean()),
                    }
                )
    return report
