"""Curvature diagnostics: disc analysis, noise studies, true-Fisher checks, exports.

These are read-only consumers of network captures and factor snapshots; nothing
here mutates training state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .kfactor import KFState
from .nn import Network, nll_softmax_loss
from .tensor import SeededRng, as_f64, sym_eig

PARAM_KEY_ORDER = ("weight", "scale", "shift")


@dataclass
class GershgorinReport:
    centers: np.ndarray
    radii: np.ndarray
    eigenvalues: np.ndarray
    kaiser_count: int
    diag_energy_ratio: float
    snr_db: float | None = None

    def to_json(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "radii": self.radii.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "kaiser_count": self.kaiser_count,
            "diag_energy_ratio": self.diag_energy_ratio,
            "snr_db": None if self.snr_db is None or math.isinf(self.snr_db) else self.snr_db,
        }


def gershgorin_report(m, m_perturbed=None) -> GershgorinReport:
    """Disc centers/radii, spectrum, Kaiser count and diagonal energy of ``m``.

    ``kaiser_count`` counts eigenvalues above the mean eigenvalue. When a
    perturbed copy is supplied the off-diagonal SNR against it is included.
    """
    m = as_f64(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError("gershgorin_report expects a square matrix")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if float(np.max(np.abs(m - m.T), initial=0.0)) > 1e-9 * scale:
        raise ValidationError("matrix is not symmetric")
    centers = np.diag(m).copy()
    radii = np.sum(np.abs(m), axis=1) - np.abs(centers)
    vals, _ = sym_eig(m)
    kaiser = int(np.sum(vals > vals.mean()))
    total = float(np.sum(m * m))
    ratio = float(np.sum(centers**2) / total) if total > 0 else 1.0
    snr = None if m_perturbed is None else snr_offdiag(m, m_perturbed)
    return GershgorinReport(centers, radii, vals, kaiser, ratio, snr)


def snr_offdiag(m, m_perturbed) -> float:
    """10*log10(diagonal energy of m / upper-triangle energy of the perturbed copy).

    Returns ``math.inf`` when the perturbed off-diagonal energy is zero; JSON
    reports carry that sentinel as null.
    """
    m = as_f64(m)
    mp = as_f64(m_perturbed)
    if m.shape != mp.shape:
        raise DimensionError("matrices must share a shape")
    signal = float(np.sum(np.diag(m) ** 2))
    iu = np.triu_indices(m.shape[0], k=1)
    noise = float(np.sum(mp[iu] ** 2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


def perturb_offdiag(m, sigma: float, rng: SeededRng) -> np.ndarray:
    """Add symmetrized gaussian noise N(0, sigma^2) to off-diagonal entries only."""
    m = as_f64(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError("perturb_offdiag expects a square matrix")
    n = m.shape[0]
    e = sigma * rng.gaussian(n * n).reshape(n, n)
    np.fill_diagonal(e, 0.0)
    return m + 0.5 * (e + e.T)


def perturbation_shift_report(m, sigma: float, rng: SeededRng, draws: int = 8) -> dict:
    """Relative eigenvalue shift under off-diagonal noise, split by the Kaiser screen.

    Shifts are |lambda_perturbed - lambda| / max(|lambda|, tiny), averaged over
    ``draws`` independent noise realizations; the split compares eigenvalues
    above the mean eigenvalue against the rest.
    """
    m = as_f64(m)
    vals, _ = sym_eig(m)
    floor = 1e-12 * max(1.0, float(np.max(np.abs(vals))))
    rel = np.zeros_like(vals)
    for _ in range(draws):
        vals_p, _ = sym_eig(perturb_offdiag(m, sigma, rng))
        rel += np.abs(vals - vals_p) / np.maximum(np.abs(vals), floor)
    rel /= draws
    passing = vals > vals.mean()
    return {
        "sigma": sigma,
        "draws": draws,
        "mean_shift_kaiser": float(rel[passing].mean()) if passing.any() else 0.0,
        "mean_shift_rest": float(rel[~passing].mean()) if (~passing).any() else 0.0,
    }


def param_key_sequence(net: Network):
    """Canonical (layer_id, key) order used to flatten per-parameter vectors."""
    seq = []
    for lid, layer in net.parametric_layers():
        for key in PARAM_KEY_ORDER:
            if key in layer.params:
                seq.append((lid, key, layer.params[key].shape))
    return seq


def flatten_param_dict(net: Network, values: dict) -> np.ndarray:
    """Concatenate per-layer arrays into one vector in canonical order."""
    return np.concatenate([values[lid][key].ravel() for lid, key, _ in param_key_sequence(net)])


def true_fisher_diag_mc(net: Network, inputs, samples_per_input: int, rng: SeededRng) -> np.ndarray:
    """Monte-Carlo diagonal of the true Fisher E_y[g g^T] under the model.

    For each input the label is sampled ``samples_per_input`` times from the
    model's softmax; class draws with identical labels share one backward pass,
    so the estimate is accumulated as count-weighted squared per-sample
    gradients. Averaged over inputs.
    """
    if samples_per_input < 1:
        raise ValidationError("samples_per_input must be >= 1")
    inputs = as_f64(inputs)
    total = None
    for i in range(inputs.shape[0]):
        x = inputs[i:i + 1]
        logits = net.forward(x, training=True)
        probs = np.exp(logits - logits.max())
        probs = (probs / probs.sum()).ravel()
        draws = rng.categorical(probs, samples_per_input)
        counts = np.bincount(draws, minlength=probs.size)
        acc = None
        for c in np.nonzero(counts)[0]:
            net.forward(x, training=True)
            _, dlogits = nll_softmax_loss(logits, np.array([c]))
            grads = net.backward(dlogits)
            gvec = flatten_param_dict(net, grads)
            contrib = (counts[c] / samples_per_input) * gvec * gvec
            acc = contrib if acc is None else acc + contrib
        total = acc if total is None else total + acc
    return total / inputs.shape[0]


def kf_fisher_diag(net: Network, state: KFState) -> np.ndarray:
    """Diagonal of the EMA'd factor product (no normalization, no damping),
    flattened in the same canonical order as :func:`true_fisher_diag_mc`."""
    parts = {}
    for lid, layer in net.parametric_layers():
        h = state.h[lid]
        s = state.s[lid]
        if layer.kind in ("dense", "conv2d"):
            parts[lid] = {"weight": np.outer(s, h)}
        else:
            parts[lid] = {"scale": s * h, "shift": s.copy()}
    return flatten_param_dict(net, parts)


def fisher_mae(true_diag, approx_diag) -> float:
    true_diag = as_f64(true_diag)
    approx_diag = as_f64(approx_diag)
    if true_diag.shape != approx_diag.shape:
        raise DimensionError("fisher_mae expects equal-length vectors")
    return float(np.mean(np.abs(true_diag - approx_diag)))


def write_fisher_mae_csv(maes, path):
    """Persist a per-epoch MAE series as ``epoch,mae`` rows."""
    with open(path, "w") as fh:
        fh.write("epoch,mae\n")
        for epoch, mae in enumerate(maes):
            fh.write(f"{epoch},{float(mae)!r}\n")


def fim_histogram(efims: dict, bins: int, lam: float) -> dict:
    """Equal-width histograms of each layer's curvature diagonal over [lam, max]."""
    if bins < 2:
        raise ValidationError("need at least 2 bins")
    out = {}
    for lid, group in efims.items():
        entries = np.concatenate([v.ravel() for v in group.values()])
        hi = float(entries.max())
        if hi <= lam:
            hi = lam * (1.0 + 1e-9)
        counts, edges = np.histogram(entries, bins=bins, range=(lam, hi))
        out[lid] = (counts, edges)
    return out


def pca2(data):
    """Project onto the top-2 principal axes.

    Returns ``(projected (N,2), components (2,d), explained_variance (2,))``.
    Component signs are fixed by forcing the first nonzero loading positive.
    """
    data = as_f64(data)
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
        raise ValidationError("pca2 expects an (N>=2, d>=2) matrix")
    centered = data - data.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / data.shape[0]
    if float(np.trace(cov)) < 1e-15:
        raise ValidationError("data has zero variance")
    vals, vecs = sym_eig(cov)
    comps = vecs[:, :2].T.copy()
    for row in comps:
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return centered @ comps.T, comps, vals[:2].copy()


@dataclass
class LandscapeExport:
    trajectory: np.ndarray          # (E, 2) tracked weight history
    losses: np.ndarray              # (E,)
    grid_bounds: dict = field(default_factory=dict)
    grid_n: int = 200

    def meshgrid(self):
        gx = np.linspace(self.grid_bounds["xmin"], self.grid_bounds["xmax"], self.grid_n)
        gy = np.linspace(self.grid_bounds["ymin"], self.grid_bounds["ymax"], self.grid_n)
        return np.meshgrid(gx, gy)

    def to_json(self) -> dict:
        return {
            "w": self.trajectory.tolist(),
            "loss": self.losses.tolist(),
            "grid": {**self.grid_bounds, "n": self.grid_n},
        }


def landscape_export(trajectory, losses, grid_n: int = 200, pad: float = 1e-6) -> LandscapeExport:
    """Package a 2-weight trajectory and its losses with the plotting grid bounds.

    A zero-extent bounding box is widened by ``pad`` on each side so the grid
    stays non-degenerate.
    """
    w = as_f64(trajectory)
    loss = as_f64(losses).ravel()
    if w.ndim != 2 or w.shape[1] != 2:
        raise ValidationError("trajectory must have exactly 2 tracked weights")
    if w.shape[0] < 2 or loss.shape[0] != w.shape[0]:
        raise ValidationError("need at least 2 recorded epochs with matching losses")
    bounds = {}
    for name, col in (("x", w[:, 0]), ("y", w[:, 1])):
        lo, hi = float(col.min()), float(col.max())
        if hi - lo < 1e-12:
            lo, hi = lo - pad, hi + pad
        bounds[f"{name}min"] = lo
        bounds[f"{name}max"] = hi
    return LandscapeExport(w.copy(), loss.copy(), bounds, grid_n)
