"""Diagonal Kronecker factors, their EMAs, and the diagonal Fisher preconditioner.

Per layer and per batch the factors are the diagonals of the two Gram matrices
of the captured statistics: ``H = diag-mean(h_bar h_bar^T)`` over batch (and
spatial positions for convolutions) and ``S = diag-mean(s s^T)``. The assembled
per-layer curvature diagonal is ``minmax(H) (x) minmax(S) + lam``, laid out
congruently with the layer's gradient arrays so preconditioning is an
elementwise division.

Index map (documented contract): for a weight gradient of shape
``(out, in+1)`` the curvature entry at ``(j, k)`` is ``S'[j] * H'[k] + lam``,
consistent with column-stacking vectorization ``vec(g) = h_bar (x) s``.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, StateError, ValidationError
from .nn import Layer, Network
from .tensor import as_f64

MINMAX_DEGENERATE_TOL = 1e-12


def layer_kf_diag(layer: Layer):
    """Raw per-batch diagonal factors ``(H_new, S_new)`` for one layer.

    Dense and conv layers use the captured augmented inputs / expanded patches;
    normalization layers use the normalized activations for the scale factor
    (the shift factor is identically one and handled at assembly time); every
    other layer contributes identity factors.
    """
    if layer.kind in ("dense", "conv2d", "batchnorm", "layernorm"):
        cap = layer.capture
        if not cap.ready:
            raise StateError(f"{layer.kind} layer has no captured batch")
        h_new = np.mean(cap.h_bar * cap.h_bar, axis=1)
        s_new = np.mean(cap.s * cap.s, axis=1)
        return h_new, s_new
    width = getattr(layer, "_width", None)
    if width is None:
        raise StateError("activation layer has not seen a forward pass")
    return np.ones(width + 1), np.ones(width)


class KFState:
    """EMA'd diagonal factors for every parametric layer of a network."""

    def __init__(self, gamma: float = 0.8):
        if not 0.0 < gamma <= 1.0:
            raise ValidationError("gamma must be in (0, 1]")
        self.gamma = gamma
        self.step = 0
        self.h: dict[int, np.ndarray] = {}
        self.s: dict[int, np.ndarray] = {}

    @classmethod
    def for_network(cls, net: Network, gamma: float = 0.8) -> "KFState":
        state = cls(gamma)
        for lid, layer in net.parametric_layers():
            if layer.kind in ("dense", "conv2d"):
                out_dim, in_dim1 = layer.params["weight"].shape
                state.h[lid] = np.ones(in_dim1)
                state.s[lid] = np.ones(out_dim)
            else:  # norm layers: scale-side factor and gradient factor, length C
                c = layer.params["scale"].shape[0]
                state.h[lid] = np.ones(c)
                state.s[lid] = np.ones(c)
        return state

    def snapshot(self) -> list[dict]:
        """JSON-ready export: one record per layer."""
        return [
            {
                "layer_id": lid,
                "H_diag": self.h[lid].tolist(),
                "S_diag": self.s[lid].tolist(),
                "step": self.step,
            }
            for lid in sorted(self.h)
        ]

    def clone(self) -> "KFState":
        dup = KFState(self.gamma)
        dup.step = self.step
        dup.h = {k: v.copy() for k, v in self.h.items()}
        dup.s = {k: v.copy() for k, v in self.s.items()}
        return dup


def ema_vec(prev, new, gamma: float) -> np.ndarray:
    """One EMA step; the fresh value carries weight ``gamma``."""
    prev = as_f64(prev)
    new = as_f64(new)
    if prev.shape != new.shape:
        raise DimensionError("EMA operands must share a shape")
    return gamma * new + (1.0 - gamma) * prev


def ema_update(state: KFState, factors: dict[int, tuple]) -> KFState:
    """Fold one batch of raw factors into the state and advance the step count."""
    for lid, (h_new, s_new) in factors.items():
        state.h[lid] = ema_vec(state.h[lid], h_new, state.gamma)
        state.s[lid] = ema_vec(state.s[lid], s_new, state.gamma)
    state.step += 1
    return state


def minmax_normalize(v) -> np.ndarray:
    """Affine rescale to [0, 1]; a (near-)constant vector maps to all ones."""
    v = as_f64(v)
    lo = float(v.min())
    hi = float(v.max())
    if hi - lo < MINMAX_DEGENERATE_TOL:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def assemble_efim_diag(h_norm, s_norm, lam: float, layer_kind: str) -> dict[str, np.ndarray]:
    """Per-parameter curvature diagonal ``S'[j] * H'[k] + lam``.

    Returns arrays keyed like the layer's gradients: ``weight`` for dense/conv,
    ``scale``/``shift`` for normalization layers (the shift entry uses a unit
    activation factor, giving ``S'[c] + lam``).
    """
    if lam <= 0:
        raise ValidationError("lambda must be positive")
    h_norm = as_f64(h_norm)
    s_norm = as_f64(s_norm)
    if layer_kind in ("dense", "conv2d"):
        return {"weight": np.outer(s_norm, h_norm) + lam}
    if layer_kind in ("batchnorm", "layernorm"):
        return {"scale": s_norm * h_norm + lam, "shift": s_norm + lam}
    raise ValidationError(f"no curvature layout for layer kind {layer_kind!r}")


def precondition(grad: dict[str, np.ndarray], efim: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Elementwise division of a layer's gradients by its curvature diagonal."""
    out = {}
    for key, g in grad.items():
        d = efim[key]
        if g.shape != d.shape:
            raise DimensionError(f"gradient/curvature shape mismatch for {key!r}")
        out[key] = g / d
    return out


def compute_raw_factors(net: Network) -> dict[int, tuple]:
    """Raw per-batch factors for every parametric layer after a backward pass."""
    return {lid: layer_kf_diag(layer) for lid, layer in net.parametric_layers()}


def build_efims(state: KFState, lam: float, net: Network) -> dict[int, dict[str, np.ndarray]]:
    """Normalize the EMA'd factors and assemble one curvature diagonal per layer."""
    efims = {}
    for lid, layer in net.parametric_layers():
        efims[lid] = assemble_efim_diag(
            minmax_normalize(state.h[lid]), minmax_normalize(state.s[lid]), lam, layer.kind
        )
    return efims


def full_kf_matrices(layer: Layer):
    """Full (non-diagonal) Gram factors of the captured batch, for diagnostics.

    ``H = h_bar h_bar^T / n`` and ``S = s s^T / n`` with ``n`` the number of
    captured columns (batch times spatial positions).
    """
    cap = layer.capture
    if not cap.ready:
        raise StateError("layer has no captured batch")
    n = cap.h_bar.shape[1]
    return cap.h_bar @ cap.h_bar.T / n, cap.s @ cap.s.T / n
