"""Multi-resolution retina and the glimpse network.

Locations are ``(row, col)`` pairs in ``[-1, 1]``; ``(-1, -1)`` is the
top-left cell. A normalized coordinate maps to the pixel
``round((coord + 1) / 2 * (dim - 1))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel
from .exceptions import DimensionError
from .kernel import ParamSlot


def location_to_pixel(loc, height: int, width: int) -> np.ndarray:
    """Integer ``(row, col)`` pixels for ``(..., 2)`` normalized locations."""
    loc = np.asarray(loc, dtype=np.float64)
    if not np.all(np.isfinite(loc)):
        raise DimensionError("glimpse location must be finite")
    loc = np.clip(loc, -1.0, 1.0)
    dims = np.array([height - 1, width - 1], dtype=np.float64)
    return np.floor((loc + 1.0) / 2.0 * dims + 0.5).astype(np.intp)


@dataclass(frozen=True)
class Retina:
    """Crops ``n_scales`` patches around a location and pools them to one size.

    Scale ``s`` covers ``(height * k**s, width * k**s)`` cells (zero outside
    the frame) and is average-pooled by ``k**s`` back to ``(height, width)``.
    Patches are stacked finest first.
    """

    height: int
    width: int
    n_scales: int = 3
    scale_factor: int = 2

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.n_scales < 1 or self.scale_factor < 1:
            raise DimensionError(f"invalid retina {self}")

    @property
    def size(self) -> int:
        return self.n_scales * self.height * self.width

    def _scale_geometry(self, s, pix, frame_shape):
        k = self.scale_factor**s
        hs, ws = self.height * k, self.width * k
        H, W = frame_shape
        top = pix[:, 0] - hs // 2 + hs
        left = pix[:, 1] - ws // 2 + ws
        rows = top[:, None] + np.arange(hs)
        cols = left[:, None] + np.arange(ws)
        padded = (H + 2 * hs, W + 2 * ws)
        return k, hs, ws, rows, cols, padded

    def extract(self, frames, loc, index=None) -> np.ndarray:
        """Patches of shape ``(N, n_scales, height, width)``.

        ``frames`` is ``(B, H, W)``; row ``n`` of ``loc`` looks at frame
        ``index[n]`` (defaults to ``arange(N)``).
        """
        frames = np.asarray(frames, dtype=np.float64)
        loc = np.atleast_2d(loc)
        n = loc.shape[0]
        index = np.arange(n) if index is None else np.asarray(index)
        H, W = frames.shape[1:]
        pix = location_to_pixel(loc, H, W)
        out = np.empty((n, self.n_scales, self.height, self.width))
        for s in range(self.n_scales):
            k, hs, ws, rows, cols, _ = self._scale_geometry(s, pix, (H, W))
            padded = np.pad(frames, ((0, 0), (hs, hs), (ws, ws)))
            crop = padded[index[:, None, None], rows[:, :, None], cols[:, None, :]]
            out[:, s] = crop.reshape(n, self.height, k, self.width, k).mean(axis=(2, 4))
        return out

    def backward(self, grad_patch, loc, index, frame_shape, n_frames: int) -> np.ndarray:
        """Scatter ``grad_patch`` (N, S, h, w) back onto ``(n_frames, H, W)``."""
        loc = np.atleast_2d(loc)
        n = loc.shape[0]
        index = np.asarray(index)
        H, W = frame_shape
        pix = location_to_pixel(loc, H, W)
        grad = np.zeros((n_frames, H, W))
        for s in range(self.n_scales):
            k, hs, ws, rows, cols, (Hp, Wp) = self._scale_geometry(s, pix, (H, W))
            g = np.repeat(np.repeat(grad_patch[:, s], k, axis=1), k, axis=2) / (k * k)
            flat = (index[:, None, None] * Hp + rows[:, :, None]) * Wp + cols[:, None, :]
            acc = np.bincount(flat.ravel(), weights=g.ravel(), minlength=n_frames * Hp * Wp)
            grad += acc.reshape(n_frames, Hp, Wp)[:, hs : hs + H, ws : ws + W]
        return grad


def extract_retina(frame, loc, window=(8, 2), n_scales=3, scale_factor=2) -> np.ndarray:
    """Retina patch ``(n_scales, h, w)`` for a single 2-D frame and location."""
    frame = np.asarray(frame, dtype=np.float64)
    retina = Retina(window[0], window[1], n_scales, scale_factor)
    return retina.extract(frame[None], np.asarray(loc, dtype=np.float64)[None], np.zeros(1, dtype=np.intp))[0]


class GlimpseNetwork:
    """``g = relu(W_s (W_rho rho + b_rho + W_l l + b_l) + b_s)``."""

    def __init__(self, retina_size: int, dim_rho: int = 128, dim_loc: int = 128, dim_g: int = 220, rng=None, prefix="glimpse"):
        if dim_rho != dim_loc:
            raise DimensionError("the what and where branches are summed, so their sizes must match")
        rng = rng if rng is not None else kernel.make_rng(0)
        self.rho_W = ParamSlot(f"{prefix}.rho.W", kernel.glorot_uniform((dim_rho, retina_size), retina_size, dim_rho, rng))
        self.rho_b = ParamSlot(f"{prefix}.rho.b", np.zeros(dim_rho))
        self.loc_W = ParamSlot(f"{prefix}.loc.W", kernel.glorot_uniform((dim_loc, 2), 2, dim_loc, rng))
        self.loc_b = ParamSlot(f"{prefix}.loc.b", np.zeros(dim_loc))
        self.out_W = ParamSlot(f"{prefix}.out.W", kernel.glorot_uniform((dim_g, dim_rho), dim_rho, dim_g, rng))
        self.out_b = ParamSlot(f"{prefix}.out.b", np.zeros(dim_g))

    @property
    def params(self) -> list[ParamSlot]:
        return [self.rho_W, self.rho_b, self.loc_W, self.loc_b, self.out_W, self.out_b]

    def forward(self, rho, loc):
        """``rho`` is ``(N, ...)`` retina patches, ``loc`` is ``(N, 2)``."""
        rho = np.asarray(rho, dtype=np.float64)
        flat = rho.reshape(rho.shape[0], -1)
        what, c_what = kernel.linear_forward(flat, self.rho_W, self.rho_b)
        where, c_where = kernel.linear_forward(loc, self.loc_W, self.loc_b)
        pre, c_out = kernel.linear_forward(what + where, self.out_W, self.out_b)
        g, c_relu = kernel.relu_forward(pre)
        return g, (rho.shape, c_what, c_where, c_out, c_relu)

    def backward(self, grad_g, cache):
        """Accumulates parameter gradients; returns the gradient on ``rho``.

        Locations are treated as constants (no gradient flows into them).
        """
        kernel._require(cache, "glimpse")
        rho_shape, c_what, c_where, c_out, c_relu = cache
        d_pre = kernel.relu_backward(grad_g, c_relu)
        d_sum = kernel.linear_backward(d_pre, c_out, self.out_W, self.out_b)
        kernel.linear_backward(d_sum, c_where, self.loc_W, self.loc_b)
        d_flat = kernel.linear_backward(d_sum, c_what, self.rho_W, self.rho_b)
        return d_flat.reshape(rho_shape)
