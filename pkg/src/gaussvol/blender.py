"""Closed-form transmittance, per-kernel weights and image synthesis.

Along a ray, kernel ``m`` contributes the line density
``exp(q_m) * N(t; l_m, sigma_m**2)`` (unit-mass Gaussian scaled by its peak
factor), so the accumulated density up to ``t`` is ``exp(q_m)`` times the
Gaussian CDF and transmittance has an exact erf form.  The outer integral is
approximated by freezing transmittance at each kernel's peak, giving the
weight ``W_k = T(l_k) * exp(q_k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .scene import Camera, GaussianScene, Image, ValidationError, ray_directions, view_transform
from .tracer import PixelKernelMap, SelectionConfig, TracedKernel, select_map

NORMALIZE_EPS = 1e-8


def _cdf(x: float) -> float:
    return 0.5 * (math.erf(x / math.sqrt(2.0)) + 1.0)


def transmittance_at(traced: list[TracedKernel], tau: float, t: float) -> float:
    """Fraction of light surviving from ``-inf`` to ``t`` along the ray."""
    acc = 0.0
    for tk in traced:
        if t == math.inf:
            acc += math.exp(tk.q)
        elif t != -math.inf:
            acc += math.exp(tk.q) * _cdf((t - tk.l) / tk.sigma)
    return math.exp(-tau * acc)


@dataclass(frozen=True)
class RayBlend:
    weights: list[tuple[int, float]]
    alpha: float


def blend(traced: list[TracedKernel], tau: float) -> RayBlend:
    """Closed-form per-kernel weights for one ray, in ascending ``l`` order."""
    ordered = sorted(traced, key=lambda t: (t.l, t.kernel_index))
    weights = [
        (tk.kernel_index, transmittance_at(ordered, tau, tk.l) * math.exp(tk.q)) for tk in ordered
    ]
    return RayBlend(weights, 1.0 - transmittance_at(ordered, tau, math.inf))


@dataclass(frozen=True, eq=False)
class Tape:
    """Everything the reverse pass needs from one forward render.

    Per-pixel slot arrays have shape (H*W, k_prime); empty slots carry
    index -1 and zero weight.
    """

    scene: GaussianScene
    camera: Camera
    cfg: SelectionConfig
    scene_cam: GaussianScene
    dirs: np.ndarray
    idx: np.ndarray
    l: np.ndarray
    q: np.ndarray
    sigma: np.ndarray
    T: np.ndarray
    W: np.ndarray
    n_sel: np.ndarray
    alpha: np.ndarray
    kernel_map: PixelKernelMap = field(repr=False)
    backend: str = "compiled"

    @property
    def shape(self) -> tuple[int, int]:
        return self.camera.height, self.camera.width


def composite(W: np.ndarray, idx: np.ndarray, attrs: np.ndarray) -> np.ndarray:
    """``sum_k W[p, k] * attrs[idx[p, k]]`` per pixel; empty slots add zero."""
    D = attrs.shape[1]
    padded = np.vstack([attrs, np.zeros((1, D))])
    gathered = padded[np.where(idx >= 0, idx, attrs.shape[0])]
    return np.einsum("ps,psd->pd", W, gathered)


@dataclass(frozen=True, eq=False)
class RenderBuffers:
    image: np.ndarray   # (H, W, D)
    alpha: np.ndarray   # (H, W)
    tape: Tape = field(repr=False)

    @property
    def weight_store(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel sparse ``(kernel_index, W)`` slots, each (H*W, k_prime)."""
        return self.tape.idx, self.tape.W

    def pixel_weights(self, i: int, j: int) -> list[tuple[int, float]]:
        p = i * self.tape.camera.width + j
        n = int(self.tape.n_sel[p])
        return [(int(self.tape.idx[p, s]), float(self.tape.W[p, s])) for s in range(n)]

    def weight_sum(self) -> np.ndarray:
        H, W = self.alpha.shape
        return self.tape.W.sum(axis=1).reshape(H, W)

    def normalized_weights(self, eps: float = NORMALIZE_EPS) -> np.ndarray:
        """Weights divided by their per-pixel sum (floored at ``eps``)."""
        tot = self.tape.W.sum(axis=1, keepdims=True)
        return self.tape.W / np.maximum(tot, eps)

    def depth(self) -> np.ndarray:
        """Weight-averaged peak distance along each ray (0 where nothing is hit)."""
        tot = self.tape.W.sum(axis=1)
        d = (self.tape.W * self.tape.l).sum(axis=1) / np.maximum(tot, NORMALIZE_EPS)
        return np.where(tot > NORMALIZE_EPS, d, 0.0).reshape(self.alpha.shape)

    def points(self) -> np.ndarray:
        """Camera-frame surface estimate per pixel, (H, W, 3)."""
        H, W = self.alpha.shape
        return self.depth()[..., None] * self.tape.dirs.reshape(H, W, 3)

    def as_image(self, channel: str = "color") -> Image:
        return Image(self.image, channel)


def render(
    scene: GaussianScene,
    camera: Camera,
    cfg: SelectionConfig | None = None,
    backend: str | None = None,
    threads: int | None = None,
) -> RenderBuffers:
    """Render ``scene`` through ``camera``; the background composites as zero."""
    cfg = cfg or SelectionConfig()
    core = _backend.get(backend)
    scene_cam = view_transform(scene, camera)
    dirs = ray_directions(camera)
    kmap = select_map(scene_cam, camera, cfg)
    idx, l, q, s, T, W, n, alpha = core.forward(
        np.ascontiguousarray(scene_cam.centers),
        np.ascontiguousarray(scene_cam.inv_covs),
        dirs,
        kmap.pix_cell,
        kmap.cell_ptr,
        kmap.cell_idx,
        float(cfg.eta),
        int(cfg.k_prime),
        float(scene.tau),
        threads or _backend.default_threads(),
    )
    tape = Tape(
        scene, camera, cfg, scene_cam, dirs, idx, l, q, s, T, W, n, alpha, kmap,
        backend or _backend.ACTIVE,
    )
    H, Wd = camera.height, camera.width
    image = composite(W, idx, scene.attrs).reshape(H, Wd, scene.attr_dim)
    return RenderBuffers(image, alpha.reshape(H, Wd), tape)


def render_image(tape: Tape, attrs: np.ndarray) -> np.ndarray:
    """Re-composite a taped render with different per-kernel attributes."""
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    H, W = tape.shape
    return composite(tape.W, tape.idx, attrs).reshape(H, W, attrs.shape[1])


def shade_lambert(normal_image: Image, light_pos, light_color, alpha=None, points=None) -> Image:
    """Diffuse shading of a rendered normal map.

    With ``points`` (H, W, 3 surface estimates, same frame as ``light_pos``)
    the light direction is taken per pixel from the surface point to the
    light; otherwise ``light_pos`` is treated as a direction.  Pixels with
    ``alpha == 0`` stay black.
    """
    n = np.asarray(normal_image.data if isinstance(normal_image, Image) else normal_image, float)
    if n.ndim != 3 or n.shape[2] != 3:
        raise ValidationError(f"normal image must be HxWx3, got {n.shape}")
    light_pos = np.asarray(light_pos, float).reshape(3)
    light_color = np.asarray(light_color, float).reshape(3)
    if points is None:
        ldir = np.broadcast_to(light_pos / max(np.linalg.norm(light_pos), 1e-12), n.shape)
    else:
        ldir = light_pos - np.asarray(points, float)
        ldir = ldir / np.maximum(np.linalg.norm(ldir, axis=-1, keepdims=True), 1e-12)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    unit = np.where(norm > 1e-12, n / np.maximum(norm, 1e-12), 0.0)
    lam = np.maximum(0.0, (unit * ldir).sum(axis=-1, keepdims=True))
    out = lam * light_color
    mask = norm[..., 0] > 1e-12 if alpha is None else np.asarray(alpha) > 0
    out = np.where(mask[..., None], out, 0.0)
    return Image(out, "color")
