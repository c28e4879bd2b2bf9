"""Pull per-kernel attributes out of an observed image using the render weights.

Each kernel receives the weighted mean of the pixels it contributes to,

    attr_k = sum_p W[p, k] * image[p] / sum_p W[p, k]

with the very same ``W`` the renderer composites with.

Rendered pixels carry the factor ``S_p = sum_k W[p, k]``, which is below one
near silhouettes, so the plain weighted mean returns darkened attributes
when fed a render.  The ``"coverage"`` estimator divides by
``sum_p W[p, k] * S_p`` instead, which inverts a render exactly wherever the
attributes are locally constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blender import NORMALIZE_EPS, RenderBuffers, render
from .scene import Camera, GaussianScene, Image, ValidationError
from .tracer import SelectionConfig

SUPPORT_EPS = 1e-8
ESTIMATORS = ("weighted_mean", "coverage")


@dataclass(frozen=True, eq=False)
class SampledAttributes:
    attrs: np.ndarray     # (K, D)
    support: np.ndarray   # (K,)  total observed weight per kernel
    eps: float = SUPPORT_EPS

    @property
    def mask(self) -> np.ndarray:
        """True for kernels with too little support to be estimated."""
        return self.support < self.eps

    @property
    def masked_fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "attrs": self.attrs.tolist(),
            "support": self.support.tolist(),
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, data: dict) -> SampledAttributes:
        attrs = np.asarray(data["attrs"], dtype=np.float64)
        if attrs.ndim == 1:
            attrs = attrs[:, None]
        return cls(attrs, np.asarray(data["support"], dtype=np.float64),
                   float(data.get("eps", SUPPORT_EPS)))


def accumulate(buffers: RenderBuffers, observed: np.ndarray, normalized: bool = False):
    """Weighted sums ``(sum_p W phi_p, sum_p W)`` per kernel from a render's weight store."""
    tape = buffers.tape
    K = len(tape.scene)
    obs = observed.reshape(-1, observed.shape[-1])
    W = buffers.normalized_weights(NORMALIZE_EPS) if normalized else tape.W
    live = tape.idx >= 0
    k = tape.idx[live]
    w = W[live]
    pix = np.nonzero(live)[0]
    num = np.zeros((K, obs.shape[1]))
    for d in range(obs.shape[1]):
        num[:, d] = np.bincount(k, weights=w * obs[pix, d], minlength=K)
    den = np.bincount(k, weights=w, minlength=K)
    return num, den


def sample_attributes(
    observed,
    scene: GaussianScene,
    camera: Camera,
    cfg: SelectionConfig | None = None,
    normalized: bool = False,
    eps: float = SUPPORT_EPS,
    buffers: RenderBuffers | None = None,
    estimator: str = "weighted_mean",
) -> SampledAttributes:
    """Weighted-mean attribute per kernel; unsupported kernels get zeros and a mask bit."""
    if estimator not in ESTIMATORS:
        raise ValidationError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
    data = observed.data if isinstance(observed, Image) else np.asarray(observed, dtype=np.float64)
    if data.ndim == 2:
        data = data[..., None]
    if data.shape[:2] != (camera.height, camera.width):
        raise ValidationError(
            f"observed image is {data.shape[:2]} but camera expects {(camera.height, camera.width)}"
        )
    buffers = buffers or render(scene, camera, cfg)
    num, den = accumulate(buffers, data, normalized=normalized)
    ok = den >= eps
    div = den
    if estimator == "coverage":
        S = buffers.tape.W.sum(axis=1).reshape(camera.height, camera.width, 1)
        div = accumulate(buffers, S, normalized=normalized)[0][:, 0]
        ok &= div > 0
    attrs = np.where(ok[:, None], num / np.where(ok, div, 1.0)[:, None], 0.0)
    return SampledAttributes(attrs, den, eps)


def resynthesize(
    attrs: SampledAttributes,
    scene: GaussianScene,
    camera: Camera,
    cfg: SelectionConfig | None = None,
) -> Image:
    """Render ``scene`` with the sampled attributes; masked kernels contribute nothing."""
    if attrs.attrs.shape[0] != len(scene):
        raise ValidationError(
            f"have {attrs.attrs.shape[0]} attribute rows for {len(scene)} kernels"
        )
    vals = np.where(attrs.mask[:, None], 0.0, attrs.attrs)
    buf = render(scene.with_attrs(vals), camera, cfg)
    return Image(buf.image, "color" if vals.shape[1] == 3 else "feature")
