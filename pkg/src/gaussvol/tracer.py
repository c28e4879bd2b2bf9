"""Per-ray reduction of kernels to 1D Gaussians, and coarse-to-fine selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera, GaussianKernel, GaussianScene, Ray, ValidationError

# kernels whose camera-space depth is at or below this are dropped
BEHIND_EPS = 1e-4


@dataclass(frozen=True)
class TracedKernel:
    kernel_index: int
    l: float
    q: float
    sigma: float


@dataclass(frozen=True)
class SelectionConfig:
    eta: float = 0.01
    k_prime: int = 20
    coarse_enabled: bool = True
    coarse_downsample: int = 8

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValidationError(f"eta must lie in (0, 1), got {self.eta}")
        if int(self.k_prime) < 1:
            raise ValidationError(f"k_prime must be >= 1, got {self.k_prime}")
        if int(self.coarse_downsample) < 1:
            raise ValidationError("coarse_downsample must be >= 1")


def trace_kernel(ray: Ray, kernel: GaussianKernel, index: int = 0) -> TracedKernel:
    """Reduce ``kernel`` (camera frame) to its 1D Gaussian along ``ray``."""
    D = ray.direction
    A = kernel.inv_cov
    M = kernel.center
    a = float(D @ A @ D)
    if not a > 0:
        raise ValidationError("D' inv_cov D must be positive (inverse covariance not SPD)")
    l = float(M @ A @ D + D @ A @ M) / (2.0 * a)
    V = M - l * D
    q = -0.5 * float(V @ A @ V)
    return TracedKernel(index, l, min(q, 0.0), 1.0 / np.sqrt(a))


def fine_select(traced: list[TracedKernel], cfg: SelectionConfig) -> list[TracedKernel]:
    """Keep kernels with ``exp(q) > eta``, then the ``k_prime`` nearest by ``l``."""
    log_eta = np.log(cfg.eta)
    kept = [t for t in traced if t.q > log_eta]
    kept.sort(key=lambda t: (t.l, t.kernel_index))
    return kept[: cfg.k_prime]


def level_radius_sq(eta: float) -> float:
    """Squared Mahalanobis radius at which the peak density drops to ``eta``."""
    return 2.0 * np.log(1.0 / eta)


def screen_boxes(scene_cam: GaussianScene, camera: Camera, eta: float):
    """Pixel-space bounding boxes of each kernel's ``eta`` level set.

    Returns ``(boxes, front)`` where ``boxes`` is (K, 4) as
    ``(i_min, i_max, j_min, j_max)`` and ``front`` marks kernels in front of
    the camera.  A kernel straddling the image plane gets the whole image.

    The box is the bounding box of the conic outlining the ellipsoid
    ``(X - M)' A (X - M) <= r**2`` seen from the camera center, taken from the
    projected dual quadric ``r**2 * Sigma - M M'``.  Any pixel whose ray has
    ``exp(q) >= eta`` lies inside it.
    """
    M = scene_cam.centers
    K = M.shape[0]
    boxes = np.zeros((K, 4))
    front = M[:, 2] > BEHIND_EPS
    if K == 0:
        return boxes, front
    r2 = level_radius_sq(eta)
    sigma = np.linalg.inv(scene_cam.inv_covs)
    dual = r2 * sigma - np.einsum("ki,kj->kij", M, M)
    c33 = dual[:, 2, 2]
    # whole level set strictly in front of the image plane
    bounded = front & (M[:, 2] - np.sqrt(np.maximum(r2 * sigma[:, 2, 2], 0.0)) > 1e-9 * M[:, 2])
    boxes[:] = (-np.inf, np.inf, -np.inf, np.inf)
    b = np.nonzero(bounded)[0]
    if b.size:
        ext = []
        for axis in (0, 1):
            c13 = dual[b, axis, 2]
            c11 = dual[b, axis, axis]
            disc = np.sqrt(np.maximum(c13 * c13 - c11 * c33[b], 0.0))
            lo = (c13 + disc) / c33[b]
            hi = (c13 - disc) / c33[b]
            ext.append((np.minimum(lo, hi), np.maximum(lo, hi)))
        (u0, u1), (v0, v1) = ext
        pad_u = 1e-6 * (1.0 + np.abs(u1 - u0)) + 1e-9 * (np.abs(u0) + np.abs(u1))
        pad_v = 1e-6 * (1.0 + np.abs(v1 - v0)) + 1e-9 * (np.abs(v0) + np.abs(v1))
        F = camera.focal
        boxes[b, 0] = camera.oy + F * (u0 - pad_u)
        boxes[b, 1] = camera.oy + F * (u1 + pad_u)
        boxes[b, 2] = camera.ox + F * (v0 - pad_v)
        boxes[b, 3] = camera.ox + F * (v1 + pad_v)
    boxes[~front] = np.nan
    return boxes, front


@dataclass(frozen=True, eq=False)
class PixelKernelMap:
    """Candidate kernel lists per coarse cell, stored CSR-style.

    Cell ``c`` holds ``cell_idx[cell_ptr[c]:cell_ptr[c + 1]]`` in ascending
    kernel order.  ``pix_cell`` maps each pixel (row-major) to its cell.
    """

    cell_ptr: np.ndarray
    cell_idx: np.ndarray
    pix_cell: np.ndarray
    grid: tuple[int, int]
    downsample: int
    culled_behind: int

    def candidates(self, cell: int) -> np.ndarray:
        return self.cell_idx[self.cell_ptr[cell]:self.cell_ptr[cell + 1]]

    def cell_of(self, i: int, j: int) -> int:
        return (i // self.downsample) * self.grid[1] + (j // self.downsample)

    @property
    def mean_candidates(self) -> float:
        return float(np.diff(self.cell_ptr).mean()) if self.grid[0] * self.grid[1] else 0.0


def _pixel_cells(H: int, W: int, ds: int, gw: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return ((i // ds) * gw + (j // ds)).reshape(-1).astype(np.int64)


def exhaustive_map(scene_cam: GaussianScene, camera: Camera) -> PixelKernelMap:
    """One cell holding every kernel in front of the camera."""
    front = np.nonzero(scene_cam.centers[:, 2] > BEHIND_EPS)[0].astype(np.int64)
    P = camera.height * camera.width
    return PixelKernelMap(
        np.array([0, front.size], dtype=np.int64),
        front,
        np.zeros(P, dtype=np.int64),
        (1, 1),
        max(camera.height, camera.width),
        len(scene_cam) - front.size,
    )


def coarse_select(scene_cam: GaussianScene, camera: Camera, cfg: SelectionConfig) -> PixelKernelMap:
    """Rasterize per-kernel screen boxes onto a grid ``coarse_downsample`` times smaller."""
    ds = int(cfg.coarse_downsample)
    H, W = camera.height, camera.width
    gh, gw = -(-H // ds), -(-W // ds)
    boxes, front = screen_boxes(scene_cam, camera, cfg.eta)
    k = np.nonzero(front)[0]
    bx = boxes[k]
    # pixel centers covered: ceil(min) .. floor(max)
    with np.errstate(invalid="ignore"):
        i0 = np.ceil(np.clip(bx[:, 0], -1.0, H)).astype(np.int64)
        i1 = np.floor(np.clip(bx[:, 1], -1.0, H)).astype(np.int64)
        j0 = np.ceil(np.clip(bx[:, 2], -1.0, W)).astype(np.int64)
        j1 = np.floor(np.clip(bx[:, 3], -1.0, W)).astype(np.int64)
    i0, j0 = np.maximum(i0, 0), np.maximum(j0, 0)
    i1, j1 = np.minimum(i1, H - 1), np.minimum(j1, W - 1)
    on = (i1 >= i0) & (j1 >= j0)
    k, i0, i1, j0, j1 = k[on], i0[on] // ds, i1[on] // ds, j0[on] // ds, j1[on] // ds
    nr, nc = i1 - i0 + 1, j1 - j0 + 1
    counts = nr * nc
    total = int(counts.sum())
    starts = np.cumsum(counts) - counts
    owner = np.repeat(np.arange(k.size), counts)
    off = np.arange(total) - starts[owner]
    cells = (i0[owner] + off // nc[owner]) * gw + (j0[owner] + off % nc[owner])
    kern = k[owner].astype(np.int64)
    order = np.lexsort((kern, cells))
    cells, kern = cells[order], kern[order]
    cell_ptr = np.zeros(gh * gw + 1, dtype=np.int64)
    np.cumsum(np.bincount(cells, minlength=gh * gw), out=cell_ptr[1:])
    return PixelKernelMap(
        cell_ptr, kern, _pixel_cells(H, W, ds, gw), (gh, gw), ds, int((~front).sum())
    )


def select_map(scene_cam: GaussianScene, camera: Camera, cfg: SelectionConfig) -> PixelKernelMap:
    if cfg.coarse_enabled:
        return coarse_select(scene_cam, camera, cfg)
    return exhaustive_map(scene_cam, camera)
