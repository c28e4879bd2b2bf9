"""Scene, camera and ray types plus the world-to-camera transform.

Conventions
-----------
* Kernels store the *inverse* covariance, since every downstream formula
  consumes it directly.
* Pixels are addressed as ``(i, j) = (row, column)`` with centers at integer
  coordinates.  Row offsets pair with ``oy`` and column offsets with ``ox``.
* Ray directions are unit length, so distances along a ray are metric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SCHEMA_VERSION = 1

CHANNEL_TAGS = ("color", "alpha", "normal", "feature", "depth")


class ValidationError(ValueError):
    """Raised when an input violates a type invariant."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def check_spd(inv_covs: np.ndarray, rtol: float = 1e-6) -> None:
    """Raise unless every 3x3 matrix in ``inv_covs`` is symmetric positive-definite."""
    inv_covs = np.asarray(inv_covs, dtype=np.float64).reshape(-1, 3, 3)
    if inv_covs.shape[0] == 0:
        return
    if not np.all(np.isfinite(inv_covs)):
        raise ValidationError("inverse covariance contains non-finite entries")
    scale = np.maximum(np.abs(inv_covs).max(axis=(1, 2)), 1e-300)
    asym = np.abs(inv_covs - inv_covs.transpose(0, 2, 1)).max(axis=(1, 2))
    bad = np.nonzero(asym > rtol * scale)[0]
    if bad.size:
        raise ValidationError(f"inverse covariance not symmetric for kernels {bad[:10].tolist()}")
    sym = 0.5 * (inv_covs + inv_covs.transpose(0, 2, 1))
    eig = np.linalg.eigvalsh(sym)
    bad = np.nonzero(eig[:, 0] <= 0)[0]
    if bad.size:
        raise ValidationError(
            f"inverse covariance not positive-definite for kernels {bad[:10].tolist()}"
        )


@dataclass(frozen=True)
class GaussianKernel:
    """A single ellipsoidal Gaussian: center, inverse covariance, attribute vector."""

    center: np.ndarray
    inv_cov: np.ndarray
    attr: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center).reshape(3))
        object.__setattr__(self, "inv_cov", _frozen(self.inv_cov).reshape(3, 3))
        object.__setattr__(self, "attr", _frozen(np.atleast_1d(self.attr)).reshape(-1))
        check_spd(self.inv_cov)


@dataclass(frozen=True, eq=False)
class GaussianScene:
    """K Gaussian kernels held as stacked arrays.

    ``centers`` is (K, 3), ``inv_covs`` is (K, 3, 3), ``attrs`` is (K, D).
    Kernel ``k`` keeps index ``k`` through transform, trace and blend.
    """

    centers: np.ndarray
    inv_covs: np.ndarray
    attrs: np.ndarray
    tau: float = 1.0
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        k = centers.shape[0]
        inv_covs = np.asarray(self.inv_covs, dtype=np.float64).reshape(k, 3, 3)
        attrs = np.asarray(self.attrs, dtype=np.float64)
        if attrs.ndim == 1:
            attrs = attrs.reshape(k, -1) if k else attrs.reshape(0, max(attrs.size, 1))
        if attrs.shape[0] != k:
            raise ValidationError(f"attrs has {attrs.shape[0]} rows for {k} kernels")
        if self.tau < 0 or not np.isfinite(self.tau):
            raise ValidationError(f"tau must be finite and >= 0, got {self.tau}")
        if self.validate:
            if not (np.all(np.isfinite(centers)) and np.all(np.isfinite(attrs))):
                raise ValidationError("scene contains non-finite centers or attributes")
            check_spd(inv_covs)
        object.__setattr__(self, "centers", _frozen(centers))
        object.__setattr__(self, "inv_covs", _frozen(inv_covs))
        object.__setattr__(self, "attrs", _frozen(attrs))
        object.__setattr__(self, "tau", float(self.tau))

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def attr_dim(self) -> int:
        return self.attrs.shape[1]

    @property
    def kernels(self) -> list[GaussianKernel]:
        return list(self)

    def __iter__(self) -> Iterator[GaussianKernel]:
        for k in range(len(self)):
            yield GaussianKernel(self.centers[k], self.inv_covs[k], self.attrs[k])

    @classmethod
    def from_kernels(cls, kernels: Sequence[GaussianKernel], tau: float = 1.0) -> GaussianScene:
        if not kernels:
            return cls.empty(tau=tau)
        dims = {kk.attr.shape[0] for kk in kernels}
        if len(dims) != 1:
            raise ValidationError(f"attribute dimension differs across kernels: {sorted(dims)}")
        return cls(
            np.stack([kk.center for kk in kernels]),
            np.stack([kk.inv_cov for kk in kernels]),
            np.stack([kk.attr for kk in kernels]),
            tau=tau,
        )

    @classmethod
    def empty(cls, attr_dim: int = 3, tau: float = 1.0) -> GaussianScene:
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, attr_dim)), tau=tau)

    def replace(self, **changes) -> GaussianScene:
        fields = dict(
            centers=self.centers, inv_covs=self.inv_covs, attrs=self.attrs, tau=self.tau,
            validate=self.validate,
        )
        fields.update(changes)
        return GaussianScene(**fields)

    def with_attrs(self, attrs) -> GaussianScene:
        return self.replace(attrs=attrs)

    def subset(self, index) -> GaussianScene:
        return self.replace(
            centers=self.centers[index], inv_covs=self.inv_covs[index], attrs=self.attrs[index]
        )

    @staticmethod
    def concat(scenes: Sequence[GaussianScene]) -> GaussianScene:
        tau = scenes[0].tau
        return GaussianScene(
            np.concatenate([s.centers for s in scenes]),
            np.concatenate([s.inv_covs for s in scenes]),
            np.concatenate([s.attrs for s in scenes]),
            tau=tau,
        )

    # JSON ------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "tau": self.tau,
            "kernels": [
                {
                    "center": self.centers[k].tolist(),
                    "inv_cov": self.inv_covs[k].reshape(9).tolist(),
                    "attr": self.attrs[k].tolist(),
                }
                for k in range(len(self))
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> GaussianScene:
        _check_version(data)
        kernels = data.get("kernels")
        if kernels is None:
            raise ValidationError("scene JSON missing 'kernels'")
        tau = float(data.get("tau", 1.0))
        if not kernels:
            return cls.empty(tau=tau)
        try:
            centers = [kk["center"] for kk in kernels]
            inv = [kk["inv_cov"] for kk in kernels]
            attrs = [kk.get("attr", [1.0, 1.0, 1.0]) for kk in kernels]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed kernel entry: {exc}") from exc
        if any(len(c) != 3 for c in centers) or any(len(m) != 9 for m in inv):
            raise ValidationError("kernel 'center' needs 3 values and 'inv_cov' needs 9")
        if len({len(a) for a in attrs}) != 1:
            raise ValidationError("attribute dimension differs across kernels")
        return cls(np.array(centers), np.array(inv).reshape(-1, 3, 3), np.array(attrs), tau=tau)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera: extrinsics ``(R, T)`` map object to camera coordinates."""

    R: np.ndarray
    T: np.ndarray
    focal: float
    ox: float
    oy: float
    height: int
    width: int

    def __post_init__(self):
        R = _frozen(self.R).reshape(3, 3)
        T = _frozen(self.T).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(T))):
            raise ValidationError("camera extrinsics must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValidationError("camera rotation R is not orthonormal with det(R) = 1")
        if not self.focal > 0:
            raise ValidationError(f"focal length must be > 0, got {self.focal}")
        if int(self.height) < 1 or int(self.width) < 1:
            raise ValidationError(f"image size must be >= 1, got {self.height}x{self.width}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "ox", float(self.ox))
        object.__setattr__(self, "oy", float(self.oy))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @classmethod
    def identity(cls, focal: float, height: int, width: int, ox=None, oy=None) -> Camera:
        ox = (width - 1) / 2.0 if ox is None else ox
        oy = (height - 1) / 2.0 if oy is None else oy
        return cls(np.eye(3), np.zeros(3), focal, ox, oy, height, width)

    def with_pose(self, R, T) -> Camera:
        return Camera(R, T, self.focal, self.ox, self.oy, self.height, self.width)

    def intrinsics_only(self) -> Camera:
        return self.with_pose(np.eye(3), np.zeros(3))

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "R": self.R.reshape(9).tolist(),
            "T": self.T.tolist(),
            "F": self.focal,
            "Ox": self.ox,
            "Oy": self.oy,
            "H": self.height,
            "W": self.width,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Camera:
        _check_version(data)
        try:
            return cls(
                np.array(data["R"], dtype=float).reshape(3, 3),
                np.array(data["T"], dtype=float),
                data["F"], data["Ox"], data["Oy"], data["H"], data["W"],
            )
        except KeyError as exc:
            raise ValidationError(f"camera JSON missing field {exc}") from exc


@dataclass(frozen=True)
class Ray:
    direction: np.ndarray
    pixel: tuple[int, int]

    def __post_init__(self):
        d = _frozen(self.direction).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValidationError("ray direction must be unit length")
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True, eq=False)
class Image:
    data: np.ndarray
    channel: str = "color"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValidationError(f"image data must be HxWxD, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("image contains NaN or Inf")
        if self.channel not in CHANNEL_TAGS:
            raise ValidationError(f"unknown channel tag {self.channel!r}")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self):
        return self.data.shape


def _check_version(data: dict) -> None:
    version = data.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema version {version}")


def view_transform(scene: GaussianScene, camera: Camera) -> GaussianScene:
    """Express ``scene`` in camera coordinates.

    Centers map as ``R @ M + T``.  Inverse covariances map as
    ``R @ inv_cov @ R.T``, the congruence that keeps the quadratic form of
    every kernel unchanged under the rigid motion.
    """
    R, T = camera.R, camera.T
    centers = scene.centers @ R.T + T
    inv_covs = np.einsum("ij,kjl,ml->kim", R, scene.inv_covs, R)
    inv_covs = 0.5 * (inv_covs + inv_covs.transpose(0, 2, 1))
    return GaussianScene(centers, inv_covs, scene.attrs, tau=scene.tau, validate=False)


def compose_extrinsics(R1, T1, R2, T2) -> tuple[np.ndarray, np.ndarray]:
    """Extrinsics equivalent to applying ``(R1, T1)`` and then ``(R2, T2)``."""
    R1, R2 = np.asarray(R1, float), np.asarray(R2, float)
    return R2 @ R1, R2 @ np.asarray(T1, float) + np.asarray(T2, float)


def ray_directions(camera: Camera) -> np.ndarray:
    """Unit ray directions, shape (H*W, 3), row-major over (row, column)."""
    i, j = np.meshgrid(
        np.arange(camera.height, dtype=np.float64),
        np.arange(camera.width, dtype=np.float64),
        indexing="ij",
    )
    d = np.stack(
        [(i - camera.oy) / camera.focal, (j - camera.ox) / camera.focal, np.ones_like(i)],
        axis=-1,
    ).reshape(-1, 3)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def generate_rays(camera: Camera) -> list[Ray]:
    if not camera.focal > 0:
        raise ValidationError("focal length must be > 0")
    dirs = ray_directions(camera)
    w = camera.width
    return [Ray(dirs[p], (p // w, p % w)) for p in range(dirs.shape[0])]


def load_scene(path) -> GaussianScene:
    return GaussianScene.from_dict(json.loads(Path(path).read_text()))


def load_camera(path) -> Camera:
    return Camera.from_dict(json.loads(Path(path).read_text()))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Extrinsics for a camera at ``eye`` whose optical (+z) axis points at ``target``.

    Camera x (image rows) points away from ``up``; camera y (image columns)
    completes a right-handed frame.
    """
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    y = np.cross(np.asarray(up, float), z)
    if np.linalg.norm(y) < 1e-9:
        y = np.cross(np.array([1.0, 0.0, 0.0]), z)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z])
    return R, -R @ eye


def orbit_camera(
    azimuth_deg: float,
    elevation_deg: float,
    distance: float,
    focal: float,
    height: int,
    width: int,
    target=(0.0, 0.0, 0.0),
) -> Camera:
    """Camera on a sphere around ``target``; azimuth rotates about the world y axis."""
    az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    eye = np.asarray(target, float) + distance * np.array(
        [np.cos(el) * np.sin(az), np.sin(el), -np.cos(el) * np.cos(az)]
    )
    R, T = look_at(eye, target)
    return Camera(R, T, focal, (width - 1) / 2.0, (height - 1) / 2.0, height, width)
