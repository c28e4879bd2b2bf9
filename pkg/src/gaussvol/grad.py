"""Reverse pass through a taped render, SO(3) helpers and a finite-difference checker.

Gradients flow along two paths per kernel weight ``W_k = T(l_k) exp(q_k)``:
its own peak density ``exp(q_k)`` and the transmittance ``T(l_k)``, which
carries gradient to every kernel in front of ``k`` (including ones that are
themselves barely visible).  The discrete selection is frozen from the
forward pass.

Inverse-covariance gradients are returned as the symmetric matrix ``G`` with
``dL = sum(G * dA)`` for symmetric perturbations ``dA``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .blender import RenderBuffers, Tape, render
from .scene import Camera, GaussianScene, ValidationError
from .tracer import SelectionConfig


@dataclass(frozen=True)
class GradientFlags:
    """Which paths the reverse pass follows (both by default)."""

    transmittance: bool = True
    density: bool = True


def partial_stop(block_transmittance: bool = False, block_density: bool = False) -> GradientFlags:
    """Flags that cut the chosen gradient path(s); the forward pass is unchanged."""
    return GradientFlags(transmittance=not block_transmittance, density=not block_density)


@dataclass(eq=False)
class GradientBundle:
    d_center: np.ndarray   # (K, 3)
    d_inv_cov: np.ndarray  # (K, 3, 3), symmetric
    d_attr: np.ndarray     # (K, D)
    d_R: np.ndarray        # (3, 3)
    d_T: np.ndarray        # (3,)

    def __add__(self, other: GradientBundle) -> GradientBundle:
        return GradientBundle(
            self.d_center + other.d_center,
            self.d_inv_cov + other.d_inv_cov,
            self.d_attr + other.d_attr,
            self.d_R + other.d_R,
            self.d_T + other.d_T,
        )

    def scaled(self, s: float) -> GradientBundle:
        return GradientBundle(
            self.d_center * s, self.d_inv_cov * s, self.d_attr * s, self.d_R * s, self.d_T * s
        )

    @classmethod
    def zeros(cls, K: int, D: int) -> GradientBundle:
        return cls(np.zeros((K, 3)), np.zeros((K, 3, 3)), np.zeros((K, D)), np.zeros((3, 3)),
                   np.zeros(3))

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.d_center, self.d_inv_cov, self.d_attr, self.d_R, self.d_T)
        )


def backward(
    tape: Tape | RenderBuffers,
    d_image,
    d_alpha=None,
    flags: GradientFlags | None = None,
    backend: str | None = None,
) -> GradientBundle:
    """Gradients of a scalar loss given its derivatives w.r.t. image and alpha."""
    if isinstance(tape, RenderBuffers):
        tape = tape.tape
    flags = flags or GradientFlags()
    scene, cam = tape.scene, tape.camera
    H, W = tape.shape
    K, D = len(scene), scene.attr_dim
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.ndim == 2 and D == 1:
        d_image = d_image[..., None]
    if d_image.shape != (H, W, D):
        raise ValidationError(f"d_image shape {d_image.shape} does not match render {(H, W, D)}")
    if d_alpha is None:
        d_alpha = np.zeros((H, W))
    d_alpha = np.asarray(d_alpha, dtype=np.float64)
    if d_alpha.shape != (H, W):
        raise ValidationError(f"d_alpha shape {d_alpha.shape} does not match render {(H, W)}")

    g_img = d_image.reshape(-1, D)
    live = tape.idx >= 0
    safe = np.where(live, tape.idx, 0)
    gW = np.where(live, np.einsum("psd,pd->ps", scene.attrs[safe], g_img), 0.0)

    d_attr = np.zeros((K, D))
    if K:
        contrib = tape.W[live][:, None] * np.broadcast_to(g_img[:, None, :], live.shape + (D,))[live]
        np.add.at(d_attr, tape.idx[live], contrib)

    core = _backend.get(backend or tape.backend)
    gM, gA = core.backward(
        np.ascontiguousarray(tape.scene_cam.centers),
        np.ascontiguousarray(tape.scene_cam.inv_covs),
        tape.dirs, tape.idx, tape.l, tape.q, tape.sigma, tape.T, tape.W, tape.n_sel,
        tape.alpha, np.ascontiguousarray(gW), d_alpha.reshape(-1),
        float(scene.tau), bool(flags.transmittance), bool(flags.density), K,
    )
    gA = 0.5 * (gA + gA.transpose(0, 2, 1))
    R = cam.R
    d_center = gM @ R
    d_inv_cov = np.einsum("ji,kjl,lm->kim", R, gA, R)
    d_T = gM.sum(axis=0)
    d_R = gM.T @ scene.centers + 2.0 * np.einsum("kij,jl,klm->im", gA, R, scene.inv_covs)
    return GradientBundle(d_center, d_inv_cov, d_attr, d_R, d_T)


# --- SO(3) ------------------------------------------------------------------

def hat(w) -> np.ndarray:
    x, y, z = np.asarray(w, float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S) -> np.ndarray:
    S = np.asarray(S, float)
    return 0.5 * np.array([S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]])


def axis_angle_to_matrix(w) -> np.ndarray:
    w = np.asarray(w, float).reshape(3)
    th = np.linalg.norm(w)
    K = hat(w)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1.0 - np.cos(th)) / th**2 * K @ K


def matrix_to_axis_angle(R) -> np.ndarray:
    R = np.asarray(R, float)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(c)
    if th < 1e-8:
        return vee(R - R.T)
    if np.pi - th < 1e-6:
        # near pi the skew part vanishes; take the axis from R + I
        B = (R + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
        return th * axis / np.linalg.norm(axis)
    return th / (2.0 * np.sin(th)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


def tangent_grad(d_R, R) -> np.ndarray:
    """Gradient w.r.t. ``delta`` where ``R(delta) = exp(hat(delta)) @ R``, at ``delta = 0``."""
    G = np.asarray(d_R, float) @ np.asarray(R, float).T
    return np.array([G[2, 1] - G[1, 2], G[0, 2] - G[2, 0], G[1, 0] - G[0, 1]])


def axis_angle_jacobian(w) -> np.ndarray:
    """``dR/dw_i`` for ``R = exp(hat(w))``, stacked as (3, 3, 3)."""
    w = np.asarray(w, float).reshape(3)
    th2 = w @ w
    E = np.eye(3)
    if th2 < 1e-16:
        return np.stack([hat(E[i]) for i in range(3)])
    R = axis_angle_to_matrix(w)
    out = []
    for i in range(3):
        v = np.cross(w, (E - R) @ E[i])
        out.append((w[i] * hat(w) + hat(v)) @ R / th2)
    return np.stack(out)


def axis_angle_grad(d_R, w) -> np.ndarray:
    return np.einsum("ij,kij->k", np.asarray(d_R, float), axis_angle_jacobian(w))


# --- finite-difference checker ------------------------------------------------

@dataclass(frozen=True, eq=False)
class ImageLoss:
    """``w_img * mean((image - target)^2) + w_alpha * mean((alpha - target_alpha)^2)``."""

    target_image: np.ndarray
    target_alpha: np.ndarray | None = None
    w_img: float = 1.0
    w_alpha: float = 1.0

    def __call__(self, buf: RenderBuffers):
        r = buf.image - self.target_image
        loss = self.w_img * float(np.mean(r * r))
        d_image = self.w_img * 2.0 * r / r.size
        d_alpha = np.zeros_like(buf.alpha)
        if self.target_alpha is not None and self.w_alpha:
            ra = buf.alpha - self.target_alpha
            loss += self.w_alpha * float(np.mean(ra * ra))
            d_alpha = self.w_alpha * 2.0 * ra / ra.size
        return loss, d_image, d_alpha

    @classmethod
    def random(cls, shape, seed: int = 0) -> ImageLoss:
        rng = np.random.default_rng(seed)
        H, W, D = shape
        return cls(rng.uniform(size=(H, W, D)), rng.uniform(size=(H, W)))


PARAM_CLASSES = ("center", "inv_cov", "attr", "rotation", "translation")


@dataclass
class GradcheckReport:
    max_rel_err: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    h: float = 1e-4
    tol: float = 1e-3
    abs_floor: float = 1e-7

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def total_checked(self) -> int:
        return sum(self.checked.values())

    @property
    def total_skipped(self) -> int:
        return sum(self.skipped.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def merge(self, other: GradcheckReport) -> GradcheckReport:
        out = GradcheckReport(h=self.h, tol=self.tol, abs_floor=self.abs_floor)
        for name in set(self.checked) | set(other.checked):
            out.checked[name] = self.checked.get(name, 0) + other.checked.get(name, 0)
            out.skipped[name] = self.skipped.get(name, 0) + other.skipped.get(name, 0)
            out.max_rel_err[name] = max(
                self.max_rel_err.get(name, 0.0), other.max_rel_err.get(name, 0.0)
            )
        out.failures = self.failures + other.failures
        return out

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "h": self.h,
            "tol": self.tol,
            "abs_floor": self.abs_floor,
            "max_rel_err": {k: self.max_rel_err[k] for k in sorted(self.max_rel_err)},
            "checked": {k: self.checked[k] for k in sorted(self.checked)},
            "skipped_boundary": {k: self.skipped[k] for k in sorted(self.skipped)},
            "failures": self.failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _perturbed(scene: GaussianScene, cam: Camera, cls: str, coord, step: float):
    if cls == "center":
        k, i = coord
        c = scene.centers.copy()
        c[k, i] += step
        return scene.replace(centers=c, validate=False), cam
    if cls == "inv_cov":
        k, i, j = coord
        A = scene.inv_covs.copy()
        A[k, i, j] += step
        if i != j:
            A[k, j, i] += step
        return scene.replace(inv_covs=A, validate=False), cam
    if cls == "attr":
        k, d = coord
        a = scene.attrs.copy()
        a[k, d] += step
        return scene.replace(attrs=a, validate=False), cam
    if cls == "rotation":
        delta = np.zeros(3)
        delta[coord] = step
        return scene, cam.with_pose(axis_angle_to_matrix(delta) @ cam.R, cam.T)
    if cls == "translation":
        T = cam.T.copy()
        T[coord] += step
        return scene, cam.with_pose(cam.R, T)
    raise ValueError(cls)


def _analytic(bundle: GradientBundle, cam: Camera, cls: str, coord) -> float:
    if cls == "center":
        return bundle.d_center[coord]
    if cls == "inv_cov":
        k, i, j = coord
        return bundle.d_inv_cov[k, i, j] * (1.0 if i == j else 2.0)
    if cls == "attr":
        return bundle.d_attr[coord]
    if cls == "rotation":
        return tangent_grad(bundle.d_R, cam.R)[coord]
    return bundle.d_T[coord]


def _coords(scene: GaussianScene, cls: str):
    K, D = len(scene), scene.attr_dim
    if cls == "center":
        return [(k, i) for k in range(K) for i in range(3)]
    if cls == "inv_cov":
        return [(k, i, j) for k in range(K) for i in range(3) for j in range(i, 3)]
    if cls == "attr":
        return [(k, d) for k in range(K) for d in range(D)]
    return [0, 1, 2]


def _same_selection(a: RenderBuffers, b: RenderBuffers) -> bool:
    return np.array_equal(a.tape.idx, b.tape.idx) and np.array_equal(a.tape.n_sel, b.tape.n_sel)


def gradcheck(
    scene: GaussianScene,
    camera: Camera,
    cfg: SelectionConfig | None = None,
    loss_spec: ImageLoss | None = None,
    h: float = 1e-4,
    tol: float = 1e-3,
    classes=PARAM_CLASSES,
    abs_floor: float = 1e-7,
    flags: GradientFlags | None = None,
    backend: str | None = None,
) -> GradcheckReport:
    """Compare analytic gradients to central differences, coordinate by coordinate.

    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.  A coordinate
    whose +-h or +-2h perturbation changes any pixel's kernel selection sits
    on a selection discontinuity and is skipped (counted per class).
    """
    cfg = cfg or SelectionConfig()
    base = render(scene, camera, cfg, backend=backend)
    if loss_spec is None:
        loss_spec = ImageLoss.random(base.image.shape)
    _, d_img, d_alpha = loss_spec(base)
    bundle = backward(base, d_img, d_alpha, flags=flags, backend=backend)
    report = GradcheckReport(h=h, tol=tol, abs_floor=abs_floor)
    for cls in classes:
        worst, n_ok, n_skip = 0.0, 0, 0
        for coord in _coords(scene, cls):
            bufs = {}
            for mult in (-2, -1, 1, 2):
                s, c = _perturbed(scene, camera, cls, coord, mult * h)
                bufs[mult] = render(s, c, cfg, backend=backend)
            if not all(_same_selection(base, b) for b in bufs.values()):
                n_skip += 1
                continue
            numeric = (loss_spec(bufs[1])[0] - loss_spec(bufs[-1])[0]) / (2.0 * h)
            analytic = float(_analytic(bundle, camera, cls, coord))
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
            worst = max(worst, rel)
            n_ok += 1
            if rel > tol:
                report.failures.append(
                    {"class": cls, "coord": np.atleast_1d(coord).tolist(),
                     "analytic": analytic, "numeric": numeric, "rel_err": rel}
                )
        report.max_rel_err[cls] = worst
        report.checked[cls] = n_ok
        report.skipped[cls] = n_skip
    return report


def random_scene(K: int = 5, seed: int = 0, attr_dim: int = 3, depth: float = 4.0,
                 spread: float = 0.5) -> GaussianScene:
    """Small anisotropic scene in front of an identity camera, for checks and demos."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(K, 3)) + np.array([0.0, 0.0, depth])
    B = rng.normal(scale=0.35, size=(K, 3, 3))
    cov = B @ B.transpose(0, 2, 1) + 0.04 * np.eye(3)
    return GaussianScene(centers, np.linalg.inv(cov), rng.uniform(size=(K, attr_dim)))
