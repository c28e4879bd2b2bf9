"""Inverse rendering: losses, mesh regularizers, Adam, and fitting loops."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .blender import RenderBuffers, render
from .grad import (
    GradientBundle,
    GradientFlags,
    axis_angle_grad,
    axis_angle_to_matrix,
    backward,
    matrix_to_axis_angle,
)
from .scene import Camera, GaussianScene, ValidationError
from .tracer import SelectionConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossSpec:
    rgb_weight: float = 1.0
    silhouette_weight: float = 1.0
    edge_weight: float = 0.0
    laplacian_weight: float = 0.0

    def __post_init__(self):
        w = (self.rgb_weight, self.silhouette_weight, self.edge_weight, self.laplacian_weight)
        if any(x < 0 for x in w):
            raise ValidationError("loss weights must be non-negative")
        if not any(x > 0 for x in w):
            raise ValidationError("at least one loss weight must be positive")


@dataclass(frozen=True, eq=False)
class Target:
    """One observed view: image (H, W, D), silhouette (H, W) and its camera."""

    image: np.ndarray
    alpha: np.ndarray
    camera: Camera

    @classmethod
    def from_render(cls, scene: GaussianScene, camera: Camera, cfg=None) -> Target:
        buf = render(scene, camera, cfg)
        return cls(buf.image, buf.alpha, camera)

    @classmethod
    def from_photo(cls, image: np.ndarray, camera: Camera, threshold: float = 0.01) -> Target:
        """External image: silhouette from thresholded luminance."""
        image = np.asarray(image, dtype=np.float64)
        lum = image.mean(axis=-1) if image.ndim == 3 else image
        return cls(image, (lum > threshold).astype(np.float64), camera)


# --- optimiser -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a dict of named numpy arrays."""

    def __init__(self, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, params: dict, grads: dict, lr: float | None = None) -> dict:
        st = self.state
        st.step += 1
        lr = st.lr if lr is None else lr
        out = {}
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if name not in st.m:
                st.m[name] = np.zeros_like(g)
                st.v[name] = np.zeros_like(g)
            st.m[name] = st.beta1 * st.m[name] + (1 - st.beta1) * g
            st.v[name] = st.beta2 * st.v[name] + (1 - st.beta2) * g * g
            mhat = st.m[name] / (1 - st.beta1 ** st.step)
            vhat = st.v[name] / (1 - st.beta2 ** st.step)
            out[name] = p - lr * mhat / (np.sqrt(vhat) + st.eps)
        return out


def _lr_at(lr: float, it: int, iters: int, final_factor: float) -> float:
    if final_factor == 1.0 or iters <= 1:
        return lr
    return lr * final_factor ** (it / (iters - 1))


# --- regularisers ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Edges of the source mesh plus the rest state the regularisers compare to."""

    edges: np.ndarray          # (E, 2)
    rest_lengths: np.ndarray   # (E,)
    rest_laplacian: np.ndarray  # (N, 3)
    n: int

    @classmethod
    def from_edges(cls, edges, rest_centers) -> NeighborGraph:
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.shape[0] == 0:
            raise ValidationError("neighbor graph has no edges")
        rest = np.asarray(rest_centers, dtype=np.float64)
        g = cls(edges, np.zeros(edges.shape[0]), np.zeros_like(rest), rest.shape[0])
        lengths = np.linalg.norm(rest[edges[:, 0]] - rest[edges[:, 1]], axis=1)
        return cls(edges, lengths, g.umbrella(rest), rest.shape[0])

    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n).astype(np.float64)

    def umbrella(self, x: np.ndarray) -> np.ndarray:
        """Uniform Laplacian ``x_i - mean_{j ~ i} x_j`` (zero for isolated vertices)."""
        deg = self.degree()
        nb = np.zeros_like(x)
        a, b = self.edges[:, 0], self.edges[:, 1]
        np.add.at(nb, a, x[b])
        np.add.at(nb, b, x[a])
        safe = np.maximum(deg, 1.0)[:, None]
        return np.where(deg[:, None] > 0, x - nb / safe, 0.0)


def _check_graph(graph: NeighborGraph | None) -> NeighborGraph:
    if graph is None or graph.edges.shape[0] == 0:
        raise ValidationError("regulariser needs a non-empty neighbor graph")
    return graph


def edge_reg(centers, graph: NeighborGraph) -> tuple[float, np.ndarray]:
    """Mean squared deviation of edge lengths from their rest lengths."""
    graph = _check_graph(graph)
    x = np.asarray(centers, dtype=np.float64)
    a, b = graph.edges[:, 0], graph.edges[:, 1]
    d = x[a] - x[b]
    length = np.linalg.norm(d, axis=1)
    dev = length - graph.rest_lengths
    E = dev.size
    value = float(np.mean(dev * dev))
    coef = (2.0 * dev / E / np.maximum(length, 1e-12))[:, None] * d
    grad = np.zeros_like(x)
    np.add.at(grad, a, coef)
    np.add.at(grad, b, -coef)
    return value, grad


def laplacian_reg(centers, graph: NeighborGraph) -> tuple[float, np.ndarray]:
    """Mean squared change of the uniform Laplacian relative to the rest shape."""
    graph = _check_graph(graph)
    x = np.asarray(centers, dtype=np.float64)
    r = graph.umbrella(x) - graph.rest_laplacian
    N = x.shape[0]
    value = float((r * r).sum() / N)
    g_delta = 2.0 * r / N
    # adjoint of the umbrella operator
    deg = graph.degree()
    safe = np.maximum(deg, 1.0)[:, None]
    scaled = np.where(deg[:, None] > 0, g_delta / safe, 0.0)
    grad = g_delta.copy()
    a, b = graph.edges[:, 0], graph.edges[:, 1]
    np.add.at(grad, b, -scaled[a])
    np.add.at(grad, a, -scaled[b])
    return value, grad


# --- losses --------------------------------------------------------------------

def view_loss(buf: RenderBuffers, target: Target, spec: LossSpec):
    """Weighted image + silhouette MSE for one view, with its output derivatives."""
    r = buf.image - target.image
    ra = buf.alpha - target.alpha
    loss = spec.rgb_weight * float(np.mean(r * r)) + spec.silhouette_weight * float(np.mean(ra * ra))
    d_image = spec.rgb_weight * 2.0 * r / r.size
    d_alpha = spec.silhouette_weight * 2.0 * ra / ra.size
    return loss, d_image, d_alpha


FREE_PARAMS = ("centers", "attrs", "translation", "pose")


def loss_and_grad(
    scene: GaussianScene,
    targets: Sequence[Target],
    spec: LossSpec,
    free: Sequence[str] = ("centers", "attrs"),
    graph: NeighborGraph | None = None,
    cfg: SelectionConfig | None = None,
    flags: GradientFlags | None = None,
):
    """Total loss over ``targets`` and gradients for the free quantities.

    Returns ``(loss, grads)`` where ``grads`` may hold ``centers`` (K, 3),
    ``attrs`` (K, D) and, for camera quantities, per-view lists ``d_R`` and
    ``d_T``.
    """
    free = tuple(free)
    if not free:
        raise ValidationError("no free parameters to optimise")
    unknown = set(free) - set(FREE_PARAMS)
    if unknown:
        raise ValidationError(f"unknown free parameters {sorted(unknown)}")
    total = 0.0
    acc = GradientBundle.zeros(len(scene), scene.attr_dim)
    per_view = []
    for t in targets:
        buf = render(scene, t.camera, cfg)
        loss, d_img, d_alpha = view_loss(buf, t, spec)
        g = backward(buf, d_img, d_alpha, flags=flags)
        total += loss
        acc = acc + g
        per_view.append(g)
    grads: dict = {}
    if "centers" in free or "translation" in free:
        grads["centers"] = acc.d_center.copy()
    if "attrs" in free:
        grads["attrs"] = acc.d_attr
    if "pose" in free:
        grads["d_R"] = [g.d_R for g in per_view]
        grads["d_T"] = [g.d_T for g in per_view]
    if graph is not None and "centers" in free:
        if spec.edge_weight:
            v, gr = edge_reg(scene.centers, graph)
            total += spec.edge_weight * v
            grads["centers"] += spec.edge_weight * gr
        if spec.laplacian_weight:
            v, gr = laplacian_reg(scene.centers, graph)
            total += spec.laplacian_weight * v
            grads["centers"] += spec.laplacian_weight * gr
    return total, grads


# --- metrics -------------------------------------------------------------------

def _check_rotation(R, name):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
        raise ValidationError(f"{name} is not a rotation matrix")
    return R


def rotation_error(R_pred, R_gt) -> float:
    """Geodesic angle between two rotations, in radians."""
    A = _check_rotation(R_pred, "R_pred")
    B = _check_rotation(R_gt, "R_gt")
    rel = A.T @ B
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    # arccos loses precision near 0 and pi; combine with the skew part
    s = np.linalg.norm(np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])) / 2.0
    return float(math.atan2(s, c))


def silhouette_iou(alpha_a, alpha_b, threshold: float = 0.5) -> float:
    a = np.asarray(alpha_a) > threshold
    b = np.asarray(alpha_b) > threshold
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def psnr(a, b, mask=None, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    err = (a - b) ** 2
    if mask is not None:
        err = err[np.asarray(mask, bool)]
    mse = float(np.mean(err)) if err.size else 0.0
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


# --- reports -------------------------------------------------------------------

@dataclass
class FitReport:
    losses: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    status: str = "ok"
    scene: GaussianScene | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.losses)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (list, tuple)):
                return [conv(x) for x in v]
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v

        return {
            "status": self.status,
            "iterations": self.iterations,
            "losses": [float(x) for x in self.losses],
            "params": conv(self.params),
            "metrics": conv(self.metrics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def losses_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, x in enumerate(self.losses):
            w.writerow([i, repr(float(x))])
        return out.getvalue()


# --- fitting loops -------------------------------------------------------------

# below this the gradient is round-off, which Adam would rescale into full-size steps
LOSS_TOL = 1e-14


def _finite(x: float) -> bool:
    return math.isfinite(x)


def evaluate_views(scene, targets, spec, cfg=None):
    """Full loss over every view plus the mean silhouette IoU."""
    total, ious = 0.0, []
    for t in targets:
        buf = render(scene, t.camera, cfg)
        total += view_loss(buf, t, spec)[0]
        ious.append(silhouette_iou(buf.alpha, t.alpha))
    return total, float(np.mean(ious)) if ious else 1.0


def fit_shape(
    init_scene: GaussianScene,
    targets: Sequence[Target],
    spec: LossSpec,
    iters: int = 2000,
    batch_views: int = 5,
    lr: float = 0.01,
    attr_lr: float | None = None,
    lr_final_factor: float = 1.0,
    graph: NeighborGraph | None = None,
    seed: int = 0,
    cfg: SelectionConfig | None = None,
    callback: Callable | None = None,
    loss_tol: float = LOSS_TOL,
) -> FitReport:
    """Adam over kernel centers and attributes against multi-view targets.

    Each iteration draws ``batch_views`` of the targets without replacement.
    """
    rng = np.random.default_rng(seed)
    scene = init_scene
    init_loss, init_iou = evaluate_views(scene, targets, spec, cfg)
    report = FitReport(metrics={"initial_loss": init_loss, "initial_iou": init_iou})
    opt = Adam(lr=lr)
    attr_scale = (attr_lr if attr_lr is not None else lr) / lr
    params = {"centers": scene.centers.copy(), "attrs": scene.attrs.copy()}
    nb = min(batch_views, len(targets))
    for it in range(iters):
        pick = rng.choice(len(targets), size=nb, replace=False)
        loss, grads = loss_and_grad(
            scene, [targets[i] for i in pick], spec, ("centers", "attrs"), graph, cfg
        )
        report.losses.append(loss)
        if not _finite(loss):
            report.status = "diverged"
            break
        if loss <= loss_tol:
            break
        grads = {"centers": grads["centers"], "attrs": grads["attrs"]}
        step_lr = _lr_at(lr, it, iters, lr_final_factor)
        new = opt.step(params, grads, lr=step_lr)
        # separate attribute step size without a second optimiser
        new["attrs"] = params["attrs"] + attr_scale * (new["attrs"] - params["attrs"])
        params = new
        scene = scene.replace(centers=params["centers"], attrs=params["attrs"], validate=False)
        if callback:
            callback(it, loss, scene)
    final_loss, final_iou = evaluate_views(scene, targets, spec, cfg)
    report.metrics.update(final_loss=final_loss, mean_iou=final_iou)
    report.params = {"centers": scene.centers, "attrs": scene.attrs}
    report.scene = scene
    return report


def assemble(parts: Sequence[GaussianScene], offsets) -> GaussianScene:
    offsets = np.asarray(offsets, dtype=np.float64).reshape(len(parts), 3)
    return GaussianScene.concat([p.replace(centers=p.centers + o, validate=False)
                                 for p, o in zip(parts, offsets)])


def fit_translation(
    parts: Sequence[GaussianScene],
    target: Target,
    init_offsets,
    iters: int = 500,
    lr: float = 0.05,
    lr_final_factor: float = 1.0,
    spec: LossSpec | None = None,
    cfg: SelectionConfig | None = None,
    flags: GradientFlags | None = None,
    gt_offsets=None,
    callback: Callable | None = None,
    loss_tol: float = LOSS_TOL,
) -> FitReport:
    """Adam on one free translation per rigid group against a single view."""
    spec = spec or LossSpec(rgb_weight=1.0, silhouette_weight=0.0)
    sizes = [len(p) for p in parts]
    group = np.repeat(np.arange(len(parts)), sizes)
    offsets = np.asarray(init_offsets, dtype=np.float64).reshape(len(parts), 3).copy()
    opt = Adam(lr=lr)
    report = FitReport()
    for it in range(iters):
        scene = assemble(parts, offsets)
        loss, grads = loss_and_grad(scene, [target], spec, ("translation",), None, cfg, flags)
        report.losses.append(loss)
        if not _finite(loss):
            report.status = "diverged"
            break
        if loss <= loss_tol:
            break
        g = np.zeros_like(offsets)
        np.add.at(g, group, grads["centers"])
        offsets = opt.step({"t": offsets}, {"t": g}, lr=_lr_at(lr, it, iters, lr_final_factor))["t"]
        if callback:
            callback(it, loss, offsets)
    report.params = {"offsets": offsets}
    if gt_offsets is not None:
        err = np.linalg.norm(offsets - np.asarray(gt_offsets, float).reshape(offsets.shape), axis=1)
        report.metrics.update(translation_error=err, max_translation_error=float(err.max()))
    return report


def _pose_loss(scene, camera, target, spec, cfg):
    buf = render(scene, camera, cfg)
    loss, d_img, d_alpha = view_loss(buf, target, spec)
    return loss, buf, d_img, d_alpha


def fit_pose(
    scene: GaussianScene,
    target: Target,
    init_pose,
    iters: int = 300,
    lr: float = 0.05,
    lr_final_factor: float = 1.0,
    spec: LossSpec | None = None,
    cfg: SelectionConfig | None = None,
    gt_pose=None,
    optimize_translation: bool = True,
    loss_tol: float = LOSS_TOL,
) -> FitReport:
    """Render-and-compare camera pose refinement.

    ``init_pose`` is ``(axis_angle, T)`` or a list of them for multi-start;
    the start with the lowest final loss wins.
    """
    spec = spec or LossSpec(rgb_weight=1.0, silhouette_weight=1.0)
    starts = init_pose if isinstance(init_pose, list) else [init_pose]
    cam0 = target.camera
    runs = []
    for w0, T0 in starts:
        w = np.asarray(w0, float).copy()
        T = np.asarray(T0, float).copy()
        opt = Adam(lr=lr)
        losses = []
        status = "ok"
        for it in range(iters):
            cam = cam0.with_pose(axis_angle_to_matrix(w), T)
            loss, buf, d_img, d_alpha = _pose_loss(scene, cam, target, spec, cfg)
            losses.append(loss)
            if not _finite(loss):
                status = "diverged"
                break
            if loss <= loss_tol:
                break
            g = backward(buf, d_img, d_alpha)
            params = {"w": w, "T": T}
            grads = {"w": axis_angle_grad(g.d_R, w), "T": g.d_T if optimize_translation else np.zeros(3)}
            new = opt.step(params, grads, lr=_lr_at(lr, it, iters, lr_final_factor))
            w, T = new["w"], new["T"]
        cam = cam0.with_pose(axis_angle_to_matrix(w), T)
        final = _pose_loss(scene, cam, target, spec, cfg)[0]
        runs.append({"losses": losses, "w": w, "T": T, "final_loss": final, "status": status})
    best = min(range(len(runs)), key=lambda i: runs[i]["final_loss"])
    b = runs[best]
    R = axis_angle_to_matrix(b["w"])
    report = FitReport(losses=b["losses"], status=b["status"])
    report.params = {"axis_angle": b["w"], "R": R, "T": b["T"]}
    report.metrics = {
        "best_start": best,
        "start_final_losses": [r["final_loss"] for r in runs],
        "final_loss": b["final_loss"],
    }
    if gt_pose is not None:
        R_gt = gt_pose[0] if np.asarray(gt_pose[0]).shape == (3, 3) else axis_angle_to_matrix(gt_pose[0])
        report.metrics["rotation_error"] = rotation_error(R, R_gt)
        report.metrics["start_rotation_errors"] = [
            rotation_error(axis_angle_to_matrix(r["w"]), R_gt) for r in runs
        ]
    return report


__all__ = [
    "Adam", "AdamState", "FitReport", "LossSpec", "NeighborGraph", "Target", "assemble",
    "edge_reg", "evaluate_views", "fit_pose", "fit_shape", "fit_translation", "laplacian_reg",
    "loss_and_grad", "matrix_to_axis_angle", "psnr", "rotation_error", "silhouette_iou",
    "view_loss",
]
