"""Ready-made synthetic problems shared by the CLI demos, benchmarks and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convert import (
    ConvertConfig,
    cuboid_mesh,
    cuboid_points,
    icosphere,
    mesh_to_gaussians,
    neighbor_graph,
    pointcloud_to_gaussians,
)
from .fit import NeighborGraph, Target, assemble
from .scene import Camera, GaussianScene, orbit_camera

# occludee sits off to the side so part of it stays visible
OCCLUDEE_SHIFT = (0.8, 0.6)
OCCLUDER_DEPTH = 6.0
FIXED_PERTURBATION = np.array([[0.3, -0.2, 0.4], [-0.3, 0.3, -0.4]])


def colored_cuboid(size, color, divisions: int = 4) -> GaussianScene:
    scene = mesh_to_gaussians(cuboid_mesh(size, divisions))
    return scene.with_attrs(np.tile(np.asarray(color, float), (len(scene), 1)))


@dataclass(frozen=True, eq=False)
class OcclusionTask:
    parts: list
    target: Target
    gt_offsets: np.ndarray

    def start(self, seed: int | None = None, magnitude: float = 0.4) -> np.ndarray:
        """Perturbed initial offsets: the fixed default, or uniform noise for ``seed``."""
        if seed is None:
            return self.gt_offsets + FIXED_PERTURBATION
        rng = np.random.default_rng(seed)
        return self.gt_offsets + rng.uniform(-magnitude, magnitude, self.gt_offsets.shape)


def occlusion_task(separation: float, resolution: int = 64, divisions: int = 4) -> OcclusionTask:
    """Red 1 x 1 x 0.6 occluder with a unit blue cube ``separation`` units behind it.

    The camera sits at the origin looking down +z.
    """
    red = colored_cuboid((1.0, 1.0, 0.6), (1.0, 0.0, 0.0), divisions)
    blue = colored_cuboid((1.0, 1.0, 1.0), (0.0, 0.0, 1.0), divisions)
    gt = np.array([
        [0.0, 0.0, OCCLUDER_DEPTH],
        [OCCLUDEE_SHIFT[0], OCCLUDEE_SHIFT[1], OCCLUDER_DEPTH + separation],
    ])
    cam = Camera.identity(1.2 * resolution, resolution, resolution)
    target = Target.from_render(assemble([red, blue], gt), cam)
    return OcclusionTask([red, blue], target, gt)


def ring_cameras(n: int, resolution: int, distance: float = 4.0) -> list[Camera]:
    """``n`` cameras around the origin at alternating elevations."""
    az = np.linspace(0.0, 360.0, n, endpoint=False)
    el = np.resize([-30.0, 0.0, 30.0, 15.0], n)
    return [orbit_camera(a, e, distance, 1.3 * resolution, resolution, resolution)
            for a, e in zip(az, el)]


@dataclass(frozen=True, eq=False)
class ShapeTask:
    init: GaussianScene
    targets: list
    graph: NeighborGraph
    target_scene: GaussianScene


def shape_task(
    views: int = 20,
    resolution: int = 64,
    sphere_level: int = 3,
    sphere_radius: float = 0.6,
    box=(1.4, 1.0, 1.0),
) -> ShapeTask:
    """Grey icosphere to be deformed into an orange box seen from ``views`` cameras."""
    sphere = icosphere(sphere_level, sphere_radius)
    init = mesh_to_gaussians(sphere)
    init = init.with_attrs(np.full((len(init), 3), 0.5))
    goal = colored_cuboid(box, (0.8, 0.5, 0.2), divisions=8)
    targets = [Target.from_render(goal, c) for c in ring_cameras(views, resolution)]
    graph = NeighborGraph.from_edges(neighbor_graph(sphere), init.centers)
    return ShapeTask(init, targets, graph, goal)


def textured_scene(n: int = 1000, seed: int = 0) -> GaussianScene:
    """Box surface with ``n`` kernels and smoothly varying colours."""
    cloud = cuboid_points(n, size=(1.0, 0.8, 0.6), seed=seed)
    scene = pointcloud_to_gaussians(cloud, ConvertConfig())
    p = scene.centers
    colors = 0.5 + 0.4 * np.stack(
        [np.sin(4 * p[:, 0]), np.cos(5 * p[:, 1]), np.sin(3 * p[:, 2] + 1)], axis=1
    )
    return scene.with_attrs(colors)
