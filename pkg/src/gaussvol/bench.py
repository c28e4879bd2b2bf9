"""Throughput benchmark over synthetic cuboid scenes.

Numbers are CPU images/second and are not comparable to GPU figures.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .blender import render
from .convert import cuboid_points, pointcloud_to_gaussians
from .scene import GaussianScene, orbit_camera
from .tracer import SelectionConfig

KERNEL_COUNTS = (1000, 4000, 16000)
IMAGE_SIZES = (128, 256, 512)


@dataclass(frozen=True)
class BenchResult:
    kernels: int
    height: int
    width: int
    coarse: bool
    backend: str
    threads: int
    repeats: int
    wall_time: float
    images_per_second: float
    candidates_mean: float
    selected_mean: float
    selected_max: int

    def __post_init__(self):
        if not self.images_per_second > 0:
            raise ValueError("images_per_second must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> BenchResult:
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


def cuboid_scene(n: int, seed: int = 0) -> GaussianScene:
    cloud = cuboid_points(n, size=(1.0, 0.8, 0.6), seed=seed)
    scene = pointcloud_to_gaussians(cloud)
    rng = np.random.default_rng(seed)
    return scene.with_attrs(rng.uniform(0.2, 1.0, size=(n, 3)))


def bench_one(
    scene: GaussianScene,
    size: int,
    coarse: bool = True,
    repeats: int = 3,
    backend: str | None = None,
    threads: int | None = None,
) -> BenchResult:
    from . import _backend

    cam = orbit_camera(30.0, 20.0, 2.5, 1.2 * size, size, size)
    cfg = SelectionConfig(coarse_enabled=coarse)
    buf = render(scene, cam, cfg, backend=backend, threads=threads)  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        render(scene, cam, cfg, backend=backend, threads=threads)
    wall = time.perf_counter() - t0
    km = buf.tape.kernel_map
    per_pixel = np.diff(km.cell_ptr)[km.pix_cell]
    return BenchResult(
        kernels=len(scene),
        height=size,
        width=size,
        coarse=coarse,
        backend=backend or _backend.ACTIVE,
        threads=threads or _backend.default_threads(),
        repeats=repeats,
        wall_time=wall,
        images_per_second=repeats / max(wall, 1e-12),
        candidates_mean=float(per_pixel.mean()),
        selected_mean=float(buf.tape.n_sel.mean()),
        selected_max=int(buf.tape.n_sel.max()),
    )


def run_grid(
    kernel_counts=KERNEL_COUNTS,
    sizes=IMAGE_SIZES,
    coarse=(True,),
    repeats: int = 3,
    seed: int = 0,
    backend: str | None = None,
    threads: int | None = None,
    progress=None,
) -> list[BenchResult]:
    out = []
    for n in kernel_counts:
        scene = cuboid_scene(n, seed)
        for size in sizes:
            for c in coarse:
                r = bench_one(scene, size, c, repeats, backend, threads)
                if progress:
                    progress(r)
                out.append(r)
    return out
