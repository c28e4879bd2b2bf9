"""Compiled core vs NumPy fallback: forward and backward wall time.

    python3 benchmarks/bench_backends.py [--kernels 1000 4000] [--size 128] [--repeats 3]
"""

import argparse
import time

import numpy as np

from gaussvol import _backend
from gaussvol.bench import cuboid_scene
from gaussvol.blender import render
from gaussvol.grad import backward
from gaussvol.scene import orbit_camera


def timed(fn, repeats):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn()
    return (time.perf_counter() - t0) / repeats, out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--kernels", type=int, nargs="+", default=[1000, 4000])
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    if "compiled" not in _backend.BACKENDS:
        print("compiled core not built; only the NumPy fallback is available")
    cam = orbit_camera(30.0, 20.0, 2.5, 1.2 * args.size, args.size, args.size)
    print(f"{'kernels':>8} {'backend':>9} {'forward ms':>11} {'backward ms':>12} {'max |diff|':>11}")
    for n in args.kernels:
        scene = cuboid_scene(n)
        ref = None
        for name in sorted(_backend.BACKENDS):
            t_fwd, buf = timed(lambda: render(scene, cam, backend=name), args.repeats)
            d_img = np.ones_like(buf.image) / buf.image.size
            t_bwd, _ = timed(lambda: backward(buf, d_img, backend=name), args.repeats)
            diff = 0.0 if ref is None else float(np.abs(buf.image - ref).max())
            ref = buf.image if ref is None else ref
            print(f"{n:>8} {name:>9} {1e3 * t_fwd:>11.1f} {1e3 * t_bwd:>12.1f} {diff:>11.2e}")


if __name__ == "__main__":
    main()
