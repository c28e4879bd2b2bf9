import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gaussvol.bench import BenchResult, bench_one, cuboid_scene, run_grid
from gaussvol.cli import data_path, main
from gaussvol.convert import icosphere, read_obj, write_ply
from gaussvol.io import (
    atomic_write,
    read_json,
    read_pfm,
    read_png,
    read_report,
    to_uint8,
    write_json,
    write_pfm,
    write_png,
)
from gaussvol.scene import ValidationError, load_scene, orbit_camera
from gaussvol.tasks import textured_scene

GOLDEN = Path(__file__).parent / "data" / "render_golden.png"


def run(*argv):
    return main([str(a) for a in argv])


class TestCodecs:
    def test_png_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(7, 5, 3)) / 255.0
        write_png(tmp_path / "a.png", img)
        np.testing.assert_array_equal(read_png(tmp_path / "a.png"), img)

    def test_png_gray_and_clamp(self, tmp_path):
        write_png(tmp_path / "g.png", np.array([[-1.0, 0.5, 2.0]]))
        np.testing.assert_array_equal(read_png(tmp_path / "g.png")[..., 0], [[0.0, 128 / 255, 1.0]])

    def test_png_rejects_two_channels(self, tmp_path):
        with pytest.raises(ValidationError):
            write_png(tmp_path / "x.png", np.zeros((2, 2, 2)))
        assert not list(tmp_path.iterdir())

    def test_quantisation_rounds_half_up(self):
        np.testing.assert_array_equal(to_uint8([0.5 / 255, 1.5 / 255, 254.5 / 255]), [1, 2, 255])

    @pytest.mark.parametrize("shape", [(4, 6), (4, 6, 3)])
    def test_pfm_round_trip(self, tmp_path, rng, shape):
        img = rng.normal(size=shape).astype(np.float32).astype(np.float64)
        write_pfm(tmp_path / "a.pfm", img)
        np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)

    def test_pfm_rows_bottom_up(self, tmp_path):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        write_pfm(tmp_path / "a.pfm", img)
        raw = (tmp_path / "a.pfm").read_bytes()
        body = np.frombuffer(raw[-16:], "<f4")
        np.testing.assert_array_equal(body, [3, 4, 1, 2])

    def test_pfm_bad_header(self, tmp_path):
        (tmp_path / "x.pfm").write_bytes(b"P6\n1 1\n255\n\0\0\0")
        with pytest.raises(ValidationError):
            read_pfm(tmp_path / "x.pfm")


class TestAtomicWrite:
    def test_failure_leaves_nothing(self, tmp_path):
        target = tmp_path / "out.bin"
        with pytest.raises(RuntimeError):
            with atomic_write(target) as fh:
                fh.write(b"partial")
                raise RuntimeError("boom")
        assert list(tmp_path.iterdir()) == []

    def test_failure_keeps_old_file(self, tmp_path):
        target = tmp_path / "out.txt"
        target.write_text("old")
        with pytest.raises(RuntimeError):
            with atomic_write(target, "w") as fh:
                fh.write("new")
                raise RuntimeError
        assert target.read_text() == "old"

    def test_permissions_follow_umask(self, tmp_path):
        write_json(tmp_path / "a.json", {"x": 1})
        mask = os.umask(0)
        os.umask(mask)
        assert (tmp_path / "a.json").stat().st_mode & 0o777 == 0o666 & ~mask

    def test_json_helpers(self, tmp_path):
        write_json(tmp_path / "a.json", {"b": 1, "a": [1, 2]})
        assert read_json(tmp_path / "a.json") == {"a": [1, 2], "b": 1}
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ValidationError):
            read_json(tmp_path / "bad.json")
        with pytest.raises(FileNotFoundError):
            read_json(tmp_path / "missing.json")
        with pytest.raises(ValidationError):
            read_report(tmp_path / "a.json")


class TestRenderCommand:
    def test_golden_png(self, tmp_path):
        assert run("render", "--out", tmp_path / "r.png") == 0
        assert (tmp_path / "r.png").read_bytes() == GOLDEN.read_bytes()

    def test_missing_scene(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert run("render", "--scene", missing, "--out", tmp_path / "r.png") == 2
        assert str(missing) in capsys.readouterr().err
        assert not (tmp_path / "r.png").exists()

    def test_exhaustive_matches_coarse(self, tmp_path):
        run("render", "--pfm-dir", tmp_path / "a", "--out", tmp_path / "a.png")
        run("render", "--no-coarse", "--pfm-dir", tmp_path / "b", "--out", tmp_path / "b.png")
        a, b = read_pfm(tmp_path / "a" / "color.pfm"), read_pfm(tmp_path / "b" / "color.pfm")
        assert np.abs(a - b).max() < 1e-2
        for name in ("alpha.pfm", "weight_sum.pfm"):
            assert read_pfm(tmp_path / "a" / name).shape == (48, 48)

    def test_config_file_and_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"tau": 0.0}))
        run("render", "--config", cfg, "--pfm-dir", tmp_path, "--out", tmp_path / "clear.png")
        # no absorption: nothing is opaque
        assert not np.any(read_pfm(tmp_path / "alpha.pfm"))
        run("render", "--config", cfg, "--tau", "1.0", "--out", tmp_path / "lit.png")
        assert (tmp_path / "lit.png").read_bytes() == GOLDEN.read_bytes()

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"colour": 1}))
        assert run("render", "--config", cfg, "--out", tmp_path / "x.png") == 2
        assert "colour" in capsys.readouterr().err

    def test_threads_flag(self, tmp_path, monkeypatch):
        monkeypatch.delenv("GAUSSVOL_THREADS", raising=False)
        assert run("render", "--threads", "1", "--out", tmp_path / "r.png") == 0
        assert (tmp_path / "r.png").read_bytes() == GOLDEN.read_bytes()

    def test_module_entry_point(self, tmp_path):
        out = subprocess.run([sys.executable, "-m", "gaussvol.cli", "render", "--out", str(tmp_path / "r.png")],
                             capture_output=True, text=True)
        assert out.returncode == 0 and (tmp_path / "r.png").exists()


class TestConvertCommand:
    def test_cube_obj(self, tmp_path):
        assert run("convert", data_path("cube.obj"), "--zeta", "0.5", "--out", tmp_path / "s.json") == 0
        scene = load_scene(tmp_path / "s.json")
        assert len(scene) == 8
        # expected variance from the mean length of each vertex's mesh edges
        mesh = read_obj(data_path("cube.obj"))
        lengths = {v: [] for v in range(8)}
        for f in mesh.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                d = float(np.linalg.norm(mesh.vertices[a] - mesh.vertices[b]))
                lengths[a].append((min(a, b), max(a, b), d))
                lengths[b].append((min(a, b), max(a, b), d))
        for v in range(8):
            d = np.mean([e[2] for e in set(lengths[v])])
            np.testing.assert_allclose(scene.inv_covs[v], np.eye(3) * np.log(2.0) / (d / 2) ** 2)

    def test_invalid_zeta(self, tmp_path, capsys):
        assert run("convert", data_path("cube.obj"), "--zeta", "1.0", "--out", tmp_path / "s.json") == 2
        assert "zeta" in capsys.readouterr().err
        assert not (tmp_path / "s.json").exists()

    def test_ply_then_render(self, tmp_path):
        mesh = icosphere(2, 0.8)
        write_ply(mesh.vertices, tmp_path / "p.ply")
        assert run("convert", tmp_path / "p.ply", "--out", tmp_path / "s.json") == 0
        assert run("render", "--scene", tmp_path / "s.json", "--camera", data_path("pose_camera.json"),
                   "--out", tmp_path / "r.png") == 0
        assert read_png(tmp_path / "r.png").max() > 0.1

    def test_missing_input(self, capsys):
        assert run("convert") == 2


class TestOtherCommands:
    def test_gradcheck_bundled(self, tmp_path, capsys):
        assert run("gradcheck", "--out", tmp_path / "g.json") == 0
        assert capsys.readouterr().out.startswith("PASS gradcheck")
        assert read_report(tmp_path / "g.json")["kind"] == "gradcheck"

    def test_fit_shape_demo(self, tmp_path):
        rc = run("fit-shape", "--iters", 3, "--views", 4, "--resolution", 24, "--batch-views", 2,
                 "--out", tmp_path / "f.json", "--trace", tmp_path / "f.csv", "--scene-out", tmp_path / "s.json")
        assert rc == 0
        rep = read_report(tmp_path / "f.json")
        assert rep["kind"] == "fit-shape" and rep["iterations"] == 3
        assert {"initial_loss", "final_loss", "mean_iou"} <= set(rep["metrics"])
        assert len((tmp_path / "f.csv").read_text().splitlines()) == 4
        assert len(load_scene(tmp_path / "s.json")) == 642

    def test_fit_translation_short(self, tmp_path):
        assert run("fit-translation", "--iters", 2, "--resolution", 16, "--out", tmp_path / "t.json") == 0
        rep = read_report(tmp_path / "t.json")
        assert len(rep["params"]["offsets"]) == 2

    def test_fit_pose_short(self, tmp_path):
        scene = tmp_path / "s.json"
        write_json(scene, textured_scene(200).to_dict())
        cam = tmp_path / "c.json"
        write_json(cam, orbit_camera(30.0, 20.0, 2.5, 30.0, 24, 24).to_dict())
        assert run("fit-pose", "--scene", scene, "--camera", cam, "--iters", 2, "--out", tmp_path / "p.json") == 0
        assert "rotation_error" in read_report(tmp_path / "p.json")["metrics"]

    def test_extract_then_rerender(self, tmp_path):
        scene, cam = tmp_path / "s.json", tmp_path / "c.json"
        write_json(scene, textured_scene(300).to_dict())
        write_json(cam, orbit_camera(30.0, 20.0, 2.5, 38.4, 32, 32).to_dict())
        run("render", "--scene", scene, "--camera", cam, "--out", tmp_path / "obs.png")
        assert run("extract-texture", "--scene", scene, "--camera", cam, "--image", tmp_path / "obs.png",
                   "--out", tmp_path / "a.json") == 0
        for az in ("0", "30", "-30"):
            assert run("rerender", "--scene", scene, "--camera", cam, "--attrs", tmp_path / "a.json",
                       "--azimuth", az, "--out", tmp_path / f"re{az}.png") == 0
        assert read_png(tmp_path / "re0.png").max() > 0.1

    def test_extract_needs_inputs(self):
        assert run("extract-texture") == 2

    @pytest.mark.parametrize("argv", [
        ("gradcheck", "--random", "1", "--out", "{d}/x.json"),
        ("fit-translation", "--iters", "2", "--resolution", "16", "--random-start",
         "--out", "{d}/x.json", "--trace", "{d}/x.csv"),
    ])
    def test_byte_identical_under_seed(self, tmp_path, argv):
        outs = []
        for k in range(2):
            d = tmp_path / str(k)
            d.mkdir()
            assert run(*[a.format(d=d) for a in argv], "--seed", "5") == 0
            outs.append(sorted((p.name, p.read_bytes()) for p in d.iterdir()))
        assert outs[0] == outs[1]


class TestBench:
    def test_schema_round_trip(self, tmp_path):
        assert run("bench", "--kernels", 200, "--sizes", 32, "--repeats", 1, "--out", tmp_path / "b.json") == 0
        rep = read_report(tmp_path / "b.json")
        assert rep["kind"] == "bench"
        r = BenchResult.from_dict(rep["results"][0])
        assert r.kernels == 200 and r.height == 32 and r.images_per_second > 0
        assert BenchResult.from_dict(r.to_dict()) == r

    def test_positive_throughput_required(self):
        with pytest.raises(ValueError):
            BenchResult(1, 1, 1, True, "python", 1, 1, 1.0, 0.0, 0.0, 0.0, 0)

    def test_throughput_falls_with_area(self):
        res = run_grid([1000], [128, 256, 512], repeats=2)
        ips = [r.images_per_second for r in res]
        assert ips[0] > ips[1] > ips[2]

    def test_coarse_not_slower_at_scale(self):
        scene = cuboid_scene(16000)
        on = bench_one(scene, 512, coarse=True, repeats=1)
        off = bench_one(scene, 512, coarse=False, repeats=1)
        assert on.images_per_second >= off.images_per_second
        assert on.candidates_mean < off.candidates_mean
