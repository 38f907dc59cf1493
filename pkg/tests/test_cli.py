"""Command-line verbs, exit codes, and output determinism."""

import contextlib
import hashlib
import io
import json
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest
from PIL import Image as PILImage

from volprim.cameras import Perspective, Pose
from volprim.cli import cli_main
from volprim.geometry import PrimitiveFrame
from volprim.grid import voxelize
from volprim.integrators import RenderSettings
from volprim.kernels import KernelKind
from volprim.medium import Mixture, Primitive
from volprim.sceneio import (SceneFile, load_scene, read_pfm, read_vpg,
                             read_vpm, save_scene)

# Hash of the default transmittance render of the bundled toy scene.
# Regenerate only if the scene file or the closed-form path changes.
SMOKE_GOLDEN_SHA256 = \
    "07fa178aed6f03afe95a934655ee35b9bda3046d498b45478d7a2e048c992a98"


def smoke_scene_path():
    return str(resources.files("volprim") / "data" / "smoke_toy.json")


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli_main(argv)
    return code, out.getvalue(), err.getvalue()


def sha256_of(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def gradcheck_scene(tmp_path):
    """Three moderately sized blobs; every axis is FD-friendly."""
    r = np.random.default_rng(3)
    prims = []
    for _ in range(3):
        prims.append(Primitive(
            PrimitiveFrame(r.uniform(-0.5, 0.5, 3), r.uniform(-0.6, 0.6, 3),
                           r.uniform(0.15, 0.45, 3)),
            kind=KernelKind.GAUSSIAN, sigma=float(r.uniform(0.8, 1.6)),
            albedo=r.uniform(0.3, 0.9, 3), phase_g=float(r.uniform(-0.4, 0.4)),
            sh_coeffs=np.concatenate([r.uniform(0.5, 1.5, (3, 1)),
                                      r.normal(0.0, 0.15, (3, 3))], axis=1)))
    cam = Perspective(Pose([0.0, 0.2, -3.0], [0.0, 0.0, 0.0]), 35.0, 12, 10)
    sf = SceneFile(Mixture(prims), np.array([0.7, 0.9, 1.1]), [cam],
                   RenderSettings(spp=1, seed=0))
    p = tmp_path / "gradcheck_scene.json"
    save_scene(sf, p)
    return str(p)


class TestRender:
    def test_smoke_scene_matches_committed_golden(self, tmp_path):
        out = tmp_path / "smoke.pfm"
        code, _, _ = run_cli(["render", smoke_scene_path(), "--out", str(out)])
        assert code == 0
        assert sha256_of(out) == SMOKE_GOLDEN_SHA256

    def test_same_argv_same_bytes(self, tmp_path):
        a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
        argv = ["render", smoke_scene_path(), "--integrator", "vprf",
                "--spp", "2", "--seed", "9"]
        assert run_cli(argv + ["--out", str(a)])[0] == 0
        assert run_cli(argv + ["--out", str(b)])[0] == 0
        assert sha256_of(a) == sha256_of(b)

    def test_seed_changes_stochastic_output(self, tmp_path):
        a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
        run_cli(["render", smoke_scene_path(), "--integrator", "vppt",
                 "--spp", "2", "--seed", "1", "--out", str(a)])
        run_cli(["render", smoke_scene_path(), "--integrator", "vppt",
                 "--spp", "2", "--seed", "2", "--out", str(b)])
        assert sha256_of(a) != sha256_of(b)

    def test_png_output(self, tmp_path):
        out, png = tmp_path / "x.pfm", tmp_path / "x.png"
        code, _, _ = run_cli(["render", smoke_scene_path(), "--out", str(out),
                              "--png", str(png), "--exposure", "1.5"])
        assert code == 0
        arr = np.asarray(PILImage.open(png))
        sf = load_scene(smoke_scene_path())
        cam = sf.cameras[0]
        assert arr.shape == (cam.height, cam.width, 3)

    def test_mode_and_depth_flags_reach_renderer(self, tmp_path):
        a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
        base = ["render", smoke_scene_path(), "--integrator", "vppt",
                "--spp", "2", "--seed", "4"]
        assert run_cli(base + ["--max-depth", "0", "--out", str(a)])[0] == 0
        assert run_cli(base + ["--max-depth", "8", "--out", str(b)])[0] == 0
        # depth 0 kills all scattering, so the images must differ
        assert sha256_of(a) != sha256_of(b)

    def test_tessellated_shell_approaches_analytic(self, tmp_path):
        a, s = tmp_path / "a.pfm", tmp_path / "s.pfm"
        run_cli(["render", smoke_scene_path(), "--out", str(a)])
        code, _, _ = run_cli(["render", smoke_scene_path(), "--shell",
                              "icosphere:2", "--out", str(s)])
        assert code == 0
        diff = np.abs(read_pfm(a) - read_pfm(s))
        assert diff.max() < 2e-2
        assert diff.mean() < 5e-4


class TestExitCodes:
    def test_unknown_verb_is_usage_error(self):
        code, _, err = run_cli(["frobnicate"])
        assert code == 1 and "usage" in err

    def test_unknown_flag_is_usage_error(self, tmp_path):
        code, _, err = run_cli(["render", smoke_scene_path(), "--out",
                                str(tmp_path / "x.pfm"), "--nope"])
        assert code == 1 and "--nope" in err

    def test_no_verb_is_usage_error(self):
        code, _, err = run_cli([])
        assert code == 1

    def test_shell_with_stochastic_integrator_is_usage_error(self, tmp_path):
        code, _, err = run_cli(["render", smoke_scene_path(), "--shell",
                                "icosphere:1", "--integrator", "vprf",
                                "--out", str(tmp_path / "x.pfm")])
        assert code == 1 and "transmittance" in err

    def test_bad_shell_values_are_usage_errors(self, tmp_path):
        out = str(tmp_path / "x.pfm")
        for shell in ("icosphere:lots", "icosphere:9", "cube"):
            code, _, _ = run_cli(["render", smoke_scene_path(), "--shell",
                                  shell, "--out", out])
            assert code == 1, shell

    def test_missing_scene_is_runtime_error(self, tmp_path):
        code, _, err = run_cli(["render", str(tmp_path / "missing.json"),
                                "--out", str(tmp_path / "x.pfm")])
        assert code == 2

    def test_invalid_scene_is_runtime_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"version": 1}')
        code, _, err = run_cli(["render", str(bad), "--out",
                                str(tmp_path / "x.pfm")])
        assert code == 2 and "mixture" in err

    def test_camera_index_out_of_range_is_runtime_error(self, tmp_path):
        code, _, err = run_cli(["render", smoke_scene_path(), "--camera", "7",
                                "--out", str(tmp_path / "x.pfm")])
        assert code == 2 and "camera index" in err


class TestGradcheck:
    def test_three_primitive_scene_passes_bar(self, tmp_path):
        scene = gradcheck_scene(tmp_path)
        code, out, _ = run_cli(["gradcheck", scene])
        assert code == 0
        last = out.strip().splitlines()[-1]
        assert "checked partials pass" in last
        pct = float(last.split("(")[1].split("%")[0])
        assert pct >= 95.0

    def test_table_lists_every_parameter(self, tmp_path):
        scene = gradcheck_scene(tmp_path)
        code, out, _ = run_cli(["gradcheck", scene, "--integrator",
                                "transmittance"])
        assert code == 0
        # 3 primitives x (3 mean + 3 euler + 3 scale + 1 sigma + 3 albedo
        # + 1 phase + 12 sh) = 78 rows plus header and summary
        rows = [l for l in out.splitlines()
                if l.startswith(("p0.", "p1.", "p2."))]
        assert len(rows) == 78
        assert any("p2.sh" in r for r in rows)


class TestVoxelize:
    def test_writes_grid_matching_library_call(self, tmp_path):
        out = tmp_path / "g.vpg"
        code, _, _ = run_cli(["voxelize", smoke_scene_path(), "--res", "24",
                              "--out", str(out)])
        assert code == 0
        back = read_vpg(out)
        ref = voxelize(load_scene(smoke_scene_path()).mixture, 24)
        assert np.array_equal(back.data, ref.data.astype(np.float32))

    def test_zero_res_is_usage_error(self, tmp_path):
        code, _, _ = run_cli(["voxelize", smoke_scene_path(), "--res", "0",
                              "--out", str(tmp_path / "g.vpg")])
        assert code == 1


class TestBench:
    def test_variance_column_separates_estimators(self):
        code, out, _ = run_cli(["bench", smoke_scene_path(), "--rays", "16",
                                "--repeats", "4", "--res", "48"])
        assert code == 0
        lines = out.splitlines()
        closed = next(l for l in lines if l.startswith("closed-form"))
        ratio = next(l for l in lines if l.startswith("ratio tracking"))
        delta = next(l for l in lines if l.startswith("delta tracking"))
        assert float(closed.split()[-1]) == 0.0
        assert float(ratio.split()[-1]) > 0.0
        assert float(delta.split()[-1]) > 0.0


class TestFit:
    def test_fit_verb_writes_all_outputs(self, tmp_path):
        cfg = {
            "targets": {"from_scene": smoke_scene_path(),
                        "integrator": "transmittance"},
            "initial": {"scene": smoke_scene_path()},
            "fit": {"iters": 6, "integrator": "transmittance",
                    "optimize_fields": ["sigma"], "lr_sigma": 0.05},
            "out_mixture": str(tmp_path / "fit.vpm"),
            "out_scene": str(tmp_path / "fit.json"),
            "out_metrics": str(tmp_path / "fit.csv"),
        }
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps(cfg))
        code, out, _ = run_cli(["fit", str(cfgp)])
        assert code == 0 and "fit done" in out
        mix = read_vpm(tmp_path / "fit.vpm")
        assert len(mix) == 3
        scene = load_scene(tmp_path / "fit.json")
        assert len(scene.mixture) == 3
        lines = (tmp_path / "fit.csv").read_text().strip().splitlines()
        assert lines[0].startswith("iteration,loss,psnr,ssim")
        assert len(lines) == 7

    def test_config_typo_gets_suggestion(self, tmp_path):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps({"targest": {"from_scene": "x"}}))
        code, _, err = run_cli(["fit", str(cfgp)])
        assert code == 2 and "targets" in err

    def test_single_start_requires_bbox(self, tmp_path):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps({
            "targets": {"from_scene": smoke_scene_path()},
            "initial": "single",
            "fit": {"iters": 1},
        }))
        code, _, err = run_cli(["fit", str(cfgp)])
        assert code == 2 and "bbox" in err

    def test_config_syntax_error_reports_position(self, tmp_path):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text('{"targets": ,}')
        code, _, err = run_cli(["fit", str(cfgp)])
        assert code == 2 and "column" in err


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "volprim.cli", "render",
                           "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "--integrator" in proc.stdout
