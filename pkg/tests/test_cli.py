import json
import subprocess
import sys

import numpy as np
import pytest
from helpers import SMALL_CLI_CONFIG as SMALL
from helpers import hdr_inputs, rerun_every_command, tree, write_config
from helpers import run_cli as run
from PIL import Image

from displayps.cli import normals_to_rgb
from displayps.learning import OptimizerSchedule, lr_at
from displayps.lens import DistortionCoefficients, default_camera, save_camera
from displayps.tensorfile import read_tensor, write_tensor


@pytest.fixture
def small_cfg(tmp_path):
    return write_config(tmp_path / "cfg.json", SMALL)


def test_plane_ground_truth_png_is_uniform(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"resolution": 16, "scenes": [{"kind": "plane"}]})
    assert run("render", "--config", cfg, "--out", tmp_path / "o") == 0
    img = np.asarray(Image.open(tmp_path / "o" / "scenes" / "00_plane" / "gt_normals.png"))
    assert img.shape == (16, 16, 3)
    assert np.all(img == [128, 128, 255])


def test_normals_to_rgb_mapping():
    n = np.array([[[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]])
    assert normals_to_rgb(n).tolist() == [[[128, 128, 255], [255, 128, 128], [128, 0, 128]]]


def test_render_then_reconstruct_from_disk(tmp_path, small_cfg, capsys):
    out = tmp_path / "o"
    assert run("render", "--config", small_cfg, "--out", out) == 0
    scene = out / "scenes" / "01_sphere_cap"
    for name in ("depth", "basis", "basis_valid", "gt_normals", "gt_albedo", "lights"):
        assert (scene / f"{name}.dmdt").is_file()
    assert json.loads((scene / "camera.json").read_text())["f"] > 0
    before = tree(out / "scenes")
    assert run("reconstruct", "--config", small_cfg, "--out", out, "--scenes", out / "scenes") == 0
    assert tree(out / "scenes") == before  # inputs untouched
    lines = (out / "reconstruct" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "scene,mean_error" and lines[-1].startswith("mean,") and len(lines) == 4
    normals, _ = read_tensor(out / "reconstruct" / "01_sphere_cap" / "normals.dmdt")
    assert normals.shape == (12, 12, 3)


def test_reconstruct_rejects_mismatched_patterns_before_writing(tmp_path, small_cfg, capsys):
    bad = tmp_path / "p.dmdt"
    write_tensor(bad, np.full((4, 8, 3), 0.5))
    out = tmp_path / "o"
    assert run("reconstruct", "--config", small_cfg, "--out", out, "--patterns", bad) == 3
    assert "b=8" in capsys.readouterr().err
    assert not (out / "reconstruct").exists()


def test_invalid_key_exits_2_and_names_it(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"bogus": 1})
    assert run("render", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "bogus" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_overrides_are_config_errors(tmp_path, small_cfg):
    assert run("render", "--config", small_cfg, "--seed", "-1") == 2
    assert run("render", "--config", small_cfg, "--threads", "0") == 2
    assert run("render", "--config", tmp_path / "missing.json") == 2


def test_learn_outputs_and_history(tmp_path, small_cfg):
    out = tmp_path / "o"
    assert run("learn", "--config", small_cfg, "--out", out, "--family", "olat") == 0
    d = out / "learn"
    patterns, meta = read_tensor(d / "patterns.dmdt")
    assert patterns.shape == (4, 32, 3) and meta["family"] == "olat"
    rows = (d / "history.csv").read_text().splitlines()
    assert rows[0] == "epoch,lr,mean_loss,grad_norm" and len(rows) == 1 + 3
    schedule = OptimizerSchedule(lr0=0.3, alpha=2, decay=0.3, epochs=3)
    for line in rows[1:]:
        e, lr = line.split(",")[:2]
        assert float(lr) == lr_at(schedule, int(e))
    for i in range(4):
        png = np.asarray(Image.open(d / f"pattern_{i:02d}.png"))
        assert png.shape == (8 * 32, 4 * 32, 3)  # 8 rows x 4 columns of superpixels
    # learned values stay strictly inside the display range
    assert 0 < patterns.min() and patterns.max() < 1


def test_sweep_alpha_table_shape(tmp_path):
    cfg = write_config(tmp_path / "c.json", SMALL | {"schedule": {"epochs": 2}, "scenes": [{"kind": "plane"}]})
    out = tmp_path / "o"
    assert run("sweep", "--axis", "alpha", "--config", cfg, "--out", out) == 0
    root = out / "sweep" / "alpha"
    csv = (root / "report.csv").read_text().splitlines()
    assert csv[0] == "Illumination patterns,alpha = 5,alpha = 10,alpha = 15,alpha = 20"
    assert [r.split(",")[0] for r in csv[1:]] == ["Mono-gradient", "OLAT", "Mono-random", "Average"]
    assert all(len(r.split(",")) == 5 for r in csv)
    assert len([p for p in root.iterdir() if p.is_dir()]) == 12
    assert (root / "report.md").read_text().startswith("| Illumination patterns |")
    assert not (root / "failures.csv").exists()


def test_sweep_family_table_columns(tmp_path):
    doc = SMALL | {"schedule": {"epochs": 1}, "scenes": [{"kind": "plane"}],
                   "sweep": {"families": ["olat", "tri_gradient"]}}
    out = tmp_path / "o"
    assert run("sweep", "--axis", "family", "--config", write_config(tmp_path / "c.json", doc), "--out", out) == 0
    csv = (out / "sweep" / "family" / "report.csv").read_text().splitlines()
    assert csv[0] == "Illumination patterns,Number of patterns,Initial,Learned"
    assert csv[1].startswith("OLAT,4,") and csv[2].startswith("Tri-gradient,2,")
    assert (out / "sweep" / "family" / "tri_gradient_K2_alpha20" / "patterns.dmdt").is_file()


def test_sweep_records_failed_cells_and_exits_3(tmp_path, monkeypatch):
    import displayps.cli as cli

    real = cli._learn

    def flaky(cfg, bundles, family, K, alpha, seed):
        if family == "olat" and alpha == 10:
            raise FloatingPointError("diverged")
        return real(cfg, bundles, family, K, alpha, seed)

    monkeypatch.setattr(cli, "_learn", flaky)
    cfg = write_config(tmp_path / "c.json", SMALL | {"schedule": {"epochs": 1}, "scenes": [{"kind": "plane"}]})
    out = tmp_path / "o"
    assert run("sweep", "--axis", "alpha", "--config", cfg, "--out", out) == 3
    root = out / "sweep" / "alpha"
    assert (root / "failures.csv").read_text() == "family,K,alpha,error\nolat,4,10,FloatingPointError: diverged\n"
    olat = (root / "report.csv").read_text().splitlines()[2].split(",")
    assert olat[0] == "OLAT" and olat[2] == "nan" and olat[1] != "nan"
    assert len([p for p in root.iterdir() if p.is_dir()]) == 11


def test_merge_hdr_command(tmp_path):
    radiance = hdr_inputs(tmp_path)
    assert run("merge-hdr", tmp_path / "m.json", "--out", tmp_path / "o") == 0
    merged, meta = read_tensor(tmp_path / "o" / "merged.dmdt")
    assert meta["exposures"] == [1 / 200, 1 / 50, 1 / 12.5]
    np.testing.assert_allclose(merged, radiance, rtol=1e-5)
    sat, _ = read_tensor(tmp_path / "o" / "saturated.dmdt")
    assert not sat.any()


def test_merge_hdr_bad_manifest_exits_3(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps({"frames": [{"path": "x.dmdt"}]}))
    assert run("merge-hdr", tmp_path / "m.json", "--out", tmp_path / "o") == 3
    assert "exposure_s" in capsys.readouterr().err
    (tmp_path / "m.json").write_text("{")
    assert run("merge-hdr", tmp_path / "m.json", "--out", tmp_path / "o") == 3


def test_undistort_command(tmp_path):
    cam = default_camera(16, DistortionCoefficients(k1=-0.2))
    save_camera(cam, tmp_path / "cam.json")
    image = np.arange(16 * 16, dtype=np.float64).reshape(16, 16)
    write_tensor(tmp_path / "img.dmdt", image, {"tag": 1})
    assert run("undistort", tmp_path / "img.dmdt", "--camera", tmp_path / "cam.json", "--out", tmp_path / "o") == 0
    out, meta = read_tensor(tmp_path / "o" / "undistorted.dmdt")
    valid, _ = read_tensor(tmp_path / "o" / "undistorted_valid.dmdt")
    assert out.shape == (16, 16) and meta == {"tag": 1}
    assert valid[8, 8] == 1 and not np.allclose(out, image)


def test_schema_command(capsys):
    assert run("schema") == 0
    schema = json.loads(capsys.readouterr().out)
    assert schema["additionalProperties"] is False and "scenes" in schema["properties"]


def test_outputs_stay_under_the_output_dir(tmp_path, small_cfg, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = set(tmp_path.iterdir())
    assert run("learn", "--config", small_cfg, "--out", tmp_path / "only") == 0
    assert set(tmp_path.iterdir()) - before == {tmp_path / "only"}


def test_every_command_is_deterministic(tmp_path):
    first, second = rerun_every_command(tmp_path)
    assert any(k.endswith(".csv") for k in first) and any(k.endswith(".dmdt") for k in first)
    assert first.keys() == second.keys()
    assert [k for k in first if first[k] != second[k]] == []


def test_console_script_reports_version():
    res = subprocess.run([sys.executable, "-m", "displayps.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("displayps ")
