import json
import shutil

import numpy as np
import pytest

from panolayout.cli import OUTPUT_ENV, evaluate_dirs, main
from panolayout.io import read_json, write_json
from panolayout.metrics import evaluate
from panolayout.scene import SceneManifest, read_correspondences, read_depth, read_layouts, read_scene_layout, read_structure

FAST = ["--hyp-count", "24", "--patch-size", "3"]


def files_of(directory):
    return {p.relative_to(directory): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["synth", "cuboid", "--out", str(out), "--image-height", "32"]) == 0
    return out


@pytest.fixture(scope="module")
def recon_dir(scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("recon")
    assert main(["reconstruct", str(scene_dir), "--out", str(out), *FAST]) == 0
    return out


def test_synth_writes_manifest(scene_dir):
    manifest = read_json(scene_dir / "manifest.json")
    assert manifest["width"] == 64 and manifest["height"] == 32
    assert [v["id"] for v in manifest["views"]] == [0, 1, 2]
    assert (scene_dir / "gt" / "correspondences.json").exists()


def test_synth_is_byte_identical(scene_dir, tmp_path):
    assert main(["synth", "cuboid", "--out", str(tmp_path), "--image-height", "32"]) == 0
    assert files_of(tmp_path) == files_of(scene_dir)


def test_synth_zero_views_is_usage_error(tmp_path):
    assert main(["synth", "cuboid", "--out", str(tmp_path), "--n-views", "0"]) == 2


def test_synth_unknown_fixture(tmp_path):
    assert main(["synth", "no_such_scene", "--out", str(tmp_path)]) == 1


def test_reconstruct_outputs(recon_dir):
    for view_id in range(3):
        for suffix in ("layout3d.json", "labels.png", "depth.bin", "error.png", "error_hist.csv"):
            assert (recon_dir / f"view_{view_id:03d}_{suffix}").exists()
    for name in ("fused.json", "fused.ply", "config.json", "eval.json"):
        assert (recon_dir / name).exists()
    report = read_json(recon_dir / "eval.json")
    assert report["depth_rmse"] < 0.5


def test_missing_file_names_path(scene_dir, tmp_path, capsys):
    broken = tmp_path / "scene"
    shutil.copytree(scene_dir, broken)
    (broken / "view_001_panorama.png").unlink()
    assert main(["reconstruct", str(broken), "--out", str(tmp_path / "out")]) == 1
    assert "view_001_panorama.png" in capsys.readouterr().err


def test_config_precedence(scene_dir, tmp_path, capsys):
    scene = tmp_path / "scene"
    shutil.copytree(scene_dir, scene)
    manifest = read_json(scene / "manifest.json")
    manifest["config"] = {"hyp_count": 16, "temperature": 0.3}
    write_json(scene / "manifest.json", manifest)
    assert main(["reconstruct", str(scene), "--print-config", "--temperature", "0.2"]) == 0
    config = json.loads(capsys.readouterr().out)
    assert config["hyp_count"] == 16
    assert config["temperature"] == 0.2
    assert config["patch_size"] == 5


def test_unknown_manifest_config_key(scene_dir, tmp_path):
    scene = tmp_path / "scene"
    shutil.copytree(scene_dir, scene)
    manifest = read_json(scene / "manifest.json")
    manifest["config"] = {"bogus": 1}
    write_json(scene / "manifest.json", manifest)
    assert main(["reconstruct", str(scene), "--print-config"]) == 1


def test_output_dir_from_environment(scene_dir, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env_out"))
    assert main(["reconstruct", str(scene_dir), "--views", "0,1", *FAST]) == 0
    assert (tmp_path / "env_out" / "view_000_layout3d.json").exists()
    assert not (tmp_path / "env_out" / "view_002_layout3d.json").exists()


def test_no_output_dir_is_error(scene_dir, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert main(["reconstruct", str(scene_dir), *FAST]) == 1


def test_single_view_run(scene_dir, tmp_path, capsys):
    assert main(["reconstruct", str(scene_dir), "--out", str(tmp_path), "--views", "2", *FAST]) == 0
    assert sorted(read_layouts(tmp_path)) == [2]
    assert "alone in its group" in capsys.readouterr().err
    assert main(["reconstruct", str(scene_dir), "--out", str(tmp_path), "--views", "7"]) == 1


def test_eval_ground_truth_against_itself(scene_dir, capsys):
    gt = scene_dir / "gt"
    assert main(["eval", str(gt), str(gt)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["depth_rmse"] == 0.0
    assert report["scale_error"] == 0.0
    assert report["coherency"] < 1e-4


def test_eval_matches_direct_calls(scene_dir, recon_dir, tmp_path):
    out = tmp_path / "report.json"
    assert main(["eval", str(recon_dir), str(scene_dir / "gt"), "--out", str(out)]) == 0
    report = read_json(out)
    gt_dir = scene_dir / "gt"
    pred = read_layouts(recon_dir)
    direct = evaluate(
        pred,
        read_layouts(gt_dir),
        {k: read_depth(gt_dir, k) for k in pred},
        read_structure(gt_dir),
        read_correspondences(gt_dir),
        pred_depths={k: read_depth(recon_dir, k) for k in pred},
        scene=read_scene_layout(recon_dir),
    )
    assert report["depth_rmse"] == direct.depth_rmse
    assert report["scale_error"] == direct.scale_error
    assert report["coherency"] == direct.coherency
    assert evaluate_dirs(recon_dir, gt_dir).to_dict() == report


def test_eval_dimension_mismatch(scene_dir, tmp_path):
    other = tmp_path / "bigger"
    assert main(["synth", "cuboid", "--out", str(other), "--image-height", "64"]) == 0
    assert main(["eval", str(other / "gt"), str(scene_dir / "gt")]) == 1


def test_dump_probabilities(scene_dir, tmp_path):
    assert main(["reconstruct", str(scene_dir), "--out", str(tmp_path), "--views", "0,1", "--dump-probabilities", *FAST]) == 0
    assert (tmp_path / "view_000_prob.bin").exists()


def test_structure_masks_exclude_clutter(tmp_path):
    assert main(["synth", "clutter", "--out", str(tmp_path), "--image-height", "32"]) == 0
    masks = read_structure(tmp_path / "gt")
    assert all(m.dtype == bool for m in masks.values())
    assert any(not m.all() for m in masks.values())
    assert np.all(read_depth(tmp_path / "gt", 0) > 0)


@pytest.mark.parametrize("name", ["cuboid", "textureless", "two_room", "clutter"])
def test_bundled_fixtures_validate(name, tmp_path):
    assert main(["synth", name, "--out", str(tmp_path), "--image-height", "32"]) == 0
    manifest = SceneManifest.load(tmp_path)
    assert manifest.gt_dir is not None
    for view in manifest.views:
        loaded = manifest.load_view(view)
        assert loaded.image.shape[:2] == (32, 64)
        assert loaded.layout.labels().max() < len(loaded.layout.elements)
