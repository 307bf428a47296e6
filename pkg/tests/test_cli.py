import json
import subprocess
import sys

import numpy as np
import pytest

from rewarp.align import AlignConfig, multi_stitch, stitch
from rewarp.cli import EXIT_ERROR, EXIT_FAILURE, EXIT_OK, main, read_config, resolve, build_parser
from rewarp.io import read_image, write_image
from rewarp.synth import disjoint_scene, export_suite, generate_pair, generate_suite, make_scene


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite")
    assert main(["synth", "--out", str(out), "--seed", "3", "--counts", "0", "1", "2",
                 "--size", "128", "128"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def pair(tmp_path_factory):
    out = tmp_path_factory.mktemp("pair")
    spec = make_scene(21, 128, 128)
    ref, tgt, _ = generate_pair(spec)
    write_image(out / "ref.ppm", ref)
    write_image(out / "tgt.ppm", tgt)
    (out / "spec.json").write_text(json.dumps(spec.to_dict()))
    _, far, _ = generate_pair(disjoint_scene(4, 128, 128))
    write_image(out / "far.ppm", far)
    return out


def load(path):
    return json.loads(path.read_text())


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_ERROR
    assert main(["stitch", "a.ppm"]) == EXIT_ERROR
    assert main(["stitch", "a.ppm", "b.ppm", "--out", str(tmp_path), "--bogus"]) == EXIT_ERROR
    assert main(["stitch", "a.ppm", "b.ppm", "--out", str(tmp_path), "--alpha", "2"]) == EXIT_ERROR


def test_missing_input_is_io_error(tmp_path):
    assert main(["stitch", str(tmp_path / "a.ppm"), str(tmp_path / "b.ppm"),
                 "--out", str(tmp_path / "o")]) == EXIT_ERROR


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# sample\niters_h = 4\ngrid = 10\nblend = linear\nalpha=0.5  # trailing\n")
    assert read_config(cfg) == {"iters_h": 4, "grid_n": 10, "blend": "linear", "alpha": 0.5}
    args = build_parser().parse_args(["eval", "m.json", "--config", str(cfg), "--iters-h", "2"])
    c, extra = resolve(args)
    assert (c.iters_h, c.grid_n, c.alpha, extra["blend"]) == (2, 10, 0.5, "linear")
    assert c.iters_t == AlignConfig().iters_t


@pytest.mark.parametrize("text", ["nonsense\n", "colour = red\n", "iters_h = many\n"])
def test_bad_config_file(tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert main(["eval", "m.json", "--config", str(cfg)]) == EXIT_ERROR


def test_stitch_same_file(pair, tmp_path):
    assert main(["stitch", str(pair / "ref.ppm"), str(pair / "ref.ppm"), "--out", str(tmp_path)]) == EXIT_OK
    m = load(tmp_path / "metrics.json")
    assert m["mpsnr"] == 99.0 and "failure" not in m
    assert (tmp_path / "stitched.png").exists()


def test_stitch_disjoint(pair, tmp_path):
    code = main(["stitch", str(pair / "ref.ppm"), str(pair / "far.ppm"), "--out", str(tmp_path)])
    assert code == EXIT_FAILURE
    assert load(tmp_path / "metrics.json")["failure"] == "NoOverlap"
    assert not (tmp_path / "stitched.png").exists()


def test_stitch_with_ground_truth(pair, tmp_path):
    code = main(["stitch", str(pair / "ref.ppm"), str(pair / "tgt.ppm"), "--out", str(tmp_path),
                 "--gt", str(pair / "spec.json"), "--trace", "--format", "ppm"])
    assert code == EXIT_OK
    m = load(tmp_path / "metrics.json")
    assert m["corner_error"] < 1.0 and "epe" in m
    assert len(load(tmp_path / "trace.json")["records"]) == 9
    assert (tmp_path / "warped.ppm").exists()


def test_stitch_is_thin_shell(pair, tmp_path):
    assert main(["stitch", str(pair / "ref.ppm"), str(pair / "tgt.ppm"), "--out", str(tmp_path),
                 "--iters-h", "3", "--blend", "linear", "--format", "ppm"]) == EXIT_OK
    res = stitch(read_image(pair / "ref.ppm"), read_image(pair / "tgt.ppm"), AlignConfig(iters_h=3), "linear")
    write_image(tmp_path / "lib.ppm", res.image)
    assert (tmp_path / "lib.ppm").read_bytes() == (tmp_path / "stitched.ppm").read_bytes()
    m = load(tmp_path / "metrics.json")
    assert m["mpsnr"] == res.metrics.mpsnr
    assert m["homography"] == res.homography.m.tolist()


def test_multistitch_single_target_matches_stitch(pair, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["stitch", str(pair / "ref.ppm"), str(pair / "tgt.ppm"), "--out", str(a), "--format", "ppm"])
    assert main(["multistitch", str(pair / "ref.ppm"), str(pair / "tgt.ppm"), "--out", str(b),
                 "--format", "ppm"]) == EXIT_OK
    assert (a / "stitched.ppm").read_bytes() == (b / "stitched.ppm").read_bytes()


def test_multistitch_with_disjoint(pair, tmp_path):
    code = main(["multistitch", str(pair / "ref.ppm"), str(pair / "tgt.ppm"), str(pair / "far.ppm"),
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    doc = load(tmp_path / "metrics.json")
    assert doc["failures"] == 1
    assert [t.get("failure") for t in doc["targets"]] == [None, "NoOverlap"]


def test_multistitch_all_fail(pair, tmp_path):
    code = main(["multistitch", str(pair / "ref.ppm"), str(pair / "far.ppm"), "--out", str(tmp_path)])
    assert code == EXIT_FAILURE


def test_multistitch_three_views_is_thin_shell(tmp_path):
    from rewarp.synth import multiview_scenes
    specs = multiview_scenes(9, [(-40.0, 0.0), (40.0, 0.0)], 128, 128)
    ref, left, _ = generate_pair(specs[0])
    _, right, _ = generate_pair(specs[1])
    for name, img in (("ref", ref), ("l", left), ("r", right)):
        write_image(tmp_path / f"{name}.ppm", img)
    assert main(["multistitch", *(str(tmp_path / f"{n}.ppm") for n in ("ref", "l", "r")),
                 "--out", str(tmp_path / "o"), "--format", "ppm"]) == EXIT_OK
    lib = multi_stitch(*[read_image(tmp_path / f"{n}.ppm") for n in ("ref",)],
                       [read_image(tmp_path / f"{n}.ppm") for n in ("l", "r")])
    write_image(tmp_path / "lib.ppm", lib.image)
    assert (tmp_path / "lib.ppm").read_bytes() == (tmp_path / "o" / "stitched.ppm").read_bytes()
    assert lib.image.width >= 128 + 2 * 30


def test_synth_manifest(suite):
    doc = load(suite / "manifest.json")
    assert [p["bucket"] for p in doc["pairs"]] == ["mid", "high", "high"]


def test_synth_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / d), "--seed", "5", "--counts", "1", "1", "1",
                     "--size", "96", "96"]) == EXIT_OK
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    assert len(load(tmp_path / "a" / "manifest.json")["pairs"]) == 3
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_synth_matches_library(tmp_path):
    main(["synth", "--out", str(tmp_path / "cli"), "--seed", "5", "--counts", "1", "0", "1", "--size", "96", "96"])
    export_suite(generate_suite(5, (1, 0, 1), 96, 96), tmp_path / "lib")
    assert (tmp_path / "cli" / "manifest.json").read_bytes() == (tmp_path / "lib" / "manifest.json").read_bytes()


def test_synth_empty(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--counts", "0", "0", "0"]) == EXIT_OK
    assert load(tmp_path / "manifest.json")["pairs"] == []


def test_eval_report(suite, tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["eval", str(suite / "manifest.json"), "--out", str(out), "--workers", "1"]) == EXIT_OK
    rep = load(out)
    assert len(rep["results"]) == 3
    assert set(rep["summary"]) == {"per_bucket", "average", "failure_pct"}
    assert all("time_ms" not in r for r in rep["results"])
    assert all("corner_error" in r for r in rep["results"] if "failure" not in r)
    assert "mPSNR" in capsys.readouterr().err


def test_eval_timing_and_stdout(suite, capsys):
    assert main(["eval", str(suite / "manifest.json"), "--workers", "1", "--timing", "--iters-t", "0"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert "mean_time_ms" in rep["summary"]
    assert all("time_ms" in r for r in rep["results"])


def test_eval_sweep(suite, tmp_path):
    out = tmp_path / "sweep.json"
    assert main(["eval", str(suite / "manifest.json"), "--out", str(out), "--workers", "1",
                 "--sweep", "iters_h=1,6", "--warp", "h"]) == EXIT_OK
    doc = load(out)
    assert [s["override"] for s in doc["sweep"]] == [{"iters_h": 1}, {"iters_h": 6}]
    assert all(len(s["report"]["results"]) == 3 for s in doc["sweep"])


def test_eval_bad_sweep(suite):
    assert main(["eval", str(suite / "manifest.json"), "--sweep", "colour=1,2"]) == EXIT_ERROR
    assert main(["eval", str(suite / "manifest.json"), "--sweep", "iters_h=0,1"]) == EXIT_ERROR


@pytest.mark.parametrize("text", ["{", "[]", '{"pairs": [{"id": "x"}]}'])
def test_eval_malformed_manifest(tmp_path, text):
    (tmp_path / "manifest.json").write_text(text)
    assert main(["eval", str(tmp_path / "manifest.json")]) == EXIT_ERROR


def test_eval_checksum_mismatch(suite, tmp_path):
    doc = load(suite / "manifest.json")
    doc["pairs"] = doc["pairs"][-1:]
    doc["pairs"][0]["gt_field_sha256"] = "0" * 64
    for key in ("ref", "tgt"):
        doc["pairs"][0][key] = str(suite / doc["pairs"][0][key])
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    assert main(["eval", str(tmp_path / "manifest.json"), "--workers", "1"]) == EXIT_ERROR


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "rewarp", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("stitch", "multistitch", "synth", "eval"):
        assert cmd in out.stdout
