import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rewarp.core import make_uniform_grid, overlap_mask
from rewarp.homography import Homography, invert
from rewarp.metrics import bucketize
from rewarp.synth import (
    CONTRAST_FLOOR, Layer, SceneSpec, disjoint_scene, export_suite, field_checksum,
    generate_pair, generate_suite, gradient_energy, ground_truth, make_scene, parallax_error,
)


def random_h(rng, scale=0.05):
    m = np.eye(3) + rng.normal(0, scale, (3, 3)) * np.array([[1, 1, 20], [1, 1, 20], [1e-3, 1e-3, 0]])
    return Homography(m)


def homogeneous_oracle(m, x, y):
    d = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    return ((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / d, (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / d)


def test_parallax_error_plane_induced(rng):
    a1, a2 = random_h(rng), random_h(rng)
    h = a2 @ invert(a1)
    pts = rng.uniform(0, 256, (1000, 2))
    assert np.abs(parallax_error(pts, h, a1, a2)).max() <= 1e-9


def test_parallax_error_translation():
    eye = Homography.identity()
    err = parallax_error(np.array([[3.0, 4.0], [100.0, -7.0]]), Homography.translation(5.0, 0.0), eye, eye)
    assert np.array_equal(err, [[-5.0, 0.0], [-5.0, 0.0]])


def test_parallax_error_matches_scalar_oracle(rng):
    a1, a2, h = random_h(rng), random_h(rng), random_h(rng)
    plane = (a2.m @ np.linalg.inv(a1.m))
    pts = rng.uniform(0, 256, (10, 2))
    out = parallax_error(pts, h, a1, a2)
    for (x, y), e in zip(pts, out):
        px, py = homogeneous_oracle(plane, x, y)
        hx, hy = homogeneous_oracle(h.m, x, y)
        assert e == pytest.approx([px - hx, py - hy], abs=1e-9)


def test_identity_spec_renders_identical_pair():
    spec = SceneSpec(96, 80, Homography.identity(), texture_seed=3)
    ref, tgt, gt = generate_pair(spec)
    assert np.array_equal(ref.data, tgt.data)
    assert gt.overlap.ratio == 1.0
    assert not gt.flow.any()


def test_translation_spec_ground_truth():
    spec = SceneSpec(128, 96, Homography.translation(20.0, -10.0), texture_seed=3)
    _, _, gt = generate_pair(spec)
    assert np.array_equal(gt.flow, np.broadcast_to([20.0, -10.0], gt.flow.shape))
    assert gt.overlap_ratio == (128 - 20) * (96 - 10) / (128 * 96)


def test_translation_pair_content():
    spec = SceneSpec(128, 96, Homography.translation(20.0, -10.0), texture_seed=3)
    ref, tgt, _ = generate_pair(spec)
    # reference pixel (x, y) appears at (x + 20, y - 10)
    assert np.abs(tgt.data[0:86, 20:] - ref.data[10:96, 0:108]).max() <= 1e-12


def test_layer_shifts_ground_truth_on_footprint():
    h = Homography.translation(4.0, 2.0)
    layer = Layer((30.0, 20.0, 60.0, 50.0), 0.3, (5.0, -3.0), seed=9)
    spec = SceneSpec(128, 96, h, layers=(layer,), texture_seed=3)
    gt = ground_truth(spec)
    base = h.project(make_uniform_grid(128, 96).coords)
    diff = gt.mapping - base
    inside = layer.contains(make_uniform_grid(128, 96).coords)
    assert np.array_equal(diff[inside], np.broadcast_to([5.0, -3.0], diff[inside].shape))
    assert not diff[~inside].any()


def test_layer_is_rendered_at_shifted_position():
    layer = Layer((30.0, 20.0, 60.0, 50.0), 0.3, (5.0, -3.0), seed=9)
    spec = SceneSpec(128, 96, Homography.identity(), layers=(layer,), texture_seed=3)
    ref, tgt, _ = generate_pair(spec)
    assert np.abs(tgt.data[17:48, 35:66] - ref.data[20:51, 30:61]).max() <= 1e-12


def test_zero_parallax_gt_equals_homography_flow():
    spec = make_scene(5, 128, 128)
    gt = ground_truth(spec)
    expected = spec.h_gt.project(make_uniform_grid(128, 128).coords)
    assert np.abs(gt.mapping - expected).max() <= 1e-9


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["low", "mid", "high"]))
def test_gt_overlap_matches_overlap_mask(seed, bucket):
    spec = make_scene(seed, 128, 128, bucket=bucket, noise_sigma=0.0)
    gt = ground_truth(spec)
    rect = overlap_mask((128, 128), spec.h_gt, (128, 128)).ratio
    assert abs(gt.overlap_ratio - rect) <= 2.0 / 128


def test_tps_scene_ground_truth_consistent():
    spec = make_scene(12, 128, 128, tps_amplitude=6.0, noise_sigma=0.0)
    ref, tgt, gt = generate_pair(spec)
    from rewarp.warp import bilinear
    vals, ok = bilinear(tgt.data, gt.mapping)
    inner = ok & gt.overlap.inside
    inner[:4] = inner[-4:] = False
    inner[:, :4] = inner[:, -4:] = False
    # bilinear resampling of the rendered target reproduces the reference
    assert np.abs(vals[inner] - ref.data[inner]).mean() <= 0.01


def test_scene_is_reproducible():
    a, b = make_scene(77, 128, 128, tps_amplitude=5.0, n_layers=1), make_scene(77, 128, 128, tps_amplitude=5.0, n_layers=1)
    assert a.to_dict() == b.to_dict()
    ra, ta, ga = generate_pair(a)
    rb, tb, gb = generate_pair(b)
    assert np.array_equal(ra.data, rb.data) and np.array_equal(ta.data, tb.data)
    assert field_checksum(ga) == field_checksum(gb)


def test_spec_roundtrip_through_json():
    spec = make_scene(31, 128, 128, bucket="mid", tps_amplitude=4.0, n_layers=2)
    back = SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert back.to_dict() == spec.to_dict()
    assert field_checksum(ground_truth(back)) == field_checksum(ground_truth(spec))


def test_texture_clears_contrast_floor():
    ref, _, _ = generate_pair(make_scene(8, 256, 256, noise_sigma=0.0))
    assert gradient_energy(ref.gray()).min() > CONTRAST_FLOOR


def test_suite_single_high():
    specs = generate_suite(1, (0, 0, 1), 128, 128)
    assert len(specs) == 1 and specs[0].bucket == "high"
    assert ground_truth(specs[0]).overlap_ratio >= 0.61


def test_suite_buckets_and_determinism():
    specs = generate_suite(4, (5, 5, 5), 128, 128)
    assert len(specs) == 15
    for s in specs:
        rect = overlap_mask((128, 128), s.h_gt, (128, 128)).ratio
        assert bucketize(rect) == s.bucket
    again = generate_suite(4, (5, 5, 5), 128, 128)
    assert [s.to_dict() for s in specs] == [s.to_dict() for s in again]
    assert len({s.id for s in specs}) == 15


def test_suite_amplitude_range():
    specs = generate_suite(2, (1, 1, 1), 128, 128, tps_amplitude=(4.0, 8.0))
    for s in specs:
        peak = np.linalg.norm(s.tps_gt.interior_disp, axis=-1).max()
        assert 4.0 <= peak <= 8.0


def test_disjoint_scene_has_no_overlap():
    assert ground_truth(disjoint_scene(3, 128, 128)).overlap.pixel_count == 0


def test_export_suite_manifest(tmp_path):
    specs = generate_suite(6, (1, 0, 1), 96, 96)
    manifest = export_suite(specs, tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc == manifest
    assert [p["id"] for p in doc["pairs"]] == ["low_000", "high_000"]
    for p in doc["pairs"]:
        assert (tmp_path / p["ref"]).exists() and (tmp_path / p["tgt"]).exists()
        assert p["bucket"] in ("low", "high")
        gt = ground_truth(SceneSpec.from_dict(p["spec"]))
        assert field_checksum(gt) == p["gt_field_sha256"]
