import numpy as np
import pytest

from displayps.errors import InvalidArgumentError
from displayps.learning import init_patterns
from displayps.lens import DistortionCoefficients, default_camera
from displayps.pipeline import (BUNDLED_SCENES, ReconstructionSettings, SensorSettings, bundled_training_set,
                                mean_reconstruction_error, reconstruct, reconstruct_bundle, record_captures,
                                render_bundle)
from displayps.scene import PatternSet, default_display, full_white_peak
from displayps.stereo import relight

D = default_display()
MONO = init_patterns("mono_gradient", 4, D).patterns


def test_noiseless_plane_is_exact_through_the_sensor_free_path():
    b = render_bundle("plane", resolution=32, falloff=False)
    r = reconstruct_bundle(b, MONO, ReconstructionSettings(sensor=None))
    assert r.mean_error < 1e-12
    assert r.mask.all()


def test_single_exposure_16bit_plane_is_nearly_exact():
    b = render_bundle("plane", resolution=32, falloff=False)
    sensor = SensorSettings(exposures=(1 / 200,), read_sigma=0.0, quantization_bits=16)
    assert reconstruct_bundle(b, MONO, ReconstructionSettings(sensor=sensor)).mean_error < 1e-6


def test_ambient_is_relative_to_the_display_peak():
    plain = render_bundle("sphere_cap", resolution=16, amplitude=0.02)
    lit = render_bundle("sphere_cap", resolution=16, amplitude=0.02, ambient_fraction=0.2)
    assert lit.scene.ambient_level == pytest.approx(0.2 * full_white_peak(plain.basis))
    np.testing.assert_allclose(lit.basis.values - plain.basis.values, lit.scene.ambient_level / 32, atol=1e-9)


def test_distorted_bundle_keeps_pinhole_ground_truth():
    cam = default_camera(32, DistortionCoefficients(k1=-0.2))
    b = render_bundle("sphere_cap", resolution=32, amplitude=0.02, camera=cam)
    ref = render_bundle("sphere_cap", resolution=32, amplitude=0.02)
    assert b.scene.camera.dist.is_zero
    assert np.array_equal(b.scene.gt_normals.values, ref.scene.gt_normals.values)
    assert not np.allclose(b.basis.values, ref.basis.values)


def test_record_captures_is_seeded_and_scaled():
    b = render_bundle("perlin_heightfield", resolution=16, amplitude=0.015, seed=2)
    captures = relight(MONO, b.basis)
    a1, s1 = record_captures(captures, SensorSettings(), seed=4)
    a2, _ = record_captures(captures, SensorSettings(), seed=4)
    a3, _ = record_captures(captures, SensorSettings(), seed=5)
    assert a1.tobytes() == a2.tobytes() and a1.tobytes() != a3.tobytes()
    assert not s1.any()
    rel = np.abs(a1 - captures.images).max() / captures.images.max()
    assert rel < 0.02
    ideal, sat = record_captures(captures, None)
    assert np.array_equal(ideal, captures.images) and not sat.any()


def test_reconstruct_validates_before_work():
    b = render_bundle("plane", resolution=16)
    with pytest.raises(InvalidArgumentError):
        reconstruct(b.basis, PatternSet(np.zeros((4, 8, 3))), b.camera, b.display)
    with pytest.raises(InvalidArgumentError):
        reconstruct(b.basis, MONO, default_camera(17), b.display)


def test_reconstruct_without_ground_truth():
    b = render_bundle("plane", resolution=16)
    r = reconstruct(b.basis, MONO, b.camera, b.display)
    assert np.isnan(r.mean_error) and np.all(np.isnan(r.error_map))
    assert r.normals.values.shape == (16, 16, 3)


def test_rank_deficient_patterns_still_score():
    b = render_bundle("sphere_cap", resolution=16, amplitude=0.02)
    gray = init_patterns("flat_gray", 4, D).patterns
    r = reconstruct_bundle(b, gray, ReconstructionSettings(sensor=None))
    assert not r.normals.valid_mask.any()
    assert 0 < r.mean_error < 1


def test_sensor_settings_validation():
    for kwargs in (dict(exposures=()), dict(headroom=0.0), dict(reference_exposure=0.0),
                   dict(denoise_sigma=-1.0), dict(weight="box"), dict(quantization_bits=4)):
        with pytest.raises(InvalidArgumentError):
            SensorSettings(**kwargs)


def test_bundled_training_set_shapes():
    train = bundled_training_set(resolution=16)
    assert len(train.entries) == len(BUNDLED_SCENES)
    for e in train.entries:
        assert e.basis.values.shape == (32, 16, 16, 3)
        assert e.lights.directions.shape == (16, 16, 32, 3)


def test_mean_reconstruction_error_is_average_of_scenes():
    bundles = [render_bundle(k, resolution=16, amplitude=a, seed=s) for k, a, s in BUNDLED_SCENES]
    settings = ReconstructionSettings()
    each = [reconstruct_bundle(b, MONO, settings, seed=i).mean_error for i, b in enumerate(bundles)]
    assert mean_reconstruction_error(bundles, MONO, settings) == pytest.approx(np.mean(each), rel=1e-15)
