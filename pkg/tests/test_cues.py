import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from megc.corpus import FaceSample, stack_hsv
from megc.cues import (
    CueError,
    FileMapProvider,
    GratingSpec,
    PasteGeometry,
    SupervisionSource,
    beat_frequency,
    composite_boundary,
    composite_moire,
    cue_path,
    dome_depth,
    generate_grating,
    load_map,
    majority_downsample,
    random_grating_pair,
    random_paste_geometry,
    rect_mask,
    save_map,
    supervision_for_sample,
    synthesize_moire_pattern,
    validity_for,
    zero_map,
)


def dominant_frequency(m: np.ndarray) -> np.ndarray:
    """(fx, fy) of the largest non-DC FFT coefficient, sign-normalised to fx >= 0."""
    spec = np.abs(np.fft.fft2(m - m.mean()))
    spec[0, 0] = 0
    iy, ix = np.unravel_index(np.argmax(spec), spec.shape)
    f = np.array([np.fft.fftfreq(m.shape[1])[ix], np.fft.fftfreq(m.shape[0])[iy]])
    return -f if (f[0] < 0 or (f[0] == 0 and f[1] < 0)) else f


def _sample(rgb, label="live", spoof_type="none", sid="s", crop_box=(64.0, 64.0, 128.0, 128.0)):
    return FaceSample(stack_hsv(rgb.astype(np.float32)), label, spoof_type, sid, (0, 0, 1, 1), crop_box)


@pytest.fixture
def live(rng):
    return _sample(rng.random((256, 256, 3)) * 0.6 + 0.2, sid="live0")


@pytest.fixture
def spoof(rng):
    return _sample(rng.random((256, 256, 3)), "spoof", "replay", sid="spoof0", crop_box=(50.0, 60.0, 120.0, 110.0))


# -- gratings ---------------------------------------------------------------


def test_grating_period_four():
    g = generate_grating(GratingSpec(0.25), 8, 8)
    assert np.all(g == g[0:1, :])  # constant down each column
    np.testing.assert_allclose(g[0], [1, 0.5, 0, 0.5, 1, 0.5, 0, 0.5], atol=1e-12)
    assert g[0, 0] == 1.0


def test_grating_amplitude():
    g = generate_grating(GratingSpec(0.1, amplitude=0.5), 64, 64)
    assert g.max() == pytest.approx(0.5)
    assert g.min() >= 0


def test_grating_vertical_fft():
    g = generate_grating(GratingSpec(0.2, orientation=math.pi / 2), 100, 100)
    np.testing.assert_allclose(dominant_frequency(g), [0.0, 0.2], atol=1e-12)


def test_grating_errors():
    with pytest.raises(CueError, match="aliasing"):
        GratingSpec(0.5)
    with pytest.raises(CueError):
        GratingSpec(0.2, amplitude=0.0)
    with pytest.raises(CueError):
        generate_grating(GratingSpec(0.2), 4, 16)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.49), st.floats(0, math.pi - 1e-6), st.floats(0, 2 * math.pi), st.floats(0.01, 1.0))
def test_grating_range(f, t, p, a):
    g = generate_grating(GratingSpec(f, t, p, a), 16, 12)
    assert g.shape == (12, 16)
    assert g.min() >= -1e-12 and g.max() <= a + 1e-12


# -- moire ------------------------------------------------------------------


def test_moire_beat_example():
    m = synthesize_moire_pattern(GratingSpec(0.20), GratingSpec(0.22))
    assert m.shape == (256, 256)
    assert m.min() == 0.0 and m.max() == 1.0
    f = dominant_frequency(m)
    assert abs(np.hypot(*f) - 0.02) <= 1 / 256


def test_moire_identical_is_constant():
    m = synthesize_moire_pattern(GratingSpec(0.2, 0.3), GratingSpec(0.2, 0.3))
    assert np.ptp(m) == 0


def test_moire_rotation_spacing_autocorrelation():
    f, dt = 0.25, 0.1
    a, b = GratingSpec(f, 0.4), GratingSpec(f, 0.4 + dt)
    m = synthesize_moire_pattern(a, b)
    expected = 1 / (2 * f * math.sin(dt / 2))
    # autocorrelation along the beat direction, nearest-pixel shifts
    u = a.wavevector - b.wavevector
    u = u / np.linalg.norm(u)
    c = m - m.mean()
    yy, xx = np.mgrid[64:192, 64:192]
    shifts = np.arange(10.0, 60.0, 0.25)
    corr = []
    for d in shifts:
        sx = np.clip(np.rint(xx + d * u[0]).astype(int), 0, 255)
        sy = np.clip(np.rint(yy + d * u[1]).astype(int), 0, 255)
        corr.append(np.mean(c[yy, xx] * c[sy, sx]))
    measured = shifts[int(np.argmax(corr))]
    assert abs(measured - expected) / expected < 0.05


def test_moire_not_similar():
    with pytest.raises(CueError, match="fringes not similar"):
        synthesize_moire_pattern(GratingSpec(0.1), GratingSpec(0.3))
    with pytest.raises(CueError, match="fringes not similar"):
        synthesize_moire_pattern(GratingSpec(0.2, 0.0), GratingSpec(0.2, 0.5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_beat_rule_property(seed):
    a, b = random_grating_pair(np.random.default_rng(seed))
    m = synthesize_moire_pattern(a, b)
    # k and -k are the same fringe, so the beat is the shorter of k_a -+ k_b
    beat_vec = min(a.wavevector - b.wavevector, a.wavevector + b.wavevector, key=np.linalg.norm)
    peak = dominant_frequency(m)
    assert abs(np.hypot(*peak) - beat_frequency(a, b)) <= 1 / 256
    # the spectrum of a real map is symmetric, so the peak is +-beat
    assert min(np.abs(peak - beat_vec).max(), np.abs(peak + beat_vec).max()) <= 1 / 256


def test_composite_moire_constant_map_is_identity(live):
    image, gt = composite_moire(live, np.full((256, 256), 0.7), alpha=0.3)
    np.testing.assert_array_equal(image, live.image)
    assert gt.shape == (32, 32) and np.all(gt == 0)


def test_composite_moire_small_alpha(live):
    m = synthesize_moire_pattern(GratingSpec(0.20), GratingSpec(0.22))
    image, _ = composite_moire(live, m, alpha=1e-6)
    assert np.abs(image[..., :3] - live.rgb).max() < 1e-5
    with pytest.raises(CueError):
        composite_moire(live, m, alpha=0.0)


def test_composite_moire_residual_peak(live):
    m = synthesize_moire_pattern(GratingSpec(0.20), GratingSpec(0.22))
    image, gt = composite_moire(live, m, alpha=0.3)
    residual = image[..., 0] - live.rgb[..., 0]
    np.testing.assert_allclose(dominant_frequency(residual), dominant_frequency(m))
    assert gt.shape == (32, 32) and gt.min() == 0 and gt.max() == 1
    # where nothing clipped the residual is the centred pattern itself
    np.testing.assert_allclose(residual, 0.3 * (m - m.mean()), atol=1e-6)


def test_composite_moire_rejects_spoof(spoof):
    with pytest.raises(CueError, match="live"):
        composite_moire(spoof, np.zeros((256, 256)))


# -- boundary ---------------------------------------------------------------


def majority_oracle(rect, size=256, block=8):
    x0, y0, x1, y1 = rect
    out = np.zeros((size // block, size // block), np.float32)
    for i in range(size // block):
        for j in range(size // block):
            inside = 0
            for y in range(i * block, (i + 1) * block):
                for x in range(j * block, (j + 1) * block):
                    inside += x0 <= x < x1 and y0 <= y < y1
            out[i, j] = 1.0 if inside > block * block / 2 else 0.0
    return out


def test_boundary_example(live, spoof):
    comp, b = composite_boundary(live, spoof, PasteGeometry(64, 64, 192, 192))
    expected = np.zeros((32, 32), np.float32)
    expected[8:24, 8:24] = 1
    np.testing.assert_array_equal(b, expected)
    assert comp.spoof_type == "composite" and comp.label == "spoof"
    assert comp.source_spoof_type == "replay"
    np.testing.assert_array_equal(comp.boundary_gt, b)
    # outside the paste the live crop is untouched
    np.testing.assert_array_equal(comp.image[:64], live.image[:64])


def test_boundary_live_without_paste_is_zero(live):
    bundle = supervision_for_sample(live, dome_depth, zero_map, zero_map)
    assert bundle.boundary_gt.max() == 0


def test_boundary_seeded_jitter_reproducible(live, spoof):
    g = PasteGeometry(60, 70, 190, 200, seed=42)
    c1, b1 = composite_boundary(live, spoof, g)
    c2, b2 = composite_boundary(live, spoof, g)
    np.testing.assert_array_equal(c1.image, c2.image)
    np.testing.assert_array_equal(b1, b2)
    assert c1.paste_rect != (60, 70, 190, 200)


def test_boundary_clipped_and_degenerate(live, spoof):
    comp, b = composite_boundary(live, spoof, PasteGeometry(200, 200, 300, 300))
    assert comp.paste_rect == (200, 200, 256, 256)
    assert b[-1, -1] == 1 and b[:25].max() == 0
    with pytest.raises(CueError, match="degenerate"):
        composite_boundary(live, spoof, PasteGeometry(300, 300, 400, 400))
    with pytest.raises(CueError):
        composite_boundary(spoof, live, PasteGeometry(0, 0, 10, 10))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_boundary_majority_property(seed):
    rect = random_paste_geometry(np.random.default_rng(seed)).realize()
    b = majority_downsample(rect_mask(rect))
    np.testing.assert_array_equal(b, majority_oracle(rect))
    assert set(np.unique(b)) <= {0.0, 1.0}


# -- supervision ------------------------------------------------------------


def test_validity_table():
    table = {
        ("live", "none", None): (True, True, True, True),
        ("spoof", "print", None): (True, True, False, False),
        ("spoof", "replay", None): (True, True, True, False),
        ("spoof", "composite", "print"): (True, True, False, True),
        ("spoof", "composite", "replay"): (True, True, True, True),
    }
    for args, want in table.items():
        assert validity_for(*args).as_tuple() == want
    with pytest.raises(CueError):
        validity_for("spoof", "composite", None)


def test_bundle_rules(live, spoof, rng):
    bump = lambda s: np.full((32, 32), 0.4, np.float32)
    b = supervision_for_sample(live, dome_depth, bump, bump)
    assert b.moire_gt.max() == b.boundary_gt.max() == b.reflection_gt.max() == 0
    assert b.depth_gt.max() == pytest.approx(1.0)
    assert b.validity.as_tuple() == (True, True, True, True)

    b = supervision_for_sample(spoof, dome_depth, bump, bump)
    assert b.depth_gt.max() == 0 and b.reflection_gt.max() == pytest.approx(0.4)
    assert b.moire_gt.max() == pytest.approx(0.4) and not b.validity.boundary

    printed = _sample(rng.random((256, 256, 3)), "spoof", "print", "p")
    b = supervision_for_sample(printed, dome_depth, bump, None)
    assert not b.validity.moire and b.moire_gt.max() == 0

    comp, gt = composite_boundary(live, spoof, PasteGeometry(64, 64, 192, 192))
    b = supervision_for_sample(comp, dome_depth, bump, bump)
    np.testing.assert_array_equal(b.boundary_gt, gt)
    assert b.validity.as_tuple() == (True, True, True, True)
    assert b.depth_gt.max() == 0


def test_missing_provider_names_cue(spoof, live):
    with pytest.raises(CueError, match="moire"):
        supervision_for_sample(spoof, dome_depth, zero_map, None)
    with pytest.raises(CueError, match="reflection"):
        supervision_for_sample(spoof, dome_depth, None, zero_map)
    with pytest.raises(CueError, match="depth"):
        supervision_for_sample(live, None, zero_map, zero_map)


def test_map_files_roundtrip(tmp_path, rng):
    m = rng.random((32, 32)).astype(np.float32)
    save_map(m, tmp_path / "a.png")
    np.testing.assert_allclose(load_map(tmp_path / "a.png"), m, atol=1 / 65535)
    b = (rng.random((32, 32)) > 0.5).astype(np.float32)
    save_map(b, tmp_path / "b.png", binary=True)
    from PIL import Image

    assert set(np.unique(np.asarray(Image.open(tmp_path / "b.png")))) <= {0, 255}
    np.testing.assert_array_equal(load_map(tmp_path / "b.png"), b)


def test_file_provider(tmp_path, spoof):
    save_map(np.full((32, 32), 0.25), cue_path(tmp_path, "spoof0", "moire"))
    p = FileMapProvider(tmp_path, "moire")
    np.testing.assert_allclose(p(spoof), 0.25, atol=1e-4)
    other = _sample(spoof.rgb, "spoof", "replay", "other")
    with pytest.raises(CueError, match="missing moire map"):
        p(other)
    assert FileMapProvider(tmp_path, "moire", zero_map)(other).max() == 0


def test_source_caches_bundles(spoof):
    calls = []

    def provider(s):
        calls.append(s.source_id)
        return np.zeros((32, 32), np.float32)

    src = SupervisionSource(moire=provider)
    src.bundle(spoof)
    src.bundle(spoof)
    assert calls == ["spoof0"]


def test_inherit_moire_lands_in_paste_rect():
    from megc.cues import inherit_moire

    src = np.arange(32 * 32, dtype=np.float32).reshape(32, 32) / 1024
    # identity: spoof face box equals the paste rect
    out = inherit_moire(src, (64.0, 64.0, 128.0, 128.0), (64, 64, 192, 192))
    np.testing.assert_array_equal(out[8:24, 8:24], src[8:24, 8:24])
    assert out[:8].max() == 0 and out[:, 24:].max() == 0
    # a full-frame spoof squeezed into the top-left quarter is subsampled by 2
    out = inherit_moire(src, (0.0, 0.0, 256.0, 256.0), (0, 0, 128, 128))
    np.testing.assert_array_equal(out[:16, :16], src[::2, ::2][:16, :16] * 0 + src[1::2, 1::2])
    assert out[16:].max() == 0
