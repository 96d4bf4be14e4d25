import colorsys
import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from megc.corpus import (
    CorpusIndex,
    CorpusRecord,
    FaceSample,
    ManifestError,
    SampleCache,
    balanced_batch_records,
    balanced_batches,
    expand_box,
    load_manifest,
    prepare_face_crop,
    rgb_to_hsv,
)


def _write_frames(tmp_path, n):
    for i in range(n):
        Image.fromarray(np.full((64, 64, 3), 40 * i, np.uint8)).save(tmp_path / f"f{i}.png")


def _line(i, label="live", spoof_type="none", **kw):
    return json.dumps({"path": f"f{i}.png", "label": label, "spoof_type": spoof_type, "face_box": [16, 16, 32, 32], **kw})


def _records(n_live, n_spoof):
    recs = [CorpusRecord(f"l{i}.png", "live", "none", (0, 0, 1, 1), f"l{i}") for i in range(n_live)]
    recs += [CorpusRecord(f"s{i}.png", "spoof", "print", (0, 0, 1, 1), f"s{i}") for i in range(n_spoof)]
    return CorpusIndex(tuple(recs))


# -- manifest ---------------------------------------------------------------


def test_manifest_two_live_two_print(tmp_path):
    _write_frames(tmp_path, 4)
    lines = [_line(0), _line(1), _line(2, "spoof", "print"), _line(3, "spoof", "print")]
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    index = load_manifest(tmp_path / "m.jsonl")
    assert len(index.samples) == 4
    assert index.counts() == {"live": 2, "spoof": 2}
    assert index.resolve(index.samples[0]) == tmp_path / "f0.png"


def test_manifest_empty(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    with pytest.raises(ManifestError, match="empty manifest"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_unknown_spoof_type_names_token(tmp_path):
    _write_frames(tmp_path, 2)
    (tmp_path / "m.jsonl").write_text(_line(0) + "\n" + _line(1, "spoof", "mask") + "\n")
    with pytest.raises(ManifestError, match=r"line 2: unknown spoof_type 'mask'"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_malformed_line(tmp_path):
    _write_frames(tmp_path, 1)
    (tmp_path / "m.jsonl").write_text(_line(0) + "\n{not json\n")
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.jsonl")


def test_manifest_missing_image(tmp_path):
    (tmp_path / "m.jsonl").write_text(_line(7) + "\n")
    with pytest.raises(ManifestError, match="image not found"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_inconsistent_label(tmp_path):
    _write_frames(tmp_path, 1)
    (tmp_path / "m.jsonl").write_text(_line(0, "live", "print") + "\n")
    with pytest.raises(ManifestError, match="inconsistent"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_string_face_box(tmp_path):
    _write_frames(tmp_path, 1)
    rec = {"path": "f0.png", "label": "live", "spoof_type": "none", "face_box": "1,2,3,4"}
    (tmp_path / "m.jsonl").write_text(json.dumps(rec) + "\n")
    assert load_manifest(tmp_path / "m.jsonl").samples[0].face_box == (1, 2, 3, 4)


def test_face_sample_label_rule():
    img = np.zeros((256, 256, 6), np.float32)
    with pytest.raises(ValueError):
        FaceSample(img, "live", "replay", "x", (0, 0, 1, 1))
    with pytest.raises(ValueError):
        FaceSample(img, "spoof", "none", "x", (0, 0, 1, 1))


# -- crops ------------------------------------------------------------------


def test_crop_doubling_example():
    frame = np.random.default_rng(0).integers(0, 256, (512, 512, 3), dtype=np.uint8)
    assert expand_box((128, 128, 256, 256), 512, 512) == (0, 0, 512, 512)
    image, crop_box = prepare_face_crop(frame, (128, 128, 256, 256))
    assert image.shape == (256, 256, 6)
    assert image.dtype == np.float32
    assert crop_box == (64.0, 64.0, 128.0, 128.0)
    assert image.min() >= 0 and image.max() <= 1


def test_gray_crop_hsv():
    frame = np.full((100, 100, 3), 0.5, np.float32)
    image, _ = prepare_face_crop(frame, (25, 25, 50, 50))
    assert np.all(image[..., 4] == 0)
    np.testing.assert_allclose(image[..., 5], 0.5, atol=1e-7)


def test_corner_box_against_reference():
    rng = np.random.default_rng(3)
    frame = rng.random((200, 200, 3)).astype(np.float32)
    assert expand_box((0, 0, 60, 60), 200, 200) == (0, 0, 90, 90)
    image, _ = prepare_face_crop(frame, (0, 0, 60, 60))
    assert image.shape == (256, 256, 6)

    # reference: half-pixel bilinear upsampling then per-pixel colorsys HSV
    crop = torch.from_numpy(frame[:90, :90]).permute(2, 0, 1)[None]
    ref = F.interpolate(crop, size=(256, 256), mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
    np.testing.assert_allclose(image[..., :3], ref, atol=1e-4)
    for y, x in rng.integers(0, 256, (200, 2)):
        h, s, v = colorsys.rgb_to_hsv(*image[y, x, :3].astype(float))
        np.testing.assert_allclose(image[y, x, 4:], [s, v], atol=1e-5)
        dh = abs(image[y, x, 3] - h)
        assert min(dh, 1 - dh) < 1e-5


def test_crop_errors():
    frame = np.zeros((64, 64, 3), np.uint8)
    with pytest.raises(ValueError, match="outside"):
        prepare_face_crop(frame, (100, 100, 10, 10))
    with pytest.raises(ValueError, match="zero-area"):
        prepare_face_crop(frame, (10, 10, 0, 5))


@settings(max_examples=200, deadline=None)
@given(
    st.integers(16, 400),
    st.integers(16, 400),
    st.data(),
)
def test_crop_geometry_property(fw, fh, data):
    x = data.draw(st.integers(-20, fw - 1))
    y = data.draw(st.integers(-20, fh - 1))
    w = data.draw(st.integers(max(1, 1 - x), 200))
    h = data.draw(st.integers(max(1, 1 - y), 200))
    x0, y0, x1, y1 = expand_box((x, y, w, h), fw, fh)
    assert 0 <= x0 < x1 <= fw and 0 <= y0 < y1 <= fh
    assert (x1 - x0) * (y1 - y0) <= 4 * w * h
    cx, cy = x + w / 2, y + h / 2
    # the centre is preserved wherever the expanded box was not clipped
    if x0 > 0 and x1 < fw:
        assert abs((x0 + x1) / 2 - cx) <= 0.5
    if y0 > 0 and y1 < fh:
        assert abs((y0 + y1) / 2 - cy) <= 0.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(*[st.floats(0, 1)] * 3), min_size=1, max_size=20))
def test_hsv_matches_colorsys(pixels):
    rgb = np.array(pixels, np.float64).reshape(-1, 1, 3)
    hsv = rgb_to_hsv(rgb)
    assert hsv.min() >= 0 and hsv.max() <= 1
    for p, q in zip(rgb[:, 0], hsv[:, 0]):
        h, s, v = colorsys.rgb_to_hsv(*p)
        np.testing.assert_allclose(q[1:], [s, v], atol=1e-9)
        dh = abs(q[0] - h)
        assert min(dh, 1 - dh) < 1e-9 or s == 0


# -- batching ---------------------------------------------------------------


def test_batches_even_classes():
    batches = balanced_batch_records(_records(10, 10), 4, seed=0)
    assert len(batches) == 5
    for b in batches:
        assert [r.label for r in b] == ["live", "live", "spoof", "spoof"]
    # one epoch covers every record of the majority class exactly once
    assert sorted(r.sample_id for b in batches for r in b[:2]) == sorted(f"l{i}" for i in range(10))


def test_batches_minority_resampled():
    batches = balanced_batch_records(_records(10, 2), 4, seed=0)
    assert len(batches) == 5
    spoofs = [r.sample_id for b in batches for r in b[2:]]
    assert len(spoofs) == 10 and set(spoofs) == {"s0", "s1"}
    for b in batches:
        assert sum(r.label == "live" for r in b) == 2


def test_batches_deterministic():
    idx = _records(7, 5)
    a = [[r.sample_id for r in b] for e in range(3) for b in balanced_batch_records(idx, 4, 9, e)]
    b = [[r.sample_id for r in b] for e in range(3) for b in balanced_batch_records(idx, 4, 9, e)]
    c = [[r.sample_id for r in b] for e in range(3) for b in balanced_batch_records(idx, 4, 10, e)]
    assert a == b
    assert a != c


def test_batches_errors():
    with pytest.raises(ValueError, match="even"):
        balanced_batch_records(_records(4, 4), 3, 0)
    with pytest.raises(ValueError, match="both classes"):
        balanced_batch_records(_records(4, 0), 4, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.sampled_from([2, 4, 8, 16]), st.integers(0, 2**16))
def test_batch_balance_property(n_live, n_spoof, batch_size, seed):
    for b in balanced_batch_records(_records(n_live, n_spoof), batch_size, seed):
        n = sum(r.label == "live" for r in b)
        assert len(b) == batch_size and 2 * n == batch_size


def test_streaming_matches_serial(toy_index):
    serial = [[s.source_id for s in b] for b in balanced_batches(toy_index, 4, 3, epochs=2)]
    threaded = [[s.source_id for s in b] for b in balanced_batches(toy_index, 4, 3, epochs=2, cache=SampleCache(toy_index, workers=4))]
    assert serial == threaded
    for b in balanced_batches(toy_index, 4, 3):
        assert all(s.image.shape == (256, 256, 6) for s in b)
        assert all(0 <= s.image.min() and s.image.max() <= 1 for s in b)
