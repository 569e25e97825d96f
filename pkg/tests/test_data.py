import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmed import data
from advmed.data import Dataset, FormatError, LabeledImage, SplitError


@pytest.fixture(scope="module")
def default_ds():
    return data.generate_synthetic(200, 5, 0)


def test_generation_is_pure(default_ds):
    again = data.generate_synthetic(200, 5, 0)
    assert np.array_equal(default_ds.x, again.x)
    assert default_ds.manifest() == again.manifest()
    other = data.generate_synthetic(200, 5, 1)
    assert not np.array_equal(default_ds.x, other.x)


def test_generated_shape_range_and_balance(default_ds):
    x, y = default_ds.x, default_ds.y
    assert x.shape == (1000, 1, 32, 32)
    assert x.min() >= 0 and x.max() <= 1
    assert abs(int(y.sum()) - 500) <= 200
    assert len(default_ds.patients) == 200


def test_pixel_mean_threshold_oracle_band(default_ds):
    """Best single threshold on the image mean: separable, but not trivially."""
    m = default_ds.x.mean(axis=(1, 2, 3))
    y = default_ds.y
    best = 0.0
    for t in np.unique(m):
        pred = (m >= t).astype(int)
        best = max(best, np.mean(pred == y), np.mean(pred != y))
    assert 0.60 <= best <= 0.95, best


def test_patient_texture_shared():
    ds = data.generate_synthetic(3, 4, 9)
    # healthy images of one patient differ only by pixel noise
    a, b = [im.pixels for im in ds if im.patient_id == "p0000" and im.label == 0][:2]
    assert abs(a.mean() - b.mean()) < 0.02


@pytest.mark.parametrize("seed", range(100))
def test_split_patient_disjoint(default_ds, seed):
    try:
        tr, te = data.split_by_patient(default_ds, 0.12, seed)
    except SplitError:
        return
    assert not set(tr.patients) & set(te.patients)
    assert len(tr) + len(te) == len(default_ds)
    assert tr.split == "train" and te.split == "test"


def test_split_fraction_one_image_per_patient():
    ds = data.generate_synthetic(2000, 1, 4)
    tr, te = data.split_by_patient(ds, 0.12, 4)
    assert abs(len(te) / len(ds) - 0.12) < 0.025
    assert not set(tr.patients) & set(te.patients)


def test_split_keeps_patient_images_together(default_ds):
    tr, te = data.split_by_patient(default_ds, 0.12, 0)
    for side in (tr, te):
        counts = {}
        for im in side:
            counts[im.patient_id] = counts.get(im.patient_id, 0) + 1
        assert set(counts.values()) == {5}


def test_split_single_class_side_rejected():
    ds = data.generate_synthetic(2, 1, 0)  # one healthy patient, one diseased patient
    with pytest.raises(SplitError):
        data.split_by_patient(ds, 0.5, 0)


def test_pgm_round_trip_quantization_bound(tmp_path, gen):
    px = gen.uniform(0, 1, size=(1, 7, 5))
    data.save_image(tmp_path / "a.pgm", px)
    back = data.load_image(tmp_path / "a.pgm")
    assert back.shape == px.shape
    assert np.abs(back - px).max() <= 1 / 510 + 1e-15


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]), st.integers(0, 2**32 - 1))
def test_encode_decode_bound_any_shape(h, w, c, seed):
    px = np.random.default_rng(seed).uniform(0, 1, size=(c, h, w))
    back = data.decode_image(data.encode_image(px))
    assert back.shape == (c, h, w)
    assert np.abs(back - px).max() <= 1 / 510 + 1e-15
    # re-encoding a decoded image is byte-stable
    assert data.encode_image(back) == data.encode_image(px)


def test_all_black_payload():
    buf = data.encode_image(np.zeros((1, 4, 3)))
    assert buf == b"P5\n3 4\n255\n" + bytes(12)


def test_header_comments_accepted():
    buf = b"P5\n# a comment\n2 1\n# another\n255\n\x00\xff"
    np.testing.assert_array_equal(data.decode_image(buf), [[[0.0, 1.0]]])


@pytest.mark.parametrize("buf,msg", [
    (b"P2\n1 1\n255\n\x00", "magic"),
    (b"P5\n1 1\n65535\n\x00\x00", "maxval"),
    (b"P5\n2 2\n255\n\x00", "truncated"),
    (b"P5\n2 2", "header"),
])
def test_decode_errors(buf, msg):
    with pytest.raises(FormatError, match=msg):
        data.decode_image(buf)


def test_labeled_image_validation():
    with pytest.raises(ValueError):
        LabeledImage(np.full((1, 2, 2), 1.5), 0, "p", "i")
    with pytest.raises(ValueError):
        LabeledImage(np.zeros((1, 2, 2)), 2, "p", "i")
    with pytest.raises(ValueError):
        Dataset((LabeledImage(np.zeros((1, 2, 2)), 0, "p", "i"),) * 2)


def test_manifest_round_trip(tmp_path):
    ds = data.generate_synthetic(3, 2, 1)
    written = data.write_dataset(tmp_path, ds)
    loaded = data.load_manifest(tmp_path / "manifest.csv")
    assert loaded.manifest() == written.manifest() == ds.manifest()
    assert np.array_equal(loaded.x, written.x)


def test_manifest_header_only_is_empty(tmp_path):
    (tmp_path / "m.csv").write_text("image_id,patient_id,label,path\n")
    assert len(data.load_manifest(tmp_path / "m.csv")) == 0


def test_manifest_duplicate_id_named(tmp_path):
    (tmp_path / "m.csv").write_text("image_id,patient_id,label,path\na,p,0,x.pgm\na,p,1,y.pgm\n")
    with pytest.raises(FormatError, match="'a'"):
        data.read_manifest(tmp_path / "m.csv")


def test_manifest_missing_file(tmp_path):
    (tmp_path / "m.csv").write_text("image_id,patient_id,label,path\na,p,0,nope.pgm\n")
    with pytest.raises(FileNotFoundError, match="nope.pgm"):
        data.load_manifest(tmp_path / "m.csv")


def test_manifest_bad_header_and_label(tmp_path):
    (tmp_path / "m.csv").write_text("id,label\n")
    with pytest.raises(FormatError):
        data.read_manifest(tmp_path / "m.csv")
    (tmp_path / "m.csv").write_text("image_id,patient_id,label,path\na,p,3,x.pgm\n")
    with pytest.raises(FormatError, match="label"):
        data.read_manifest(tmp_path / "m.csv")
