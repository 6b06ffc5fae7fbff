import numpy as np
import pytest

from spikeseg import data
from spikeseg.errors import FormatError, ValidationError


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    gray = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    rgb = rng.integers(0, 256, (3, 4, 3), dtype=np.uint8)
    data.write_pnm(tmp_path / "g.pgm", gray)
    data.write_pnm(tmp_path / "c.ppm", rgb)
    np.testing.assert_array_equal(data.read_pnm(tmp_path / "g.pgm"), gray)
    np.testing.assert_array_equal(data.read_pnm(tmp_path / "c.ppm"), rgb)


def test_pnm_comments_and_errors(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(data.read_pnm(tmp_path / "a.pgm"), [[1, 2]])
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n7\n")
    with pytest.raises(FormatError):
        data.read_pnm(tmp_path / "b.pgm")
    with pytest.raises(ValidationError):
        data.write_pnm(tmp_path / "c.pgm", np.zeros((2, 2), np.float32))


def test_synthesis_is_deterministic():
    spec = data.SyntheticSegSpec(image_size=16, num_train=10, num_eval=5, seed=4)
    a, b = data.synthesize(spec), data.synthesize(spec)
    for x, y in zip(a, b):
        assert x.inputs.tobytes() == y.inputs.tobytes() and x.labels.tobytes() == y.labels.tobytes()
    other = data.synthesize(data.SyntheticSegSpec(image_size=16, num_train=10, num_eval=5, seed=5))
    assert other[0].inputs.tobytes() != a[0].inputs.tobytes()


def test_four_classes_hundred_samples():
    trn, ev = data.synthesize(data.SyntheticSegSpec(num_classes=4, num_train=100, num_eval=0, seed=1))
    assert len(trn) == 100 and len(ev) == 0
    assert set(np.unique(trn.labels)) <= {0, 1, 2, 3}
    assert trn.inputs.min() >= 0 and trn.inputs.max() <= 1


@pytest.mark.parametrize("seed", range(8))
def test_every_class_in_train(seed):
    # three images make a missing class likely, so rejection sampling is exercised
    trn, _ = data.synthesize(data.SyntheticSegSpec(num_classes=4, num_train=3, num_eval=1, seed=seed, image_size=16))
    assert {1, 2, 3} <= set(np.unique(trn.labels))


def test_spec_validation():
    with pytest.raises(ValidationError):
        data.SyntheticSegSpec(num_classes=5)
    with pytest.raises(ValidationError):
        data.SyntheticSegSpec(channels=2)


def test_save_load_static(tmp_path):
    trn, ev = data.synthesize(data.SyntheticSegSpec(image_size=16, num_train=4, num_eval=2, seed=0))
    data.save_dataset(tmp_path, {"train": trn, "eval": ev})
    back = data.load_dataset(tmp_path, "eval")
    assert back.ids == ev.ids and back.labels.tobytes() == ev.labels.tobytes()
    # 8-bit storage quantises intensities
    assert np.abs(back.inputs - ev.inputs).max() <= 0.5 / 255 + 1e-6
    assert sorted(p.name for p in (tmp_path / "images").iterdir()) == [f"000{i}.pgm" for i in range(6)]


def test_save_load_rgb(tmp_path):
    trn, _ = data.synthesize(data.SyntheticSegSpec(image_size=8, num_train=2, num_eval=0, seed=0, channels=3))
    data.save_dataset(tmp_path, {"train": trn})
    assert data.load_dataset(tmp_path, "train").inputs.shape == (2, 3, 8, 8)


def test_save_load_events(tmp_path):
    spec = data.SyntheticSegSpec(image_size=16, num_train=2, num_eval=1, seed=0)
    (trn, streams), _ = data.synthesize_events(spec, frames=4)
    data.save_dataset(tmp_path, {"train": trn}, streams=streams)
    back = data.load_dataset(tmp_path, "train")
    assert back.kind == "dvs"
    np.testing.assert_array_equal(back.inputs, trn.inputs)


def test_event_synthesis_counts():
    spec = data.SyntheticSegSpec(image_size=16, num_train=3, num_eval=0, seed=2)
    (trn, streams), _ = data.synthesize_events(spec, frames=5)
    assert trn.inputs.shape == (3, 5, 2, 16, 16)
    for i, sid in enumerate(trn.ids):
        assert trn.inputs[i].sum() == len(streams[sid].events)


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        data.load_dataset(tmp_path, "train")
    (tmp_path / "manifest.txt").write_text("something else\n")
    with pytest.raises(FormatError):
        data.load_dataset(tmp_path, "train")
