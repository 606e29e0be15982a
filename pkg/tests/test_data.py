import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fmx import data
from fmx.data import (Dataset, FormatError, LabelSet, block_code_accuracy, code_accuracy, generate_synthetic,
                      lattice_means, load_binary_images, load_labels, read_truth, write_dataset, write_labels,
                      write_truth)


def nearest_mean_codes(z, means, D):
    out = []
    for i, m in enumerate(means):
        zi = z[:, i * D:(i + 1) * D]
        out.append(((zi[:, None, :] - m[None]) ** 2).sum(-1).argmin(1))
    return np.stack(out, 1)


# -- synthetic generator ---------------------------------------------------------------------

def test_nearest_mean_classifier_recovers_codes():
    ds, _, truth = generate_synthetic(2, 2, (4, 3), 3000, 10.0, "identity", sigma=0.5, seed=3)
    pred = nearest_mean_codes(ds.x, truth.means, 2)
    assert np.mean(pred == truth.codes) >= 0.99


def test_zero_separation_is_at_chance():
    ds, _, truth = generate_synthetic(1, 2, (4,), 4000, 0.0, "identity", seed=4)
    assert all(np.all(m == 0) for m in truth.means)
    # every component mean coincides, so every classifier that sees only x is at chance; a random
    # guess is the best possible and scores about 1/4
    guess = np.random.default_rng(0).integers(0, 4, 4000)
    assert abs(np.mean(guess == truth.codes[:, 0]) - 0.25) < 0.03


@pytest.mark.parametrize("K,D", [(2, 1), (3, 2), (4, 3), (4, 2), (3, 1), (5, 2), (1, 2)])
def test_lattice_pairwise_separation(K, D):
    m = lattice_means(K, D, 6.0)
    assert m.shape == (K, D)
    if K > 1:
        dist = np.sqrt(((m[:, None] - m[None]) ** 2).sum(-1))[np.triu_indices(K, 1)]
        assert dist.min() >= 6.0 - 1e-9
    np.testing.assert_allclose(m.mean(axis=0), 0.0, atol=1e-12)


def test_simplex_layout_is_regular():
    m = lattice_means(3, 2, 4.0)
    dist = np.sqrt(((m[:, None] - m[None]) ** 2).sum(-1))[np.triu_indices(3, 1)]
    np.testing.assert_allclose(dist, 4.0, rtol=1e-12)


def test_generation_is_deterministic(tmp_path):
    a = generate_synthetic(2, 2, (4, 4), 100, 6.0, "affine", 0.4, seed=11)
    b = generate_synthetic(2, 2, (4, 4), 100, 6.0, "affine", 0.4, seed=11)
    write_dataset(tmp_path / "a", a[0])
    write_dataset(tmp_path / "b", b[0])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert a[1].entries == b[1].entries


def test_truth_replays_dataset():
    for dec in ("identity", "affine"):
        ds, _, truth = generate_synthetic(2, 3, (2, 5), 50, 3.0, dec, seed=5)
        np.testing.assert_array_equal(truth.replay(), ds.x)


def test_truth_roundtrip(tmp_path):
    ds, _, truth = generate_synthetic(2, 2, (3, 4), 40, 5.0, "affine", seed=6)
    write_truth(tmp_path / "t", truth)
    back = read_truth(tmp_path / "t")
    np.testing.assert_array_equal(back.codes, truth.codes)
    np.testing.assert_array_equal(back.replay(), ds.x)
    assert back.decoder == "affine" and back.sigma == truth.sigma


def test_affine_observations_are_order_one():
    ds, _, truth = generate_synthetic(2, 2, (4, 4), 2000, 6.0, "affine", seed=1)
    assert ds.P == 8 and truth.A.shape == (8, 4)
    assert 0.3 < ds.x.std() < 3.0


def test_label_fraction_on_block_one():
    _, labels, truth = generate_synthetic(2, 2, (4, 4), 1000, 6.0, "affine", 0.4, seed=7)
    assert len(labels) == 400
    assert labels.labeled_blocks == [0]
    for n, row in labels.entries.items():
        assert row == {0: int(truth.codes[n, 0])}


@pytest.mark.parametrize("args", [dict(I=2, Ks=(3,)), dict(D=0), dict(N=0), dict(separation=-1.0),
                                  dict(decoder="mlp"), dict(label_fraction=1.5)])
def test_generator_rejects_invalid(args):
    kw = dict(I=1, D=2, Ks=(3,), N=10, separation=1.0)
    kw.update(args)
    with pytest.raises(ValueError):
        generate_synthetic(**kw)


# -- binary container ------------------------------------------------------------------------

def test_minimal_container(tmp_path):
    p = tmp_path / "d.fmxb"
    p.write_bytes(struct.pack("<4sHQII", b"FMXB", 1, 2, 2, 2) + bytes([0, 1, 1, 0, 1, 1, 1, 1]))
    ds = load_binary_images(p)
    assert ds.N == 2 and ds.P == 4 and ds.image_shape == (2, 2)
    np.testing.assert_array_equal(ds.x, [[0, 1, 1, 0], [1, 1, 1, 1]])


def test_byte_pixels_are_thresholded(tmp_path):
    p = tmp_path / "d.fmxb"
    p.write_bytes(struct.pack("<4sHQII", b"FMXB", 1, 1, 1, 3) + bytes([0, 200, 127]))
    np.testing.assert_array_equal(load_binary_images(p).x, [[0, 1, 0]])


@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_container_roundtrip(N, H, W, seed):
    import tempfile, pathlib
    x = (np.random.default_rng(seed).random((N, H * W)) < 0.5).astype(float)
    with tempfile.TemporaryDirectory() as d:
        p = pathlib.Path(d) / "x.fmxb"
        write_dataset(p, Dataset(x, (H, W)))
        back = load_binary_images(p)
    np.testing.assert_array_equal(back.x, x)
    assert back.image_shape == (H, W)


def test_real_valued_roundtrip(tmp_path):
    x = np.random.default_rng(0).normal(size=(3, 4))
    write_dataset(tmp_path / "r", Dataset(x, (1, 4)))
    np.testing.assert_array_equal(load_binary_images(tmp_path / "r").x, x)


def test_truncated_payload_names_byte_counts(tmp_path):
    p = tmp_path / "d.fmxb"
    p.write_bytes(struct.pack("<4sHQII", b"FMXB", 1, 2, 2, 2) + bytes(5))
    with pytest.raises(FormatError, match="expected 8 payload bytes, found 5"):
        load_binary_images(p)


@pytest.mark.parametrize("blob", [b"FMX", struct.pack("<4sHQII", b"XXXX", 1, 1, 1, 1) + b"\0",
                                  struct.pack("<4sHQII", b"FMXB", 9, 1, 1, 1) + b"\0",
                                  struct.pack("<4sHQII", b"FMXB", 1, 2**60, 2**20, 2**12)])
def test_corrupt_headers(tmp_path, blob):
    p = tmp_path / "d.fmxb"
    p.write_bytes(blob)
    with pytest.raises(FormatError):
        load_binary_images(p)


def test_dataset_shape_check():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 5)), (2, 2))


# -- labels ------------------------------------------------------------------------------------

def test_empty_label_file(tmp_path):
    (tmp_path / "l").write_text("")
    labels = load_labels(tmp_path / "l", (2, 3))
    assert len(labels) == 0 and labels.batch([0, 1]) is None


def test_label_row_to_one_hot(tmp_path):
    (tmp_path / "l").write_text("0 1 2\n")
    labels = load_labels(tmp_path / "l", (2,))
    np.testing.assert_array_equal(labels.one_hot(0, 0), [0, 1])


@pytest.mark.parametrize("text", ["0 1 3\n", "0 2 1\n", "0 0 1\n", "5 1 1\n", "0 1 1\n0 1 2\n", "0 1\n",
                                  "a 1 1\n"])
def test_label_errors(tmp_path, text):
    (tmp_path / "l").write_text(text)
    with pytest.raises(FormatError):
        load_labels(tmp_path / "l", (2,), N=3)


def test_label_roundtrip_and_batch(tmp_path):
    labels = LabelSet((3, 2))
    labels.add(4, 0, 2)
    labels.add(1, 1, 0)
    labels.add(4, 1, 1)
    write_labels(tmp_path / "l", labels)
    back = load_labels(tmp_path / "l", (3, 2))
    assert back.entries == labels.entries
    (m0, y0), (m1, y1) = back.batch([1, 4, 7])
    np.testing.assert_array_equal(m0, [False, True, False])
    np.testing.assert_array_equal(y0[1], [0, 0, 1])
    np.testing.assert_array_equal(m1, [True, True, False])
    assert np.all(y1[m1].sum(axis=1) == 1)


# -- accuracy ---------------------------------------------------------------------------------

def test_code_accuracy_permutation():
    truth = np.array([0, 0, 1, 1, 2, 2])
    pred = np.array([2, 2, 0, 0, 1, 1])
    assert code_accuracy(pred, truth, 3) == 1.0
    assert code_accuracy(pred, truth, 3, permute=False) == 0.0


def test_block_accuracy_matches_swapped_blocks():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 4, (50, 2))
    pred = truth[:, ::-1]
    assert block_code_accuracy(pred, truth, (4, 4)) == [1.0, 1.0]
    assert block_code_accuracy(pred, truth, (4, 4), swap_blocks=False) != [1.0, 1.0]
    # blocks of different sizes are never exchanged
    truth2 = np.stack([rng.integers(0, 4, 50), rng.integers(0, 2, 50)], 1)
    acc = block_code_accuracy(truth2, truth2, (4, 2))
    assert acc == [1.0, 1.0]
