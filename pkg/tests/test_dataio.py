import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from advseg.dataio import (
    ChecksumError,
    MagicError,
    PhantomConfig,
    Sample,
    TruncatedFileError,
    VersionError,
    class_means,
    dataset_bytes,
    generate_phantom,
    kfold_split,
    presence_from_labels,
    read_dataset,
    read_params,
    write_dataset,
    write_params,
)
from advseg.labels import BG, GM, B, WM, L, CSF, V, C, BS, N_LABELS, ROI_IDS


@pytest.fixture(scope="module")
def phantoms():
    return generate_phantom(PhantomConfig(seed=7, n_samples=40))


def test_generation_is_deterministic():
    a = generate_phantom(PhantomConfig(seed=5, n_samples=4))
    b = generate_phantom(PhantomConfig(seed=5, n_samples=4))
    assert a == b
    assert generate_phantom(PhantomConfig(seed=6, n_samples=4)) != a


def test_always_present_tissues_and_varying_presence(phantoms):
    present = np.array([s.presence for s in phantoms])
    roi = {k: i for i, k in enumerate(ROI_IDS)}
    for k in (GM, WM, CSF):
        assert present[:, roi[k]].all()
    for k in (BS, C, V, B, L):
        assert 0 < present[:, roi[k]].sum() < len(phantoms)


def test_images_are_finite_and_in_range(phantoms):
    for s in phantoms:
        assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
        assert np.isfinite(s.image).all() and s.image.min() >= 0 and s.image.max() <= 1


def test_class_means_are_separated():
    means = class_means()
    for a in range(N_LABELS):
        for b in range(a + 1, N_LABELS):
            assert np.abs(means[:, a] - means[:, b]).max() >= 0.08


def test_empirical_class_means_are_separated(phantoms):
    # noise-free rendering shows the per-class means directly
    clean = generate_phantom(PhantomConfig(seed=7, n_samples=10, noise_sigma=0.0))
    sums = np.zeros((3, N_LABELS))
    counts = np.zeros(N_LABELS)
    for s in clean:
        for k in range(N_LABELS):
            m = s.labels == k
            sums[:, k] += s.image[:, m].sum(axis=1)
            counts[k] += m.sum()
    seen = counts > 0
    means = sums[:, seen] / counts[seen]
    for a in range(means.shape[1]):
        for b in range(a + 1, means.shape[1]):
            assert np.abs(means[:, a] - means[:, b]).max() >= 0.08


def test_interior_structures_are_wrapped_in_white_matter(phantoms):
    allowed = np.isin(np.arange(N_LABELS), [WM, V, B, L])
    for s in phantoms:
        lab = np.pad(s.labels, 1, constant_values=BG)
        inner = np.isin(lab, [V, B, L])
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            neighbour = np.roll(lab, (dy, dx), axis=(0, 1))
            assert allowed[neighbour[inner]].all()


def test_csf_forms_the_outer_rim(phantoms):
    four = ndimage.generate_binary_structure(2, 1)
    for s in phantoms:
        brain = s.labels != BG
        edge = brain & ~ndimage.binary_erosion(brain, four, border_value=0)
        assert (s.labels[edge] == CSF).all()


def test_presence_examples():
    assert not presence_from_labels(np.zeros((4, 4), dtype=np.uint8)).any()
    m = np.zeros((4, 4), dtype=np.uint8)
    m[2, 2] = V
    p = presence_from_labels(m)
    assert p.sum() == 1 and p[list(ROI_IDS).index(V)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_presence_matches_histogram(seed):
    m = np.random.default_rng(seed).integers(0, N_LABELS, (6, 6)).astype(np.uint8)
    hist = {k: 0 for k in range(N_LABELS)}
    for v in m.ravel():
        hist[int(v)] += 1
    np.testing.assert_array_equal(presence_from_labels(m), [hist[k] > 0 for k in ROI_IDS])


def test_fold_examples():
    folds = kfold_split(10, 5, 0)
    assert [len(f) for f in folds] == [2] * 5
    assert sorted(i for f in folds for i in f) == list(range(10))
    assert kfold_split(10, 5, 0) == folds
    assert sorted(len(f) for f in kfold_split(11, 5, 3)) == [2, 2, 2, 2, 3]
    with pytest.raises(ValueError):
        kfold_split(3, 5, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(2, 6), st.integers(0, 2**31))
def test_folds_partition(n, k, seed):
    if n < k:
        return
    folds = kfold_split(n, k, seed)
    flat = [i for f in folds for i in f]
    assert sorted(flat) == list(range(n))
    assert max(map(len, folds)) - min(map(len, folds)) <= 1


def random_samples(rng, n, c=3, h=5, w=7):
    return [Sample(rng.uniform(0, 1, (c, h, w)).astype(np.float32),
                   rng.integers(0, N_LABELS, (h, w)).astype(np.uint8)) for _ in range(n)]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 5))
def test_dataset_round_trip(tmp_path_factory, seed, n):
    path = tmp_path_factory.mktemp("segv") / "d.segv"
    samples = random_samples(np.random.default_rng(seed), n)
    write_dataset(samples, path)
    back = read_dataset(path)
    assert back == samples
    assert dataset_bytes(back) == dataset_bytes(samples)


def test_empty_dataset(tmp_path):
    write_dataset([], tmp_path / "e.segv")
    assert read_dataset(tmp_path / "e.segv") == []


def test_header_layout(tmp_path):
    write_dataset(random_samples(np.random.default_rng(0), 2, c=3, h=4, w=6), tmp_path / "d.segv")
    blob = (tmp_path / "d.segv").read_bytes()
    assert blob[:4] == b"SEGV"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert int.from_bytes(blob[6:10], "little") == 2
    assert blob[10] == 3
    assert int.from_bytes(blob[11:13], "little") == 4 and int.from_bytes(blob[13:15], "little") == 6
    assert len(blob) == 15 + 2 * (3 * 4 * 6 * 4 + 4 * 6) + 4


def test_corruption_errors(tmp_path):
    path = tmp_path / "d.segv"
    write_dataset(random_samples(np.random.default_rng(1), 3), path)
    good = path.read_bytes()
    for pos in (20, len(good) // 2, len(good) - 5):
        bad = bytearray(good)
        bad[pos] ^= 0x40
        path.write_bytes(bytes(bad))
        with pytest.raises(ChecksumError):
            read_dataset(path)
    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(MagicError):
        read_dataset(path)
    path.write_bytes(good[:4] + (2).to_bytes(2, "little") + good[6:])
    with pytest.raises(VersionError):
        read_dataset(path)
    path.write_bytes(good[:-9])
    with pytest.raises(TruncatedFileError):
        read_dataset(path)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_params_round_trip_and_corruption(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    tensors = {f"layer{i}.w": rng.normal(size=tuple(rng.integers(1, 4, rng.integers(1, 5)))).astype(np.float32)
               for i in range(int(rng.integers(0, 4)))}
    path = tmp_path_factory.mktemp("segp") / "p.segp"
    write_params(tensors, path)
    back = read_params(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()
    blob = bytearray(path.read_bytes())
    blob[int(rng.integers(0, len(blob)))] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises((ChecksumError, MagicError, VersionError, TruncatedFileError)):
        read_params(path)


def test_corrupted_tensor_count_is_detected(tmp_path):
    path = tmp_path / "p.segp"
    write_params({"a": np.ones((2, 2), np.float32), "b": np.zeros(3, np.float32)}, path)
    good = path.read_bytes()
    blob = bytearray(good)
    blob[6] ^= 0x02  # tensor count 2 -> 0: parsing stops early, the CRC names the cause
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        read_params(path)
    blob = bytearray(good)
    blob[6] ^= 0x01  # 2 -> 3: parsing runs off the end
    path.write_bytes(bytes(blob))
    with pytest.raises(TruncatedFileError):
        read_params(path)
