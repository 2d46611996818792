import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from synalign.data_io import (DatasetManifest, ManifestEntry, RunConfig, SplitManifest, load_config,
                              load_image, load_mask, make_splits, normalize_image, read_embeddings,
                              read_manifest, round_half_up, scan_dataset, substream, write_embeddings,
                              write_manifest)
from synalign.errors import ConfigError, FormatError, SplitError


def grouped_manifest(n_groups, per_group, n_syn=0):
    entries = []
    for g in range(n_groups):
        for s in range(per_group):
            name = f"p{g:03d}__s{s:02d}.png" if per_group > 1 else f"img{g:04d}.png"
            entries.append(ManifestEntry(f"/d/labeled/images/{name}", f"/d/labeled/masks/{name}",
                                         f"p{g:03d}" if per_group > 1 else f"img{g:04d}", "labeled"))
    for i in range(n_syn):
        entries.append(ManifestEntry(f"/d/unlabeled_synthetic/images/s{i:04d}.png", None, f"s{i:04d}",
                                     "unlabeled_synthetic"))
    return DatasetManifest(tuple(entries))


# splits -------------------------------------------------------------------

def test_split_counts_eight_image_groups():
    m = grouped_manifest(164, 8)
    assert len(m) == 1312
    s = make_splits(m, 0.10, seed=0)
    assert (len(s.labeled), len(s.unlabeled)) == (136, 1176)


def test_split_counts_single_image_groups():
    s = make_splits(grouped_manifest(560, 1), 0.05, seed=0)
    assert (len(s.labeled), len(s.unlabeled)) == (28, 532)


def test_split_is_deterministic_and_byte_identical():
    m = grouped_manifest(40, 3, n_syn=50)
    a, b = make_splits(m, 0.2, 11), make_splits(m, 0.2, 11)
    assert a.to_text() == b.to_text()
    assert make_splits(m, 0.2, 12).to_text() != a.to_text()


@settings(max_examples=40, deadline=None)
@given(n_groups=st.integers(2, 30), per=st.integers(1, 5), frac=st.floats(0.05, 0.9), seed=st.integers(0, 999))
def test_split_partitions_whole_groups(n_groups, per, frac, seed):
    m = grouped_manifest(n_groups, per)
    target = round_half_up(frac * n_groups * per)
    if target == 0:
        with pytest.raises(SplitError):
            make_splits(m, frac, seed)
        return
    s = make_splits(m, frac, seed)
    lab = {e.group_id for e in s.labeled}
    unl = {e.group_id for e in s.unlabeled}
    assert not lab & unl
    assert len(s.labeled) + len(s.unlabeled) == n_groups * per
    # stops at the first group that reaches the target
    assert target <= len(s.labeled) < target + per


def test_zero_labeled_groups_is_an_error():
    with pytest.raises(SplitError):
        make_splits(grouped_manifest(5, 1), 0.05, 0)


def test_split_roundtrip(tmp_path):
    s = make_splits(grouped_manifest(20, 2, n_syn=40), 0.25, 3)
    s.write(tmp_path / "s.tsv")
    r = SplitManifest.read(tmp_path / "s.tsv")
    assert r == s
    assert len(r.synthetic_in_use) == len(r.unlabeled)


def test_manifest_roundtrip_and_validation(tmp_path):
    m = grouped_manifest(4, 2, n_syn=3)
    write_manifest(m, tmp_path / "m.tsv")
    assert read_manifest(tmp_path / "m.tsv") == m
    with pytest.raises(FormatError):
        DatasetManifest((ManifestEntry("/a.png", None, "a", "labeled"),))
    with pytest.raises(FormatError):
        DatasetManifest((ManifestEntry("/a.png", "/m.png", "a", "unlabeled_synthetic"),))


def test_scan_missing_root_names_path(tmp_path):
    missing = tmp_path / "nope"
    with pytest.raises(FileNotFoundError, match="nope"):
        scan_dataset(missing)


# images and masks -----------------------------------------------------------

def test_constant_image_normalizes_to_zero():
    assert np.all(normalize_image(np.full((5, 5), 117, dtype=np.uint8)) == 0.0)


def test_eight_bit_rescale(tmp_path):
    arr = np.zeros((4, 4), dtype=np.uint8)
    arr[0, 0], arr[1, 1] = 255, 128
    Image.fromarray(arr).save(tmp_path / "x.png")
    img = load_image(tmp_path / "x.png")
    assert img.shape == (4, 4, 1)
    assert img[1, 1, 0] == pytest.approx(128 / 255, abs=1e-6)
    assert 128 / 255 == pytest.approx(0.50196, abs=1e-5)


def test_mask_value_out_of_range(tmp_path):
    arr = np.zeros((4, 4), dtype=np.uint8)
    arr[2, 2] = 7
    Image.fromarray(arr).save(tmp_path / "m.png")
    with pytest.raises(ValueError):
        load_mask(tmp_path / "m.png", 4)
    assert load_mask(tmp_path / "m.png", 8)[2, 2] == 7


# embeddings -------------------------------------------------------------------

def test_embedding_file_size():
    assert len(write_embeddings(np.ones((2, 3)))) == 16 + 24


def test_embedding_roundtrip(rng):
    x = rng.standard_normal((37, 9)).astype(np.float32)
    assert np.array_equal(read_embeddings(write_embeddings(x)), x)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(0, 20), d=st.integers(0, 20), seed=st.integers(0, 2**31))
def test_embedding_roundtrip_property(m, d, seed):
    x = np.random.default_rng(seed).standard_normal((m, d)).astype(np.float32)
    y = read_embeddings(write_embeddings(x))
    assert y.shape == (m, d) and np.array_equal(x, y)


def test_embedding_bad_magic_and_truncation():
    data = write_embeddings(np.ones((2, 3)))
    with pytest.raises(FormatError):
        read_embeddings(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        read_embeddings(data[:-1])
    with pytest.raises(FormatError):
        write_embeddings(np.array([[np.nan]]))


# config ------------------------------------------------------------------------

def test_config_layers(tmp_path):
    (tmp_path / "c.yaml").write_text("lr: 0.05\nseed: 3\niterations: 10\n")
    cfg = load_config(tmp_path / "c.yaml", ["lr=0.02"], seed=9)
    assert (cfg.lr, cfg.seed, cfg.iterations) == (0.02, 9, 10)
    assert cfg.momentum == RunConfig().momentum
    assert load_config(None).warmup == RunConfig().iterations // 10


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, ["not_a_key=1"])


def test_substreams_are_independent_and_reproducible():
    a1, a2 = substream(5, "a").random(4), substream(5, "a").random(4)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, substream(5, "b").random(4))
