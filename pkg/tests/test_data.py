import struct

import numpy as np
import pytest

from whitecrate.data import (
    IDX_IMAGES,
    IDX_LABELS,
    PatchSpec,
    SyntheticSpec,
    dataset_from_images,
    gen_synthetic,
    load_dataset,
    load_idx,
    nearest_subspace_classify,
    patchify,
    read_idx,
    save_dataset,
    spec_from_dict,
    unpatchify,
    write_idx,
)
from whitecrate.diagnostics import off_diagonal_coherence, subspace_coherence
from whitecrate.errors import ConfigError, FormatError, ShapeError
from whitecrate.linalg import Rng

SMALL = SyntheticSpec(classes=3, tokens=5, d_in=24, subspaces_per_class=2, p_data=3, samples_per_class=30)


# --- synthetic generator ----------------------------------------------------------------

def test_noiseless_tokens_lie_on_class_subspaces():
    ds = gen_synthetic(SyntheticSpec(**{**SMALL.__dict__, "sigma_data": 0.0}))
    bases = ds.extras["bases"]
    for x, c in zip(ds.tokens, ds.labels):
        for tok in x.T:
            resid = min(np.linalg.norm(tok - u @ (u.T @ tok)) for u in bases[c])
            assert resid <= 1e-10


def test_class_bases_orthonormal_and_mutually_orthogonal():
    bases = gen_synthetic(SMALL).extras["bases"]
    C, S, d, p = bases.shape
    flat = bases.reshape(C * S, d, p)
    for u in flat:
        assert np.max(np.abs(u.T @ u - np.eye(p))) <= 1e-12
    gram = subspace_coherence(flat)
    assert off_diagonal_coherence(gram, p) <= 1e-10


def test_nearest_subspace_oracle_is_perfect_on_clean_data():
    spec = SyntheticSpec(classes=2, tokens=6, d_in=16, subspaces_per_class=2, p_data=2, sigma_data=0.0,
                         samples_per_class=100)
    ds = gen_synthetic(spec)
    pred = nearest_subspace_classify(ds.tokens, ds.extras["bases"])
    assert np.array_equal(pred, ds.labels)


def test_split_partitions_every_class():
    ds = gen_synthetic(SMALL)
    for c in range(3):
        mask = ds.labels == c
        assert np.sum(ds.split[mask] == 1) == 6 and np.sum(ds.split[mask] == 0) == 24
    assert set(np.unique(ds.split)) == {0, 1}
    assert np.concatenate([ds.indices("train"), ds.indices("test")]).size == len(ds)


def test_same_seed_byte_identical_files(tmp_path):
    save_dataset(gen_synthetic(SMALL), tmp_path / "a")
    save_dataset(gen_synthetic(SMALL), tmp_path / "b")
    for name in ("manifest.json", "blob.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = gen_synthetic(SyntheticSpec(**{**SMALL.__dict__, "seed": 1}))
    assert not np.array_equal(other.tokens, gen_synthetic(SMALL).tokens)


def test_dataset_reload_exact(tmp_path):
    ds = gen_synthetic(SMALL)
    back = load_dataset(save_dataset(ds, tmp_path / "ds"))
    assert back.tokens.tobytes() == ds.tokens.tobytes()
    assert np.array_equal(back.labels, ds.labels) and np.array_equal(back.split, ds.split)
    assert np.array_equal(back.extras["bases"], ds.extras["bases"])
    assert back.meta == ds.meta and back.num_classes == 3


def test_synthetic_spec_validation():
    for bad in (dict(classes=0), dict(p_data=30), dict(sigma_data=-1.0), dict(holdout=1.0),
                dict(classes=5, subspaces_per_class=2, p_data=3)):
        with pytest.raises(ConfigError):
            SyntheticSpec(**{**SMALL.__dict__, **bad})


def test_spec_from_dict_rejects_unknown_keys():
    assert spec_from_dict(SyntheticSpec, {"classes": 2}).classes == 2
    with pytest.raises(ConfigError, match="colour"):
        spec_from_dict(SyntheticSpec, {"colour": 2})


# --- IDX -------------------------------------------------------------------------------

def test_idx_header_example(tmp_path):
    raw = bytes([0, 0, 8, 3]) + struct.pack(">III", 2, 2, 2) + bytes(range(8))
    (tmp_path / "img").write_bytes(raw)
    imgs = read_idx(tmp_path / "img", IDX_IMAGES)
    assert imgs.dtype == np.uint8 and imgs.shape == (2, 2, 2)
    np.testing.assert_array_equal(imgs[1], [[4, 5], [6, 7]])


def test_idx_errors_are_distinct(tmp_path):
    write_idx(tmp_path / "img", np.zeros((3, 2, 2), np.uint8), IDX_IMAGES)
    write_idx(tmp_path / "lab", np.zeros(2, np.uint8), IDX_LABELS)
    with pytest.raises(FormatError, match="count mismatch"):
        load_idx(tmp_path / "img", tmp_path / "lab")
    with pytest.raises(FormatError, match="bad magic"):
        read_idx(tmp_path / "lab", IDX_IMAGES)
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="truncated data"):
        read_idx(tmp_path / "short", IDX_IMAGES)
    (tmp_path / "head").write_bytes(raw[:6])
    with pytest.raises(FormatError, match="truncated header"):
        read_idx(tmp_path / "head", IDX_IMAGES)


def test_idx_round_trip(tmp_path):
    rng = Rng(0)
    imgs = rng.integers(0, 256, size=(5, 6, 4)).astype(np.uint8)
    labels = rng.integers(0, 10, size=5).astype(np.uint8)
    write_idx(tmp_path / "i", imgs, IDX_IMAGES)
    write_idx(tmp_path / "l", labels, IDX_LABELS)
    a, b = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(a, imgs) and np.array_equal(b, labels)


# --- patches ------------------------------------------------------------------------------

def test_patchify_single_pixels_row_major():
    img = np.array([[[10, 20], [30, 40]]], dtype=np.uint8)
    np.testing.assert_allclose(patchify(img, PatchSpec(2, 2, 1, 1)), [[[10, 20, 30, 40]]] / np.float64(255))


def test_patchify_constant_image():
    tokens = patchify(np.full((1, 6, 6), 77, np.uint8), PatchSpec(6, 6, 2, 3))
    assert tokens.shape == (1, 6, 6)
    assert np.all(tokens == tokens[:, :, :1])


def test_patchify_ramp_hand_layout():
    img = np.arange(16, dtype=np.uint8).reshape(1, 4, 4)
    want = np.array([[0, 2, 8, 10], [1, 3, 9, 11], [4, 6, 12, 14], [5, 7, 13, 15]]) / 255.0
    np.testing.assert_array_equal(patchify(img, PatchSpec(4, 4, 2, 2))[0], want)


def test_patchify_channels_last_within_patch():
    img = np.arange(8, dtype=np.uint8).reshape(1, 2, 2, 2)
    tok = patchify(img, PatchSpec(2, 2, 2, 2, channels=2))[0, :, 0] * 255
    np.testing.assert_allclose(tok, np.arange(8), atol=1e-12)


def test_unpatchify_inverts_patchify():
    rng = Rng(1)
    for spec, shape in ((PatchSpec(8, 6, 2, 3), (4, 8, 6)), (PatchSpec(4, 4, 2, 2, 3), (2, 4, 4, 3))):
        imgs = rng.integers(0, 256, size=shape).astype(np.uint8)
        assert np.array_equal(unpatchify(patchify(imgs, spec), spec), imgs)


def test_patch_errors():
    with pytest.raises(ShapeError):
        PatchSpec(5, 4, 2, 2)
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 4, 6), np.uint8), PatchSpec(4, 4, 2, 2))


def test_image_dataset_flip_batches():
    imgs = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4)
    ds = dataset_from_images(imgs, np.array([0, 1]), PatchSpec(4, 4, 2, 2), holdout=0.0)
    np.testing.assert_array_equal(ds.batch(np.array([0, 1])), ds.tokens)
    flipped = ds.batch(np.array([0, 1]), np.array([True, False]))
    np.testing.assert_array_equal(flipped[0], patchify(imgs[:1, :, ::-1], ds.patch)[0])
    np.testing.assert_array_equal(flipped[1], ds.tokens[1])
