import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from kdctc.image_pipeline import (
    BatchError,
    ImageDecodeError,
    ImageLoader,
    PatchError,
    draw_patch,
    load_image,
    make_batch,
    normalize,
    preprocess_global,
    random_flips,
    resize,
    sample_local_patch,
    to_tensor,
)


def _img(h=150, w=150, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def test_global_view_shape():
    out = preprocess_global(_img(), True, np.random.default_rng(0))
    assert out.shape == (3, 192, 192) and out.dtype == torch.float32


def test_eval_mode_is_deterministic():
    img = _img()
    a = preprocess_global(img, False, None)
    b = preprocess_global(img, False, None)
    assert torch.equal(a, b)


def test_constant_image_stays_constant():
    img = np.full((150, 150, 3), 77, np.uint8)
    out = preprocess_global(img, True, np.random.default_rng(1))
    for c in range(3):
        assert (out[c].max() - out[c].min()).item() <= 1e-6


def test_grayscale_promoted(tmp_path):
    Image.fromarray(np.full((20, 30), 9, np.uint8), "L").save(tmp_path / "g.png")
    arr = load_image(tmp_path / "g.png")
    assert arr.shape == (20, 30, 3)


@pytest.mark.parametrize("fmt", ["png", "tiff"])
def test_formats_decode(tmp_path, fmt):
    img = _img(40, 50)
    Image.fromarray(img).save(tmp_path / f"x.{fmt}")
    assert np.array_equal(load_image(tmp_path / f"x.{fmt}"), img)


def test_undecodable(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"nope")
    with pytest.raises(ImageDecodeError, match="bad.png"):
        load_image(tmp_path / "bad.png")


@pytest.mark.parametrize("fraction, side", [(0.1, 15), (0.5, 75)])
def test_patch_side_arithmetic(fraction, side):
    class FixedRng:
        def uniform(self, lo, hi):
            return fraction

        def integers(self, lo, hi):
            return lo

        def random(self, n):
            return np.ones(n)

    out, spec = sample_local_patch(_img(), True, FixedRng())
    assert spec.side == side
    assert out.shape == (3, 96, 96)


def test_patch_bounds_exhaustive():
    rng = np.random.default_rng(0)
    sides = []
    for _ in range(10_000):
        spec = draw_patch(150, 150, rng)
        assert 0 <= spec.top and spec.top + spec.side <= 150
        assert 0 <= spec.left and spec.left + spec.side <= 150
        assert 0.1 <= spec.fraction <= 0.5
        sides.append(spec.side)
    assert min(sides) >= 15 and max(sides) <= 75


@settings(max_examples=200, deadline=None)
@given(h=st.integers(10, 400), w=st.integers(10, 400), seed=st.integers(0, 2**32 - 1))
def test_patch_bounds_property(h, w, seed):
    spec = draw_patch(h, w, np.random.default_rng(seed))
    short = min(h, w)
    assert spec.side >= 1
    assert spec.top + spec.side <= h and spec.left + spec.side <= w
    assert abs(spec.side - spec.fraction * short) <= 0.5 + 1e-9


def test_image_too_small():
    with pytest.raises(PatchError):
        sample_local_patch(_img(9, 40), True, np.random.default_rng(0))


@given(seed=st.integers(0, 1000))
def test_flip_involution(seed):
    t = torch.tensor(np.random.default_rng(seed).normal(size=(3, 7, 5)))
    once = random_flips(t, np.random.default_rng(seed))
    twice = random_flips(once, np.random.default_rng(seed))
    assert torch.equal(twice, t)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_flips_only_permute_values(seed):
    img = _img(60, 45, seed)
    ref = normalize(resize(to_tensor(img), 192))
    aug = preprocess_global(img, True, np.random.default_rng(seed))
    assert torch.equal(torch.sort(aug.flatten()).values, torch.sort(ref.flatten()).values)


def _loader():
    imgs = {f"p{i}": _img(150, 150, i) for i in range(40)}
    return lambda p: imgs[p]


def test_batch_of_32():
    entries = [(f"p{i}", i % 8) for i in range(32)]
    b = make_batch(entries, _loader(), True, np.random.default_rng(0))
    assert b.global_views.shape == (32, 3, 192, 192)
    assert b.local_views.shape == (32, 3, 96, 96)
    assert b.labels.tolist() == [i % 8 for i in range(32)]
    assert len(b.patches) == 32 and b.local_used


def test_batch_of_one_and_eval_flag():
    b = make_batch([("p0", 0)], _loader(), False, np.random.default_rng(0))
    assert len(b) == 1 and b.local_views.shape == (1, 3, 96, 96)
    assert not b.local_used


def test_batch_determinism():
    entries = [(f"p{i}", 0) for i in range(6)]
    a = make_batch(entries, _loader(), True, np.random.default_rng(5))
    b = make_batch(entries, _loader(), True, np.random.default_rng(5))
    assert torch.equal(a.global_views, b.global_views)
    assert torch.equal(a.local_views, b.local_views)
    assert a.patches == b.patches


def test_batch_load_error_names_entry(tmp_path):
    with pytest.raises(BatchError, match="missing.png"):
        make_batch([("missing.png", 0)], ImageLoader(tmp_path), True, np.random.default_rng(0))
    with pytest.raises(BatchError):
        make_batch([], _loader(), True, np.random.default_rng(0))
