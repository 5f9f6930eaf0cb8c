import pytest
import torch
import torch.nn.functional as F

from delt.core import get_profile
from delt.initializer import gaussian_init, initial_images, mosaic_init
from delt.patches import RankedPatch


def patch(value, size=8, sid=0):
    return RankedPatch(sid, (0, 0, size, size), torch.full((3, size, size), float(value)), 0)


def test_single_cell_is_resize(tiny_profile):
    px = torch.rand(3, 12, 12)
    p = RankedPatch(0, (0, 0, 12, 12), px, 0)
    out = tiny_profile.denormalize(mosaic_init([p], 1, tiny_profile))
    want = F.interpolate(px[None], size=(8, 8), mode="bilinear", align_corners=False, antialias=True)[0]
    torch.testing.assert_close(out, want)


def test_single_cell_same_size_is_identity(tiny_profile):
    px = torch.rand(3, 8, 8)
    out = mosaic_init([RankedPatch(0, (0, 0, 8, 8), px, 0)], 1, tiny_profile)
    torch.testing.assert_close(tiny_profile.denormalize(out), px)


def test_quadrants(tiny_profile):
    a, b, c, d = 0.1, 0.4, 0.6, 0.9
    out = tiny_profile.denormalize(mosaic_init([patch(a), patch(b), patch(c), patch(d)], 2, tiny_profile))
    for (ys, xs), v in zip([(slice(0, 4), slice(0, 4)), (slice(0, 4), slice(4, 8)),
                            (slice(4, 8), slice(0, 4)), (slice(4, 8), slice(4, 8))], (a, b, c, d)):
        torch.testing.assert_close(out[:, ys, xs], torch.full((3, 4, 4), v))


def test_uneven_grid_covers_canvas(tiny_profile):
    # 8 px over a 3×3 grid: cells of width 2, 3, 3
    ps = [patch(i / 10) for i in range(9)]
    out = tiny_profile.denormalize(mosaic_init(ps, 3, tiny_profile))
    assert out[0, 0, 0] == pytest.approx(0.0, abs=1e-6)
    assert out[0, 7, 7] == pytest.approx(0.8, abs=1e-6)
    assert out[0, 1, 2] == pytest.approx(0.1, abs=1e-6)


def test_too_few_patches(tiny_profile):
    with pytest.raises(ValueError):
        mosaic_init([patch(0.1)] * 3, 2, tiny_profile)


def test_gaussian_statistics_and_determinism():
    p = get_profile("imagenet1k")
    x = gaussian_init(p, 11)
    assert x.shape == (3, 224, 224)
    assert abs(float(x.mean())) < 0.02 and abs(float(x.std()) - 1) < 0.02
    assert torch.equal(x, gaussian_init(p, 11))
    assert not torch.equal(x, gaussian_init(p, 12))


def test_order_is_preserved(tiny_profile):
    ps = [patch(v, sid=i) for i, v in enumerate([0.2, 0.7, 0.5, 0.9])]
    imgs = initial_images(tiny_profile, 4, "real_patch", ps)
    got = [float(tiny_profile.denormalize(x).mean()) for x, _ in imgs]
    assert got == pytest.approx([0.2, 0.7, 0.5, 0.9], abs=1e-6)
    assert [prov for _, prov in imgs] == [p.patch_id for p in ps]


def test_mosaic_consumes_consecutive_patches(tiny_profile):
    ps = [patch(i / 10, sid=i) for i in range(8)]
    imgs = initial_images(tiny_profile, 2, "real_patch", ps, grid=2)
    assert imgs[1][1] == "+".join(p.patch_id for p in ps[4:])
    assert float(tiny_profile.denormalize(imgs[1][0])[0, 0, 0]) == pytest.approx(0.4, abs=1e-6)


def test_gaussian_mode(tiny_profile):
    imgs = initial_images(tiny_profile, 3, "gaussian", seed=5)
    assert all(prov == "gaussian" for _, prov in imgs)
    assert not torch.equal(imgs[0][0], imgs[1][0])
    with pytest.raises(ValueError):
        initial_images(tiny_profile, 3, "real_patch", [patch(0.1)] * 2)
