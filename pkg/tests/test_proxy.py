import numpy as np
import pytest
import torch

from ragstereo.proxy import (ColorStats, build_proxy_dataset, color_transfer, lab_to_rgb,
                             mean_color_distance, rgb_to_lab, scene_color_stats, transfer_lab)
from ragstereo.scenes import SceneDataset, SceneSpec, generate_scene
from ragstereo.stereo_net import warp_right_to_left


def lab_by_hand(rgb):
    """Independent evaluation of the colour space for one RGB triple."""
    r, g, b = rgb
    L = 0.3811 * r + 0.5783 * g + 0.0402 * b
    M = 0.1967 * r + 0.7244 * g + 0.0782 * b
    S = 0.0241 * r + 0.1288 * g + 0.8444 * b
    L, M, S = (np.log10(v + 1 / 255) for v in (L, M, S))
    return np.array([(L + M + S) / np.sqrt(3), (L + M - 2 * S) / np.sqrt(6), (L - M) / np.sqrt(2)])


def uniform(rgb, h=4, w=5):
    return np.broadcast_to(np.asarray(rgb, np.float64), (h, w, 3)).copy()


def test_colour_space_round_trip_and_hand_values():
    rng = np.random.default_rng(0)
    img = rng.random((6, 7, 3))
    assert np.abs(lab_to_rgb(rgb_to_lab(img)) - img).max() < 1e-12
    assert np.allclose(rgb_to_lab(np.array([0.2, 0.5, 0.9])), lab_by_hand((0.2, 0.5, 0.9)),
                       atol=1e-14)


def test_stats_examples():
    s = scene_color_stats([uniform((0.5, 0.5, 0.5))])
    assert np.all(s.std == 0)
    rng = np.random.default_rng(1)
    imgs = [rng.random((5, 5, 3)) for _ in range(3)]
    a, b = scene_color_stats(imgs), scene_color_stats(imgs + imgs)
    assert np.allclose(a.mean, b.mean, atol=1e-15) and np.allclose(a.std, b.std, atol=1e-15)
    # two flat images: mean is the midpoint, std the half distance
    p, q = (0.2, 0.4, 0.6), (0.9, 0.3, 0.1)
    s = scene_color_stats([uniform(p), uniform(q)])
    lp, lq = lab_by_hand(p), lab_by_hand(q)
    assert np.allclose(s.mean, (lp + lq) / 2, atol=1e-14)
    assert np.allclose(s.std, np.abs(lp - lq) / 2, atol=1e-14)
    with pytest.raises(ValueError):
        scene_color_stats([])


def test_transfer_examples():
    rng = np.random.default_rng(2)
    img = 0.1 + 0.8 * rng.random((8, 8, 3))
    src = scene_color_stats([img])
    assert np.abs(color_transfer(img, src, src) - img).max() < 1e-12
    tgt = scene_color_stats([0.2 + 0.5 * rng.random((8, 8, 3)) ** 2])
    flat = uniform((0.3, 0.3, 0.3))
    out = transfer_lab(flat, scene_color_stats([flat]), tgt)
    assert np.allclose(out, tgt.mean, atol=1e-14)
    raw = color_transfer(img, src, tgt, clip=False)
    back = scene_color_stats([raw])
    assert np.abs(back.mean - tgt.mean).max() < 1e-6
    assert np.abs(back.std - tgt.std).max() < 1e-6
    again = scene_color_stats([color_transfer(raw, back, tgt, clip=False)])
    assert np.abs(again.mean - back.mean).max() < 1e-6
    assert np.abs(again.std - back.std).max() < 1e-6


def scene(name, tint, seed, half=True, brightness=0.0):
    return generate_scene(SceneSpec(name, tint=tint, brightness=brightness, seed=seed, height=30,
                                    width=40, pairs=6, test_pairs=2, half_integer=half))


def test_proxy_dataset_properties(tmp_path):
    synth = scene("synthetic", (1, 1, 1), 1)
    real = scene("night", (0.4, 0.5, 1.3), 2, brightness=-0.1)
    real_images = list(real.left) + list(real.right)
    proxy = build_proxy_dataset(synth, real_images, "night")
    assert len(proxy) == len(synth)
    assert np.array_equal(proxy.disparity, synth.disparity)
    assert np.array_equal(proxy.mask, synth.mask)
    assert proxy.meta["source"] == "synthetic" and proxy.meta["target"] == "night"
    raw = mean_color_distance(list(synth.left), real_images)
    moved = mean_color_distance(list(proxy.left), real_images)
    assert moved < raw
    proxy.save(tmp_path / "p")
    assert SceneDataset.load(tmp_path / "p").meta["target_stats"] == proxy.meta["target_stats"]


def warp_error(ds):
    right = torch.from_numpy(ds.right).permute(0, 3, 1, 2).double()
    rec, _ = warp_right_to_left(right, torch.from_numpy(ds.disparity).double())
    return np.abs(rec.permute(0, 2, 3, 1).numpy() - ds.left)[ds.mask].max()


def test_transfer_preserves_geometry_for_whole_pixel_shifts():
    synth = scene("synthetic", (1, 1, 1), 3, half=False)
    real = scene("dusk", (1.4, 0.6, 0.5), 4, half=False)
    proxy = build_proxy_dataset(synth, list(real.left), "dusk")
    assert warp_error(synth) < 1e-6
    assert warp_error(proxy) < 1e-6
