import numpy as np
import pytest
from scipy import ndimage

from denet.data import (PGMError, SceneGenerationError, SceneSpec, _background, dataset_hash, gen_dataset,
                        gen_scene, load_dataset, read_manifest, read_mask, read_pgm, read_pgm_bytes,
                        target_footprint, write_pgm)
from denet.losses import edge_gt_from_mask
from denet.metrics import components


def test_same_seed_is_bitwise_identical():
    a, b = gen_scene(SceneSpec(seed=5)), gen_scene(SceneSpec(seed=5))
    for k in ("image", "mask", "edge"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    assert a.targets == b.targets
    assert not np.array_equal(a.image, gen_scene(SceneSpec(seed=6)).image)


def test_zero_contrast_leaves_background():
    spec = SceneSpec(target_contrast=(0.0, 0.0), noise_sigma=0.0, seed=3)
    s = gen_scene(spec)
    bg = _background(np.random.default_rng(3), 64, 64, spec.clutter_scale)
    assert np.array_equal(s.image[0], bg)
    assert s.mask.any()


def test_radius_one_footprint_at_center():
    fp = target_footprint((64, 64), 32, 32, 1.0)
    assert 1 <= fp.sum() <= 9 and fp[32, 32]


def test_radius_one_scenes_have_small_disks():
    for seed in range(10):
        s = gen_scene(SceneSpec(n_targets=1, target_radius_px=(1.0, 1.0), seed=seed))
        cy, cx, _ = s.targets[0]
        assert 1 <= s.mask.sum() <= 9 and s.mask[0, cy, cx] == 1


def test_sample_invariants():
    s = gen_scene(SceneSpec(seed=9))
    assert s.image.shape == (1, 64, 64) and s.image.min() >= 0 and s.image.max() <= 1
    union = np.zeros((64, 64), bool)
    for cy, cx, r in s.targets:
        union |= target_footprint((64, 64), cy, cx, r)
    assert np.array_equal(s.mask[0].astype(bool), union)
    assert np.array_equal(s.edge, edge_gt_from_mask(s.mask))


def test_infeasible_placement_raises():
    with pytest.raises(SceneGenerationError):
        gen_scene(SceneSpec(size=(8, 8), target_radius_px=(4.0, 4.0)))
    # a 12x12 frame fits only one radius-2 target, so any draw of two or more must fail
    raised = 0
    for seed in range(20):
        try:
            s = gen_scene(SceneSpec(size=(12, 12), target_radius_px=(2.0, 2.0), seed=seed))
        except SceneGenerationError as exc:
            assert "100 attempts" in str(exc)
            raised += 1
        else:
            assert len(s.targets) == 1
    assert raised > 0


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(n_targets=0)
    with pytest.raises(ValueError):
        SceneSpec(target_radius_px=(3.0, 1.0))


def test_components_and_diameters_over_many_scenes():
    spec = SceneSpec()
    limit = 2 * spec.target_radius_px[1] + 2
    for seed in range(100):
        s = gen_scene(SceneSpec(seed=seed))
        lab, n = components(s.mask)
        assert 1 <= n <= spec.n_targets
        for sl in ndimage.find_objects(lab):
            assert max(sl[0].stop - sl[0].start, sl[1].stop - sl[1].start) <= limit


def test_mean_contrast_within_range():
    lo, hi = SceneSpec().target_contrast
    measured = []
    for seed in range(100):
        spec = SceneSpec(seed=seed)
        s = gen_scene(spec)
        bg = _background(np.random.default_rng(seed), 64, 64, spec.clutter_scale)
        lift = s.image[0] - bg
        for cy, cx, _ in s.targets:
            measured.append(lift[cy, cx])
    mean = float(np.mean(measured))
    assert 0.8 * lo <= mean <= 1.2 * hi
    # the draw is uniform, so the mean should also sit near the midpoint
    assert abs(mean - (lo + hi) / 2) <= 0.2 * (lo + hi) / 2


# -- PGM ------------------------------------------------------------------------------

def test_pgm_half_gray_and_header(tmp_path):
    p = tmp_path / "g.pgm"
    write_pgm(p, np.full((1, 64, 64), 0.5))
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n64 64\n255\n")
    assert np.all(read_pgm_bytes(p) == 128)


def test_pgm_round_trip_within_quantization(tmp_path):
    img = np.random.default_rng(0).random((1, 16, 24))
    p = tmp_path / "r.pgm"
    write_pgm(p, img)
    back = read_pgm(p).data
    assert back.shape == (1, 16, 24)
    assert np.max(np.abs(back - img)) <= 1 / 255 / 2 + 1e-12


def test_mask_round_trip_exact(tmp_path):
    m = (np.random.default_rng(1).random((1, 20, 20)) < 0.2).astype(np.uint8)
    p = tmp_path / "m.pgm"
    write_pgm(p, m)
    assert set(np.unique(read_pgm_bytes(p))) <= {0, 255}
    assert np.array_equal(read_mask(p), m)


@pytest.mark.parametrize("payload,match", [
    (b"P2\n2 2\n255\n\x00\x00\x00\x00", "binary"),
    (b"P5\n2 2\n65535\n\x00\x00\x00\x00", "maxval"),
    (b"P5\n2 2\n255\n\x00\x00", "truncated"),
    (b"P5\n2", "header"),
    (b"P5\nx 2\n255\n\x00\x00\x00\x00", "header"),
])
def test_pgm_errors(tmp_path, payload, match):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(PGMError, match=match):
        read_pgm_bytes(p)


def test_pgm_comment_in_header(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert read_pgm_bytes(p).tolist() == [[0, 255]]


# -- datasets -------------------------------------------------------------------------

def test_gen_dataset_empty(tmp_path):
    assert gen_dataset(tmp_path, 0, SceneSpec(), 0) == []
    assert (tmp_path / "index.tsv").read_text() == ""
    assert sorted(p.name for p in tmp_path.iterdir()) == ["index.tsv"]


def test_gen_dataset_layout_and_regeneration(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    rows = gen_dataset(a, 3, SceneSpec(), 10)
    gen_dataset(b, 3, SceneSpec(), 10)
    assert rows[1] == ("img_00001.pgm", "msk_00001.pgm", "edg_00001.pgm")
    assert read_manifest(a) == rows
    assert (a / "index.tsv").read_text().splitlines()[0] == "img_00000.pgm\tmsk_00000.pgm\tedg_00000.pgm"
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()
    assert dataset_hash(a) == dataset_hash(b)


def test_per_sample_seed_is_additive(tmp_path):
    gen_dataset(tmp_path, 3, SceneSpec(), 10)
    ex = load_dataset(tmp_path)
    direct = gen_scene(SceneSpec(seed=12))
    assert np.array_equal(ex[2].mask, direct.mask)
    assert np.max(np.abs(ex[2].image - direct.image)) <= 0.5 / 255 + 1e-12


def test_edge_files_match_masks(tmp_path):
    gen_dataset(tmp_path, 5, SceneSpec(), 0)
    for _, msk, edg in read_manifest(tmp_path):
        assert np.array_equal(read_mask(tmp_path / edg), edge_gt_from_mask(read_mask(tmp_path / msk)))


def test_gen_dataset_reports_path_on_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        gen_dataset(blocker / "sub", 1, SceneSpec(), 0)
