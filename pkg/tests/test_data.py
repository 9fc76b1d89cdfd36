import io
import itertools
import statistics

import numpy as np
import pytest
from PIL import Image

from gcgan.data import (
    Augment,
    DatasetError,
    ImageDecodeError,
    UnpairedDataset,
    all_pairs,
    load_unpaired,
    pairwise_distances,
    precompute_distance_stats,
    preprocess,
    sample_pairs,
    to_uint8,
)
from gcgan.losses import SIGMA_FLOOR, DistanceStats, standardized


def write_images(directory, n, size=8, seed=0, mode="RGB"):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        shape = (size, size, 3) if mode == "RGB" else (size, size)
        Image.fromarray(rng.integers(0, 256, shape, dtype=np.uint8), mode).save(directory / f"img_{i:03d}.png")
    return directory


def png_bytes(arr, mode="RGB"):
    buf = io.BytesIO()
    Image.fromarray(arr, mode).save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def folders(tmp_path):
    return write_images(tmp_path / "x", 2, seed=1), write_images(tmp_path / "y", 3, seed=2)


def test_sizes(folders):
    ds = load_unpaired(*folders, resolution=8)
    assert ds.sizes == (2, 3)
    assert len(ds) == 2


def test_lexicographic_order(tmp_path):
    d = tmp_path / "x"
    d.mkdir()
    for name in ("b.png", "a.png", "c.jpg", "notes.txt"):
        if name.endswith(".txt"):
            (d / name).write_text("skip me")
        else:
            Image.new("RGB", (4, 4)).save(d / name)
    ds = load_unpaired(d, d, resolution=4)
    assert [p.name for p in ds.files_x] == ["a.png", "b.png", "c.jpg"]


def test_same_seed_same_pairing(folders):
    a = load_unpaired(*folders, resolution=8, seed=5)
    b = load_unpaired(*folders, resolution=8, seed=5)
    for epoch in range(3):
        assert a.epoch_order(epoch) == b.epoch_order(epoch)
        for ba, bb in zip(a.batches(epoch), b.batches(epoch)):
            assert ba.x.tobytes() == bb.x.tobytes() and ba.y.tobytes() == bb.y.tobytes()


def test_empty_directory(tmp_path, folders):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="no images"):
        load_unpaired(folders[0], tmp_path / "empty")
    with pytest.raises(DatasetError):
        load_unpaired(folders[0], tmp_path / "missing")


def test_unreadable_file_is_named(tmp_path):
    d = write_images(tmp_path / "x", 1)
    (d / "broken.png").write_bytes(b"not a png")
    ds = load_unpaired(d, d, resolution=8)
    with pytest.raises(ImageDecodeError, match="broken.png"):
        list(ds.batches(0))


@pytest.mark.parametrize("value, expected", [(255, 1.0), (0, -1.0), (128, 2 * 128 / 255 - 1)])
def test_pixel_mapping(value, expected):
    arr = preprocess(png_bytes(np.full((2, 2, 3), value, np.uint8)), 2)
    assert arr.shape == (3, 2, 2)
    assert arr.dtype == np.float32
    np.testing.assert_allclose(arr, expected, atol=1e-7)


def test_pixel_128_value():
    arr = preprocess(png_bytes(np.full((2, 2, 3), 128, np.uint8)), 2)
    assert abs(arr[0, 0, 0] - 0.00392) < 1e-5


def test_grayscale_is_replicated():
    gray = np.arange(16, dtype=np.uint8).reshape(4, 4) * 16
    arr = preprocess(png_bytes(gray, "L"), 4)
    assert arr.shape == (3, 4, 4)
    np.testing.assert_array_equal(arr[0], arr[1])
    np.testing.assert_array_equal(arr[0], arr[2])
    np.testing.assert_allclose(arr[0], gray / 255 * 2 - 1, atol=1e-6)


def test_single_channel_mode():
    arr = preprocess(png_bytes(np.zeros((4, 4, 3), np.uint8)), 4, channels=1)
    assert arr.shape == (1, 4, 4)


def test_decode_error():
    with pytest.raises(ImageDecodeError):
        preprocess(b"garbage", 8)


def test_preprocess_is_deterministic_without_augmentation():
    data = png_bytes(np.random.default_rng(0).integers(0, 256, (10, 12, 3), dtype=np.uint8))
    assert preprocess(data, 8).tobytes() == preprocess(data, 8).tobytes()


def test_augmentation_crop_and_flip():
    data = png_bytes(np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8))
    aug = Augment(load_size=12, crop=True, hflip=True)
    a = preprocess(data, 8, aug, np.random.default_rng(3))
    b = preprocess(data, 8, aug, np.random.default_rng(3))
    assert a.shape == (3, 8, 8)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        preprocess(data, 8, aug, None)


def test_uint8_round_trip():
    v = np.arange(256, dtype=np.uint8)
    arr = preprocess(png_bytes(np.stack([v.reshape(16, 16)] * 3, -1)), 16)
    np.testing.assert_array_equal(to_uint8(arr)[..., 0], v.reshape(16, 16))


def test_epoch_visits_every_x_once(tmp_path):
    dx = write_images(tmp_path / "x", 7)
    dy = write_images(tmp_path / "y", 3, seed=1)
    ds = load_unpaired(dx, dy, resolution=8, seed=2)
    for epoch in range(4):
        order = ds.epoch_order(epoch)
        assert sorted(i for i, _ in order) == list(range(7))
        ys = [j for _, j in order]
        # y partners are consecutive reshuffles: each block of 3 is a permutation
        assert sorted(ys[:3]) == [0, 1, 2] and sorted(ys[3:6]) == [0, 1, 2]
    assert ds.epoch_order(0) != ds.epoch_order(1)


def test_batches_cover_epoch_and_attach_next(tmp_path):
    dx = write_images(tmp_path / "x", 5)
    ds = load_unpaired(dx, dx, resolution=8, seed=0)
    batches = list(ds.batches(0, batch_size=2, with_next=True))
    assert [len(b.x_index) for b in batches] == [2, 2, 1]
    order = [i for i, _ in ds.epoch_order(0)]
    flat = [i for b in batches for i in b.x_index]
    assert flat == order
    # x_next of the last item wraps to the first
    np.testing.assert_array_equal(batches[-1].x_next[0], ds.load("x", order[0]))
    np.testing.assert_array_equal(batches[0].x_next[0], ds.load("x", order[1]))


def test_workers_preserve_order(tmp_path):
    dx = write_images(tmp_path / "x", 9)
    dy = write_images(tmp_path / "y", 4, seed=3)
    aug = Augment.standard(10)
    single = UnpairedDataset(sorted(dx.iterdir()), sorted(dy.iterdir()), 8, seed=1, augment=aug)
    multi = UnpairedDataset(sorted(dx.iterdir()), sorted(dy.iterdir()), 8, seed=1, augment=aug, workers=3)
    for a, b in itertools.zip_longest(single.batches(0, 2, True), multi.batches(0, 2, True)):
        assert a.x_index == b.x_index
        assert a.x.tobytes() == b.x.tobytes()
        assert a.y.tobytes() == b.y.tobytes()
        assert a.x_next.tobytes() == b.x_next.tobytes()


# -- distance statistics ---------------------------------------------------

def brute_force_stats(images):
    ds = []
    for a, b in itertools.combinations(range(len(images)), 2):
        diffs = [abs(float(p) - float(q)) for p, q in zip(images[a].flat, images[b].flat)]
        ds.append(sum(diffs) / len(diffs))
    return statistics.fmean(ds), statistics.pstdev(ds)


def test_three_image_stats():
    imgs = np.array([0.0, 1.0, 3.0]).reshape(3, 1, 1, 1)
    stats = precompute_distance_stats((imgs, imgs))
    assert stats.mu_x == pytest.approx(2.0, abs=1e-12)
    assert stats.sigma_x == pytest.approx(statistics.pstdev([1, 2, 3]), abs=1e-12)
    assert sorted(pairwise_distances(imgs, all_pairs(3))) == [1.0, 2.0, 3.0]


def test_identical_images_hit_floor():
    imgs = np.ones((2, 3, 4, 4))
    stats = precompute_distance_stats((imgs, imgs))
    assert stats.mu_x == 0.0
    assert stats.sigma_x == SIGMA_FLOOR


def test_one_image_is_rejected(tmp_path):
    d = write_images(tmp_path / "x", 1)
    with pytest.raises(DatasetError, match="at least 2"):
        precompute_distance_stats(load_unpaired(d, d, resolution=8))
    with pytest.raises(DatasetError):
        precompute_distance_stats((np.zeros((1, 3, 2, 2)), np.zeros((3, 3, 2, 2))))


def test_exhaustive_stats_match_oracle(tmp_path):
    dx = write_images(tmp_path / "x", 10, size=6, seed=4)
    dy = write_images(tmp_path / "y", 6, size=6, seed=5)
    ds = load_unpaired(dx, dy, resolution=6)
    stats = precompute_distance_stats(ds)
    mu_x, sd_x = brute_force_stats(ds.domain_arrays("x"))
    mu_y, sd_y = brute_force_stats(ds.domain_arrays("y"))
    assert abs(stats.mu_x - mu_x) < 1e-9 and abs(stats.sigma_x - sd_x) < 1e-9
    assert abs(stats.mu_y - mu_y) < 1e-9 and abs(stats.sigma_y - sd_y) < 1e-9


def test_sampled_stats_converge():
    imgs = np.random.default_rng(0).uniform(-1, 1, (50, 3, 4, 4)) ** 3
    exact = pairwise_distances(imgs, all_pairs(50))
    sampled = pairwise_distances(imgs, sample_pairs(50, 10000, np.random.default_rng(1)))
    assert abs(sampled.mean() / exact.mean() - 1) < 0.02
    assert abs(sampled.std() / exact.std() - 1) < 0.02


def test_max_pairs_switches_to_sampling():
    imgs = np.random.default_rng(0).uniform(-1, 1, (20, 1, 2, 2))
    a = precompute_distance_stats((imgs, imgs), max_pairs=50, seed=3)
    b = precompute_distance_stats((imgs, imgs), max_pairs=50, seed=3)
    full = precompute_distance_stats((imgs, imgs), max_pairs=None)
    assert a == b
    assert a.mu_x != full.mu_x


def test_sample_pairs_are_distinct():
    p = sample_pairs(5, 2000, np.random.default_rng(0))
    assert (p[:, 0] != p[:, 1]).all()
    assert p.min() >= 0 and p.max() <= 4


def test_standardized_distances_have_zero_mean_unit_std():
    imgs = np.random.default_rng(2).uniform(-1, 1, (12, 3, 4, 4))
    stats = precompute_distance_stats((imgs, imgs))
    phi = standardized(pairwise_distances(imgs, all_pairs(12)), stats.mu_x, stats.sigma_x)
    assert abs(phi.mean()) < 1e-6
    assert abs(phi.std() - 1) < 1e-6


def test_stats_file_round_trip(tmp_path):
    stats = DistanceStats(0.1234567890123, 1e-6, 2.5, 0.333)
    stats.save(tmp_path / "s.txt")
    assert DistanceStats.load(tmp_path / "s.txt") == stats
    text = (tmp_path / "s.txt").read_text()
    assert "mu_x = " in text and "sigma_y = " in text
    (tmp_path / "bad.txt").write_text("mu_x = 1\n")
    with pytest.raises(ValueError):
        DistanceStats.load(tmp_path / "bad.txt")
