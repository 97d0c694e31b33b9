"""Dataset generation, IDX/CSV ingestion, split construction."""

import os
import struct

import numpy as np
import pytest

from ifmatch import datahub
from ifmatch.errors import DataError


class TestGenSynthetic:
    def test_deterministic_per_seed(self):
        a = datahub.gen_synthetic(3, 10, 8, 0.5, seed=11, test_per_class=4)
        b = datahub.gen_synthetic(3, 10, 8, 0.5, seed=11, test_per_class=4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.test_images, b.test_images)
        c = datahub.gen_synthetic(3, 10, 8, 0.5, seed=12, test_per_class=4)
        assert not np.array_equal(a.images, c.images)

    def test_exact_class_marginals(self):
        src = datahub.gen_synthetic(5, 17, 8, 0.3, seed=0, test_per_class=6)
        counts = np.bincount(src.labels, minlength=5)
        assert list(counts) == [17] * 5
        assert list(np.bincount(src.test_labels, minlength=5)) == [6] * 5

    def test_pixel_range(self):
        src = datahub.gen_synthetic(3, 8, 8, 1.0, seed=1, test_per_class=2)
        assert src.images.min() >= 0.0 and src.images.max() <= 1.0

    def test_difficulty_zero_linear_probe(self):
        # one closed-form least-squares fit on pixels reaches > 95% test accuracy
        src = datahub.gen_synthetic(4, 40, 10, 0.0, seed=3, test_per_class=30)
        x = src.images.reshape(src.images.shape[0], -1)
        x = np.hstack([x, np.ones((x.shape[0], 1))])
        y = np.zeros((x.shape[0], 4))
        y[np.arange(x.shape[0]), src.labels] = 1.0
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        xt = src.test_images.reshape(src.test_images.shape[0], -1)
        xt = np.hstack([xt, np.ones((xt.shape[0], 1))])
        pred = (xt @ w).argmax(axis=1)
        assert (pred == src.test_labels).mean() > 0.95

    def test_degenerate_size_rejected(self):
        with pytest.raises(DataError):
            datahub.gen_synthetic(3, 5, 2, 0.1, seed=0)

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            datahub.gen_synthetic(1, 5, 8, 0.1, seed=0)


class TestSplitBalanced:
    @pytest.fixture
    def source(self):
        return datahub.gen_synthetic(4, 30, 8, 0.2, seed=5, test_per_class=5)

    def test_forty_over_ten_classes(self):
        src = datahub.gen_synthetic(10, 12, 8, 0.2, seed=1, test_per_class=2)
        split = datahub.split_balanced(src, 40, seed=0)
        counts = np.bincount(split.labeled_classes, minlength=10)
        assert list(counts) == [4] * 10

    def test_all_labeled_empty_unlabeled(self, source):
        split = datahub.split_balanced(source, 120, seed=0)
        assert split.unlabeled_ids.size == 0
        assert split.labeled_ids.size == 120

    def test_indivisible_rejected(self, source):
        with pytest.raises(DataError, match="divisible"):
            datahub.split_balanced(source, 42, seed=0)

    def test_insufficient_rejected(self, source):
        with pytest.raises(DataError):
            datahub.split_balanced(source, 124, seed=0)

    def test_id_disjointness(self, source):
        split = datahub.split_balanced(source, 40, seed=2)
        lab = set(split.labeled_ids.tolist())
        unl = set(split.unlabeled_ids.tolist())
        tst = set(split.test_ids.tolist())
        assert not (lab & unl) and not (lab & tst) and not (unl & tst)

    def test_split_deterministic(self, source):
        a = datahub.split_balanced(source, 40, seed=9)
        b = datahub.split_balanced(source, 40, seed=9)
        assert np.array_equal(a.labeled_ids, b.labeled_ids)
        assert np.array_equal(a.unlabeled_ids, b.unlabeled_ids)

    def test_optional_inclusion_of_labeled(self, source):
        split = datahub.split_balanced(source, 40, seed=2, include_labeled_in_unlabeled=True)
        assert split.unlabeled_ids.size == 120

    def test_unlabeled_true_classes_kept_for_diagnostics(self, source):
        split = datahub.split_balanced(source, 40, seed=2)
        assert split.unlabeled_true.shape == split.unlabeled_ids.shape


class TestSplitLongtail:
    def test_paper_constant_profiles(self):
        cfg = datahub.LongTailConfig(n1=1500, m1=3000, gamma=100, num_classes=10)
        counts = cfg.labeled_counts()
        assert counts[0] == 1500
        assert counts[-1] == 15
        cfg = datahub.LongTailConfig(n1=1500, m1=3000, gamma=150, num_classes=10)
        assert cfg.labeled_counts()[-1] == 10

    def test_formula_exact_over_random_gammas(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            gamma = float(rng.uniform(1, 200))
            c = int(rng.integers(2, 12))
            n1 = int(rng.integers(c, 2000))
            try:
                cfg = datahub.LongTailConfig(n1=n1, m1=n1, gamma=gamma, num_classes=c)
                counts = cfg.labeled_counts()
            except DataError:
                continue
            for i, n in enumerate(counts, start=1):
                assert n == int(n1 * gamma ** (-(i - 1) / (c - 1)))

    def test_gamma_one_balanced(self):
        cfg = datahub.LongTailConfig(n1=50, m1=100, gamma=1.0, num_classes=6)
        assert cfg.labeled_counts() == [50] * 6
        assert cfg.unlabeled_counts() == [100] * 6

    def test_split_counts_match_profile(self):
        src = datahub.gen_synthetic(4, 80, 8, 0.2, seed=7, test_per_class=5)
        cfg = datahub.LongTailConfig(n1=40, m1=30, gamma=8, num_classes=4)
        split = datahub.split_longtail(src, cfg, seed=3)
        lab = np.bincount(split.labeled_classes, minlength=4)
        unl = np.bincount(split.unlabeled_true, minlength=4)
        assert list(lab) == cfg.labeled_counts()
        assert list(unl) == cfg.unlabeled_counts()

    def test_insufficiency_names_class(self):
        src = datahub.gen_synthetic(4, 20, 8, 0.2, seed=7, test_per_class=5)
        cfg = datahub.LongTailConfig(n1=18, m1=10, gamma=2, num_classes=4)
        with pytest.raises(DataError, match="class 0"):
            datahub.split_longtail(src, cfg, seed=3)

    def test_vanishing_tail_rejected(self):
        with pytest.raises(DataError):
            datahub.LongTailConfig(n1=5, m1=5, gamma=100, num_classes=10).labeled_counts()


def write_idx_fixture(tmp_path):
    """Two 2x2 images with known bytes."""
    images = tmp_path / "imgs.idx"
    labels = tmp_path / "lbls.idx"
    pixels = [0, 51, 102, 153, 204, 255, 0, 128]
    with open(images, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, 2, 2, 2))
        fh.write(bytes(pixels))
    with open(labels, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 2))
        fh.write(bytes([3, 7]))
    return str(images), str(labels)


class TestLoadIdx:
    def test_exact_values(self, tmp_path):
        images, labels = write_idx_fixture(tmp_path)
        imgs, lbls = datahub.load_idx(images, labels)
        assert imgs.shape == (2, 1, 2, 2)
        expected = np.array([0, 51, 102, 153, 204, 255, 0, 128]).reshape(2, 1, 2, 2) / 255.0
        assert np.array_equal(imgs, expected)
        assert list(lbls) == [3, 7]

    def test_wrong_magic_names_values(self, tmp_path):
        images, labels = write_idx_fixture(tmp_path)
        with open(images, "r+b") as fh:
            fh.write(struct.pack(">I", 0x00000807))
        with pytest.raises(DataError, match="0x00000803.*0x00000807"):
            datahub.load_idx(images, labels)

    def test_truncated_file(self, tmp_path):
        images, labels = write_idx_fixture(tmp_path)
        with open(images, "r+b") as fh:
            fh.truncate(18)
        with pytest.raises(DataError, match="truncated"):
            datahub.load_idx(images, labels)

    def test_count_mismatch(self, tmp_path):
        images, labels = write_idx_fixture(tmp_path)
        with open(labels, "wb") as fh:
            fh.write(struct.pack(">II", 0x00000801, 1))
            fh.write(bytes([3]))
        with pytest.raises(DataError, match="mismatch"):
            datahub.load_idx(images, labels)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            datahub.load_idx(str(tmp_path / "nope.idx"), str(tmp_path / "nope2.idx"))


class TestLoadCsv:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "data.csv"
        header = "id,class," + ",".join(f"p{i}" for i in range(4))
        rows = ["0,1,0.0,0.25,0.5,0.75", "1,0,1.0,0.9,0.8,0.7"]
        path.write_text(header + "\n" + "\n".join(rows) + "\n")
        ids, labels, imgs = datahub.load_csv(str(path), 1, 2, 2)
        assert list(ids) == [0, 1]
        assert list(labels) == [1, 0]
        assert imgs.shape == (2, 1, 2, 2)
        assert imgs[0, 0, 0, 1] == 0.25

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("foo,bar\n")
        with pytest.raises(DataError, match="header"):
            datahub.load_csv(str(path), 1, 2, 2)

    def test_short_row_line_number(self, tmp_path):
        path = tmp_path / "short.csv"
        header = "id,class," + ",".join(f"p{i}" for i in range(4))
        path.write_text(header + "\n0,1,0.5\n")
        with pytest.raises(DataError, match=":2"):
            datahub.load_csv(str(path), 1, 2, 2)


class TestManifest:
    def test_roles_and_classes(self, tmp_path):
        src = datahub.gen_synthetic(3, 9, 8, 0.2, seed=1, test_per_class=2)
        split = datahub.split_balanced(src, 9, seed=1)
        path = tmp_path / "manifest.csv"
        datahub.write_manifest(split, str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "id,role,class"
        roles = [ln.split(",")[1] for ln in lines[1:]]
        assert roles.count("labeled") == 9
        assert roles.count("unlabeled") == 18
        assert roles.count("test") == 6
        for ln in lines[1:]:
            sid, role, cls = ln.split(",")
            if role == "unlabeled":
                assert cls == ""
            else:
                assert cls != ""
