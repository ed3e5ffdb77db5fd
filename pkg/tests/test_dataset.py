import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from svirisk.dataset import (
    IMAGENET_MEAN, IMAGENET_STD, ManifestDataset, ManifestEntry, SplitSpec, build_manifest, crop_offsets,
    denormalize, normalize, preprocess_eval, preprocess_train, read_manifest, split_manifest, split_sizes,
    tuning_subsets, write_manifest,
)
from svirisk.errors import ValidationError
from svirisk.fixtures import synthetic_registry

# (1 - mean) / std evaluated by hand, channel by channel, to 6 decimals:
# (1 - 0.485) / 0.229 = 2.248908, (1 - 0.456) / 0.224 = 2.428571, (1 - 0.406) / 0.225 = 2.640000
WHITE_NORMALIZED = (2.248908, 2.428571, 2.640000)


def entries(n, labels=4):
    return [ManifestEntry(f"img/{i}.jpg", i % labels, f"BU{i % 50:08d}", 52.0, 5.0) for i in range(n)]


def split_oracle(n, val=0.15, test=0.15):
    n_val, n_test = int(n * val // 1), int(n * test // 1)
    return n - n_val - n_test, n_val, n_test


class TestManifest:
    def test_full_scale_counts(self):
        recs = synthetic_registry({0: 2500, 1: 2500, 2: 833, 3: 119}, seed=2)
        per = {0: 1, 1: 1, 2: 3, 3: 20}
        log = []
        for r in recs:
            for s in range(per[r.risk_class]):
                log.append({"code": r.code, "status": "fetched", "image_path": f"{r.code}/{s}.jpg",
                            "lat": 52.0, "lon": 5.0, "capture_date": "2019-06"})
        log.append({"code": "BU_skip", "status": "probe_absent"})
        m = build_manifest(log, recs)
        assert len(m) == 9879
        assert m.class_counts == {0: 2500, 1: 2500, 2: 2499, 3: 2380}
        assert all(e.capture_month == 6 for e in m.entries)

    def test_empty(self):
        m = build_manifest([], synthetic_registry({0: 1, 1: 0, 2: 0, 3: 0}))
        assert len(m) == 0 and m.class_counts == {0: 0, 1: 0, 2: 0, 3: 0}

    def test_unknown_code(self):
        with pytest.raises(ValidationError, match="BU_nope"):
            build_manifest([{"code": "BU_nope", "status": "fetched", "image_path": "x", "lat": 0, "lon": 0}], [])

    def test_roundtrip(self, tmp_path):
        es = split_manifest(entries(20))
        write_manifest(es, tmp_path / "m.jsonl", meta={"h": 1})
        assert read_manifest(tmp_path / "m.jsonl") == es


class TestSplit:
    def test_default_fractions(self):
        assert split_sizes(100, SplitSpec()) == (70, 15, 15)

    def test_full_scale_sizes(self):
        assert split_sizes(9879, SplitSpec()) == (6917, 1481, 1481)
        out = split_manifest(entries(9879))
        counts = {s: sum(e.split == s for e in out) for s in ("train", "val", "test")}
        assert counts == {"train": 6917, "val": 1481, "test": 1481}

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 3000))
    def test_sizes_match_floor_oracle(self, n):
        assert split_sizes(n, SplitSpec()) == split_oracle(n)

    def test_partition_and_determinism(self):
        es = entries(500)
        a, b = split_manifest(es, SplitSpec(seed=3)), split_manifest(es, SplitSpec(seed=3))
        assert [e.split for e in a] == [e.split for e in b]
        assert all(e.split in ("train", "val", "test") for e in a)
        by_path = {}
        for e in a:
            by_path.setdefault(e.image_path, set()).add(e.split)
        assert all(len(v) == 1 for v in by_path.values())
        c = split_manifest(es, SplitSpec(seed=4))
        assert [e.split for e in a] != [e.split for e in c]

    def test_stratified(self):
        out = split_manifest(entries(400), SplitSpec(stratify=True))
        for label in range(4):
            got = [e.split for e in out if e.label == label]
            assert (got.count("train"), got.count("val"), got.count("test")) == (70, 15, 15)

    def test_by_neighborhood(self):
        out = split_manifest(entries(500), SplitSpec(by_neighborhood=True))
        for code in {e.code for e in out}:
            assert len({e.split for e in out if e.code == code}) == 1

    def test_invalid_fractions(self):
        with pytest.raises(ValidationError):
            SplitSpec(0.7, 0.2, 0.2)

    def test_tuning_subsets(self):
        tr, va = tuning_subsets(entries(1000), seed=0)
        assert (len(tr), len(va)) == (300, 100)
        assert not {e.image_path for e in tr} & {e.image_path for e in va}


class TestPreprocessing:
    def test_mean_image_is_zero(self):
        img = np.broadcast_to(np.array(IMAGENET_MEAN), (512, 512, 3)).copy()
        out = preprocess_train(img, np.random.default_rng(0))
        assert out.shape == (3, 224, 224)
        assert np.abs(out).max() < 1e-6

    def test_white_image(self):
        out = preprocess_train(np.ones((512, 512, 3)), np.random.default_rng(0))
        for c in range(3):
            assert np.allclose(out[c], WHITE_NORMALIZED[c], atol=1e-3)
        # same numbers from 8-bit input
        out8 = preprocess_eval(np.full((512, 512, 3), 255, np.uint8))
        assert np.allclose(out8.reshape(3, -1).mean(1), WHITE_NORMALIZED, atol=1e-3)

    def test_crop_offsets(self):
        a = [crop_offsets(np.random.default_rng(7)) for _ in range(3)]
        assert a[0] == a[1] == a[2]
        rng = np.random.default_rng(0)
        offs = np.array([crop_offsets(rng) for _ in range(10000)])
        assert offs.min() >= 0 and offs.max() <= 288
        for axis in range(2):
            hits = np.bincount(offs[:, axis] // 32, minlength=10)
            assert np.all(hits[:10] > 0)

    def test_crop_matches_offsets(self):
        rng = np.random.default_rng(5)
        img = rng.random((512, 512, 3))
        top, left = crop_offsets(np.random.default_rng(11))
        out = preprocess_train(img, np.random.default_rng(11))
        ref = normalize(img[top:top + 224, left:left + 224].transpose(2, 0, 1))
        assert np.allclose(out, ref, atol=1e-6)

    def test_train_shape_checked(self):
        with pytest.raises(ValidationError):
            preprocess_train(np.zeros((256, 256, 3)), np.random.default_rng(0))
        with pytest.raises(ValidationError):
            preprocess_eval(np.zeros((64, 64, 4)))

    def test_eval_constant(self):
        out = preprocess_eval(np.full((512, 512, 3), 0.3))
        expected = (0.3 - np.array(IMAGENET_MEAN)) / np.array(IMAGENET_STD)
        assert np.allclose(out.reshape(3, -1), expected[:, None], atol=1e-5)

    def test_eval_identity_at_224(self):
        img = np.random.default_rng(0).random((224, 224, 3))
        out = preprocess_eval(img)
        assert np.abs(denormalize(out) - img.transpose(2, 0, 1)).max() < 1e-6

    def test_checkerboard_mean(self):
        board = ((np.indices((448, 448)).sum(0) % 2)[..., None] * np.ones(3)).astype(float)
        out = denormalize(preprocess_eval(board))
        assert abs(out.mean() - board.mean()) < 1e-2

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_denormalize_roundtrip(self, r, g, b):
        x = np.array([r, g, b])[:, None, None] * np.ones((3, 4, 4))
        assert np.abs(denormalize(normalize(x)) - x).max() < 1e-6


class TestTorchDataset:
    def test_loading_and_epoch_crops(self, tmp_path):
        rng = np.random.default_rng(0)
        es = []
        for i in range(3):
            Image.fromarray(rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)).save(tmp_path / f"{i}.png")
            es.append(ManifestEntry(f"{i}.png", i, "c", 0, 0))
        ds = ManifestDataset(es, tmp_path, train=True, seed=1)
        x0, y = ds[1]
        assert x0.shape == (3, 224, 224) and x0.dtype == torch.float32 and y == 1
        assert torch.equal(ds[1][0], x0)
        ds.set_epoch(1)
        assert not torch.equal(ds[1][0], x0)
        ev = ManifestDataset(es, tmp_path)
        assert torch.equal(ev[2][0], ev[2][0])
