import os
import threading

import numpy as np
import pytest

import medvox as mv
from medvox.pipeline import Step


@pytest.fixture
def corpus(tmp_path):
    """Four small image/label pairs on disk, returned as dict descriptors."""
    items = []
    for i in range(4):
        img, lbl = mv.synth_volume(mv.Rng(100 + i), (12, 12, 12), 2, 0.1)
        ip, lp = str(tmp_path / f"img{i}.nii"), str(tmp_path / f"lbl{i}.nii")
        mv.nifti_save(img, ip)
        mv.nifti_save(lbl, lp)
        items.append({"image": ip, "label": lp})
    return mv.DataSource(items)


def make_pipeline(seed=11):
    return mv.Pipeline([
        Step("normalize_intensity", keys=["image"]),
        Step("crop_pad", {"start": (1, 1, 1), "size": (10, 10, 10)}),
        Step("rand_flip", {"axes": [0, 1], "prob": 0.5}),
        Step("rand_gaussian_noise", {"sigma": 0.05}, keys=["image"]),
    ], base_seed=seed)


class TestDataset:
    def test_len_and_index_error(self, corpus):
        ds = mv.Dataset(corpus, make_pipeline())
        assert len(ds) == 4
        with pytest.raises(IndexError):
            ds.get(4)
        with pytest.raises(IndexError):
            corpus[-1]

    def test_deterministic_per_epoch(self, corpus):
        ds = mv.Dataset(corpus, make_pipeline())
        a = ds.get(1, epoch=3)
        b = ds.get(1, epoch=3)
        assert np.array_equal(a["image"].data, b["image"].data)

    def test_epochs_vary(self, corpus):
        ds = mv.Dataset(corpus, make_pipeline())
        a = ds.get(0, epoch=0)
        b = ds.get(0, epoch=1)
        assert not np.array_equal(a["image"].data, b["image"].data)

    def test_execution_counters(self, corpus):
        ds = mv.Dataset(corpus, make_pipeline())
        for epoch in range(3):
            for i in range(4):
                ds.get(i, epoch)
        assert ds.prefix_executions == 12
        assert ds.suffix_executions == 12

    def test_no_suffix_counter_without_random_steps(self, corpus):
        p = mv.Pipeline([Step("normalize_intensity", keys=["image"])], base_seed=0)
        ds = mv.Dataset(corpus, p)
        ds.get(0)
        assert ds.suffix_executions == 0


class TestCacheDataset:
    def test_prefix_computed_once(self, corpus):
        ds = mv.CacheDataset(corpus, make_pipeline())
        for epoch in range(3):
            for i in range(4):
                ds.get(i, epoch)
        assert ds.prefix_executions == 4
        assert ds.suffix_executions == 12

    def test_bitwise_transparent(self, corpus):
        plain = mv.Dataset(corpus, make_pipeline(seed=21))
        cached = mv.CacheDataset(corpus, make_pipeline(seed=21))
        for epoch in range(2):
            for i in range(4):
                a, b = plain.get(i, epoch), cached.get(i, epoch)
                assert np.array_equal(a["image"].data, b["image"].data)
                assert np.array_equal(a["label"].data, b["label"].data)
                assert a["image"].applied == b["image"].applied

    def test_cache_rate_zero_behaves_plain(self, corpus):
        ds = mv.CacheDataset(corpus, make_pipeline(), cache_rate=0.0)
        for _ in range(2):
            for i in range(4):
                ds.get(i)
        assert ds.cache_limit == 0
        assert ds.prefix_executions == 8

    def test_cache_rate_half(self, corpus):
        ds = mv.CacheDataset(corpus, make_pipeline(), cache_rate=0.5)
        for _ in range(3):
            for i in range(4):
                ds.get(i)
        # indices 0 and 1 cached once each; 2 and 3 recomputed each round
        assert ds.prefix_executions == 2 + 2 * 3

    def test_bad_cache_rate(self, corpus):
        with pytest.raises(ValueError):
            mv.CacheDataset(corpus, make_pipeline(), cache_rate=1.5)

    def test_concurrent_access_single_flight(self, corpus):
        ds = mv.CacheDataset(corpus, make_pipeline())
        results = [None] * 8
        def worker(slot):
            results[slot] = ds.get(0, epoch=0)
        threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert ds.prefix_executions == 1
        for r in results[1:]:
            assert np.array_equal(r["image"].data, results[0]["image"].data)


class TestPersistentDataset:
    def test_cold_then_warm(self, corpus, tmp_path):
        cache = str(tmp_path / "cache")
        ds = mv.PersistentDataset(corpus, make_pipeline(seed=31), cache_dir=cache)
        for i in range(4):
            ds.get(i)
        assert ds.prefix_executions == 4
        warm = mv.PersistentDataset(corpus, make_pipeline(seed=31), cache_dir=cache)
        for i in range(4):
            warm.get(i)
        assert warm.prefix_executions == 0
        entries = [f for f in os.listdir(cache) if f.endswith(".mvold")]
        assert len(entries) == 4
        assert all(len(f.split(".")[0]) == 64 for f in entries)

    def test_bitwise_matches_plain(self, corpus, tmp_path):
        plain = mv.Dataset(corpus, make_pipeline(seed=41))
        ds = mv.PersistentDataset(corpus, make_pipeline(seed=41),
                                  cache_dir=str(tmp_path / "c"))
        for i in range(4):
            ds.get(i, 1)   # populate
        for i in range(4):
            a, b = plain.get(i, epoch=2), ds.get(i, epoch=2)
            assert np.array_equal(a["image"].data, b["image"].data)
            assert a["image"].meta == b["image"].meta

    def test_corrupt_entry_recomputed(self, corpus, tmp_path):
        cache = str(tmp_path / "c")
        ds = mv.PersistentDataset(corpus, make_pipeline(), cache_dir=cache)
        good = ds.get(0)
        path = ds._entry_path(0)
        with open(path, "r+b") as f:
            f.write(b"GARBAGE!")
        again = ds.get(0)
        assert ds.corrupt_warnings == 1
        assert np.array_equal(again["image"].data, good["image"].data)
        # entry was rewritten; a further read is clean
        ds.get(0)
        assert ds.corrupt_warnings == 1


class TestCacheKey:
    def test_prefix_sensitivity(self, corpus):
        d = corpus[0]
        base = cache_change = make_pipeline()
        k0 = mv.cache_key(d, base)
        # changing a prefix step changes the key
        p2 = mv.Pipeline([Step("normalize_intensity", keys=["image"]),
                          Step("crop_pad", {"start": (0, 0, 0), "size": (10, 10, 10)}),
                          Step("rand_flip", {"axes": [0, 1], "prob": 0.5}),
                          Step("rand_gaussian_noise", {"sigma": 0.05}, keys=["image"])],
                         base_seed=11)
        assert mv.cache_key(d, p2) != k0
        # changing only the random suffix does not
        p3 = mv.Pipeline(base.steps[:2] + [Step("rand_flip", {"axes": [2], "prob": 0.9})],
                         base_seed=999)
        assert mv.cache_key(d, p3) == k0
        # different descriptor, different key
        assert mv.cache_key(corpus[1], base) != k0

    def test_key_is_hex64(self, corpus):
        k = mv.cache_key(corpus[0], make_pipeline())
        assert len(k) == 64 and set(k) <= set("0123456789abcdef")
