"""Embedding file format, manifests, stratified split, synthetic generator."""

import json
import os
import struct

import numpy as np
import pytest

from ordmos import dataio, metrics


def bits(a):
    return np.asarray(a, dtype=np.float32).view(np.uint32)


# ------------------------------------------------------------ EMB1 format


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    m = rng.normal(size=(7, 16)).astype(np.float32)
    p = str(tmp_path / "a.emb")
    dataio.write_embedding(m, p)
    back = dataio.read_embedding(p)
    assert back.shape == (7, 16)
    assert back.dtype == np.float32
    assert np.array_equal(bits(m), bits(back))


def test_round_trip_special_finite_values(tmp_path):
    specials = np.array(
        [
            [0.0, -0.0, 1.0, -1.0],
            [np.finfo(np.float32).max, np.finfo(np.float32).tiny, 1e-45, -1e-45],
            [np.finfo(np.float32).smallest_subnormal, -np.finfo(np.float32).max, 0.1, 3.0],
        ],
        dtype=np.float32,
    )
    p = str(tmp_path / "s.emb")
    dataio.write_embedding(specials, p)
    assert np.array_equal(bits(specials), bits(dataio.read_embedding(p)))


def test_bad_magic(tmp_path):
    p = str(tmp_path / "bad.emb")
    payload = struct.pack("<4sII", b"NOPE", 1, 1) + struct.pack("<f", 1.0)
    with open(p, "wb") as f:
        f.write(payload)
    with pytest.raises(dataio.BadMagicError):
        dataio.read_embedding(p)


def test_truncated_header(tmp_path):
    p = str(tmp_path / "short.emb")
    with open(p, "wb") as f:
        f.write(b"EMB1\x01")
    with pytest.raises(dataio.TruncatedPayloadError):
        dataio.read_embedding(p)


def test_truncated_payload(tmp_path):
    p = str(tmp_path / "trunc.emb")
    with open(p, "wb") as f:
        f.write(struct.pack("<4sII", b"EMB1", 2, 3) + struct.pack("<f", 1.0) * 5)
    with pytest.raises(dataio.TruncatedPayloadError):
        dataio.read_embedding(p)


def test_zero_dimension_rejected(tmp_path):
    p = str(tmp_path / "zero.emb")
    with open(p, "wb") as f:
        f.write(struct.pack("<4sII", b"EMB1", 0, 4))
    with pytest.raises(dataio.DimensionOverflowError):
        dataio.read_embedding(p)


def test_huge_dimension_rejected(tmp_path):
    p = str(tmp_path / "huge.emb")
    with open(p, "wb") as f:
        f.write(struct.pack("<4sII", b"EMB1", 2**31, 2**20))
    with pytest.raises(dataio.DimensionOverflowError):
        dataio.read_embedding(p)


def test_trailing_bytes_rejected(tmp_path):
    p = str(tmp_path / "trail.emb")
    with open(p, "wb") as f:
        f.write(struct.pack("<4sII", b"EMB1", 1, 2) + struct.pack("<ff", 1.0, 2.0) + b"x")
    with pytest.raises(dataio.EmbeddingFormatError):
        dataio.read_embedding(p)


def test_format_errors_are_distinct_classes():
    assert issubclass(dataio.BadMagicError, dataio.EmbeddingFormatError)
    assert issubclass(dataio.TruncatedPayloadError, dataio.EmbeddingFormatError)
    assert issubclass(dataio.DimensionOverflowError, dataio.EmbeddingFormatError)
    assert not issubclass(dataio.BadMagicError, dataio.TruncatedPayloadError)
    assert not issubclass(dataio.TruncatedPayloadError, dataio.DimensionOverflowError)


def test_write_rejects_bad_shapes(tmp_path):
    p = str(tmp_path / "x.emb")
    with pytest.raises(ValueError):
        dataio.write_embedding(np.zeros((0, 4), dtype=np.float32), p)
    with pytest.raises(ValueError):
        dataio.write_embedding(np.zeros(4, dtype=np.float32), p)


# ------------------------------------------------------------ manifests


def small_dataset(seed=0, **kw):
    kw.setdefault("n_systems", 4)
    kw.setdefault("clips_per_system", 4)
    kw.setdefault("t_range", (3, 6))
    kw.setdefault("d_audio", 8)
    kw.setdefault("d_text", 5)
    return dataio.generate_synthetic(seed=seed, **kw)


def test_save_load_round_trip(tmp_path):
    ds, truth = small_dataset()
    manifest = dataio.save_dataset(ds, str(tmp_path), truth)
    back = dataio.load_manifest(manifest, split="train")
    assert back.split == "train"
    assert back.d_audio == ds.d_audio and back.d_text == ds.d_text
    assert len(back) == len(ds)
    orig = {r.clip_id: r for r in ds.records}
    for r in back.records:
        o = orig[r.clip_id]
        assert r.system_id == o.system_id
        assert r.mi_score == pytest.approx(o.mi_score)
        assert r.ta_score == pytest.approx(o.ta_score)
        assert np.array_equal(bits(r.audio), bits(o.audio))
        assert np.array_equal(bits(r.text), bits(o.text))
    sidecar = os.path.join(str(tmp_path), "synthetic_truth.json")
    with open(sidecar) as f:
        truth2 = dataio.SyntheticTruth.from_json(f.read())
    assert np.allclose(truth2.quality_dir, truth.quality_dir)
    assert truth2.system_latents == truth.system_latents


def write_manifest(tmp_path, rows):
    emb = np.ones((2, 3), dtype=np.float32)
    dataio.write_embedding(emb, str(tmp_path / "e.emb"))
    p = str(tmp_path / "manifest.jsonl")
    with open(p, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return p


def base_row(cid, **kw):
    row = {"clip_id": cid, "system_id": "s1", "audio": "e.emb", "text": "e.emb",
           "mi": 3.0, "ta": 3.5}
    row.update(kw)
    return row


def test_duplicate_clip_id_names_the_clip(tmp_path):
    p = write_manifest(tmp_path, [base_row("c1"), base_row("c1")])
    with pytest.raises(dataio.ManifestError, match="c1"):
        dataio.load_manifest(p)


def test_score_out_of_range_names_the_clip(tmp_path):
    p = write_manifest(tmp_path, [base_row("c9", mi=5.5)])
    with pytest.raises(dataio.DataError, match="c9"):
        dataio.load_manifest(p)


def test_null_scores_allowed(tmp_path):
    p = write_manifest(tmp_path, [base_row("c1", mi=None, ta=None)])
    ds = dataio.load_manifest(p)
    assert ds.records[0].mi_score is None
    assert ds.records[0].ta_score is None


def test_missing_embedding_file_names_the_clip(tmp_path):
    p = write_manifest(tmp_path, [base_row("c2", audio="gone.emb")])
    with pytest.raises(dataio.ManifestError, match="c2"):
        dataio.load_manifest(p)


def test_width_mismatch_names_the_clip(tmp_path):
    dataio.write_embedding(np.ones((2, 3), dtype=np.float32), str(tmp_path / "e.emb"))
    dataio.write_embedding(np.ones((2, 4), dtype=np.float32), str(tmp_path / "w.emb"))
    p = str(tmp_path / "manifest.jsonl")
    with open(p, "w") as f:
        f.write(json.dumps(base_row("c1")) + "\n")
        f.write(json.dumps(base_row("c2", audio="w.emb")) + "\n")
    with pytest.raises(dataio.ManifestError, match="c2"):
        dataio.load_manifest(p)


def test_empty_manifest_rejected(tmp_path):
    p = str(tmp_path / "manifest.jsonl")
    open(p, "w").close()
    with pytest.raises(dataio.ManifestError):
        dataio.load_manifest(p)


def test_atomic_write_replaces_not_appends(tmp_path):
    p = str(tmp_path / "f.txt")
    dataio.atomic_write_text(p, "first")
    dataio.atomic_write_text(p, "second")
    with open(p) as f:
        assert f.read() == "second"
    assert os.listdir(str(tmp_path)) == ["f.txt"]  # no temp litter


# ------------------------------------------------------------ splitting


def test_split_is_a_partition():
    ds, _ = small_dataset(n_systems=5, clips_per_system=7)
    tr, dv = dataio.stratified_split(ds, 0.25, seed=3)
    all_ids = {r.clip_id for r in ds.records}
    tr_ids = {r.clip_id for r in tr.records}
    dv_ids = {r.clip_id for r in dv.records}
    assert tr_ids | dv_ids == all_ids
    assert tr_ids & dv_ids == set()
    assert tr.split == "train" and dv.split == "dev"


def test_every_system_in_both_splits():
    ds, _ = small_dataset(n_systems=6, clips_per_system=3)
    tr, dv = dataio.stratified_split(ds, 0.3, seed=0)
    assert set(tr.systems()) == set(ds.systems())
    assert set(dv.systems()) == set(ds.systems())


def test_ten_by_ten_fraction_point_two():
    ds, _ = dataio.generate_synthetic(
        n_systems=10, clips_per_system=10, t_range=(3, 5), d_audio=6, d_text=4, seed=1
    )
    _, dv = dataio.stratified_split(ds, 0.2, seed=7)
    counts = {}
    for r in dv.records:
        counts[r.system_id] = counts.get(r.system_id, 0) + 1
    assert set(counts.values()) == {2}
    assert len(counts) == 10


def test_dev_means_track_train_means():
    ds, _ = dataio.generate_synthetic(seed=0)
    tr, dv = dataio.stratified_split(ds, 0.2, seed=0)
    tr_by, dv_by = {}, {}
    for r in tr.records:
        tr_by.setdefault(r.system_id, []).append(r.mi_score)
    for r in dv.records:
        dv_by.setdefault(r.system_id, []).append(r.mi_score)
    for sys_id in tr_by:
        assert abs(np.mean(tr_by[sys_id]) - np.mean(dv_by[sys_id])) < 0.5


def test_split_determinism_and_seed_sensitivity():
    ds, _ = small_dataset(n_systems=8, clips_per_system=10)
    _, dv_a = dataio.stratified_split(ds, 0.2, seed=5)
    _, dv_b = dataio.stratified_split(ds, 0.2, seed=5)
    assert [r.clip_id for r in dv_a.records] == [r.clip_id for r in dv_b.records]

    _, dv_c = dataio.stratified_split(ds, 0.2, seed=6)
    ids_a = {r.clip_id for r in dv_a.records}
    ids_c = {r.clip_id for r in dv_c.records}
    assert ids_a != ids_c
    count = lambda dv: {
        s: sum(1 for r in dv.records if r.system_id == s) for s in dv.systems()
    }
    assert count(dv_a) == count(dv_c)


def test_split_rejects_bad_fraction_and_small_systems():
    ds, _ = small_dataset()
    for frac in (0.0, 0.5, -0.1, 1.0):
        with pytest.raises(ValueError):
            dataio.stratified_split(ds, frac, seed=0)
    solo = dataio.Dataset(
        records=[ds.records[0]] + [r for r in ds.records if r.system_id != ds.records[0].system_id],
        d_audio=ds.d_audio,
        d_text=ds.d_text,
        split="",
    )
    with pytest.raises(dataio.DataError):
        dataio.stratified_split(solo, 0.2, seed=0)


# ------------------------------------------------------------ synthetic data


def test_noiseless_oracle_is_perfect():
    ds, truth = dataio.generate_synthetic(
        n_systems=8, clips_per_system=8, t_range=(5, 12), d_audio=12, d_text=6,
        noise_sd=0.0, seed=2,
    )
    preds = dataio.oracle_predictions(ds, truth)
    worst_mi = worst_ta = 0.0
    for r in ds.records:
        mi, ta = preds[r.clip_id]
        worst_mi = max(worst_mi, abs(mi - r.mi_score))
        worst_ta = max(worst_ta, abs(ta - r.ta_score))
    assert worst_mi < 1e-5  # float32 storage is the only error source
    assert worst_ta < 1e-5
    clip_ids = sorted(preds)
    srcc_mi = metrics.spearman(
        [preds[c][0] for c in clip_ids], [ds.truths()[c][0] for c in clip_ids]
    )
    assert srcc_mi == pytest.approx(1.0)


def test_default_scale_oracle_recovers_system_ranking():
    ds, truth = dataio.generate_synthetic(seed=0)
    preds = dataio.oracle_predictions(ds, truth)
    mp, mt, _ = metrics.system_level(
        {c: p[0] for c, p in preds.items()},
        {c: t[0] for c, t in ds.truths().items()},
        ds.system_of(),
    )
    assert metrics.spearman(mp, mt) >= 0.95


def test_generator_determinism():
    ds1, t1 = small_dataset(seed=9)
    ds2, t2 = small_dataset(seed=9)
    assert [r.clip_id for r in ds1.records] == [r.clip_id for r in ds2.records]
    for r1, r2 in zip(ds1.records, ds2.records):
        assert r1.mi_score == r2.mi_score
        assert r1.ta_score == r2.ta_score
        assert np.array_equal(r1.audio, r2.audio)
    assert t1.system_latents == t2.system_latents
    ranking1 = sorted(t1.system_latents, key=lambda s: t1.system_latents[s][0])
    ranking2 = sorted(t2.system_latents, key=lambda s: t2.system_latents[s][0])
    assert ranking1 == ranking2


def test_generator_rejects_bad_args():
    with pytest.raises(ValueError):
        dataio.generate_synthetic(n_systems=1)
    with pytest.raises(ValueError):
        dataio.generate_synthetic(t_range=(0, 5))
    with pytest.raises(ValueError):
        dataio.generate_synthetic(t_range=(9, 5))
    with pytest.raises(ValueError):
        dataio.generate_synthetic(d_audio=1)


def test_generator_shapes_and_ranges():
    ds, _ = dataio.generate_synthetic(
        n_systems=3, clips_per_system=4, t_range=(4, 9), d_audio=7, d_text=5, seed=4
    )
    assert ds.d_audio == 7 and ds.d_text == 5
    for r in ds.records:
        assert 4 <= r.audio.shape[0] <= 9
        assert r.audio.shape[1] == 7
        assert r.text.shape[1] == 5
        assert 1.0 <= r.mi_score <= 5.0
        assert 1.0 <= r.ta_score <= 5.0


def test_truth_json_round_trip():
    _, truth = small_dataset(seed=6)
    back = dataio.SyntheticTruth.from_json(truth.to_json())
    assert np.array_equal(back.quality_dir, truth.quality_dir)
    assert np.array_equal(back.pattern_dir, truth.pattern_dir)
    assert np.array_equal(back.text_dir, truth.text_dir)
    assert back.ta_scale == truth.ta_scale
    assert back.ta_offset == truth.ta_offset
    assert back.system_latents == truth.system_latents
