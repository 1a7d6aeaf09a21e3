"""Release gate for the extractor: its artifacts must be consumable by the
scoring package as-is, through files alone."""

import json

import numpy as np
import pytest
from scipy.io import wavfile

from emb_extract import extract, load_job

ordmos_dataio = pytest.importorskip("ordmos.dataio", reason="scoring package not installed")
ordmos_network = pytest.importorskip("ordmos.network")
ordmos_training = pytest.importorskip("ordmos.training")


def _lay_out_job(root, n_clips=3):
    wav_dir = root / "wavs"
    wav_dir.mkdir()
    rng = np.random.default_rng(0)
    table = ["clip_id,system_id,prompt,mi,ta"]
    # Scores must not average out equal across the two systems, or the
    # system-level rank metric degenerates during the micro-train below.
    mi_scores = (2.0, 4.4, 3.1)
    ta_scores = (4.1, 1.9, 3.3)
    for i in range(n_clips):
        sr = (22050, 24000, 48000)[i % 3]
        t = np.arange(int(sr * 0.6)) / sr
        freq = 200.0 + 170.0 * i
        wave = 0.3 * np.sin(2 * np.pi * freq * t) + rng.normal(0, 0.02, t.size)
        wavfile.write(wav_dir / f"clip{i}.wav", sr, (wave * 32767).astype(np.int16))
        table.append(f"clip{i},sys{i % 2},a tone near {int(freq)} hertz,{mi_scores[i]},{ta_scores[i]}")
    (root / "prompts.csv").write_text("\n".join(table) + "\n")
    (root / "job.json").write_text(json.dumps(
        {"audio_dir": "wavs", "prompt_table": "prompts.csv", "out_dir": "out"}
    ))
    return str(root / "job.json")


def test_round_trip_and_micro_train(tmp_path):
    manifest = extract(load_job(_lay_out_job(tmp_path)))

    ds = ordmos_dataio.load_manifest(manifest)
    assert len(ds) == 3
    assert ds.d_audio == 64 and ds.d_text == 32
    for r in ds.records:
        assert r.audio.shape[0] >= 1 and np.isfinite(r.audio).all()
        assert r.text.shape[0] >= 1 and np.isfinite(r.text).all()
        direct = ordmos_dataio.read_embedding(
            str(tmp_path / "out" / "emb" / f"{r.clip_id}.audio.emb")
        )
        assert direct.shape == r.audio.shape

    cfg = ordmos_network.ModelConfig(
        d_audio=64, d_text=32, variant="dora", temporal="transformer",
        pooling="attention", d_common=16, n_heads=2, d_hidden=16, K=20,
    )
    tcfg = ordmos_training.TrainConfig(
        criterion="gaussian", lr=1e-3, batch_size=2, max_epochs=2, patience=2, seed=0,
    )
    ckpt = ordmos_training.train(cfg, ds, ds, tcfg)
    assert ckpt.best_metric is not None
    assert len(ckpt.log_lines) == 2
    pred = ordmos_network.forward(cfg, ckpt.params, ds.records[0].audio, ds.records[0].text)
    assert 1.0 <= pred.mi_score <= 5.0
    print("PASS: extractor round trip and 3-clip micro-train "
          f"(widths 64/32, best dev metric {ckpt.best_metric:.3f})")
