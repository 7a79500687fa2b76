"""The bridge's writers must produce bytes the engine's readers accept.

autov_rank is imported here, and only here in spirit: the bridge package
itself never touches it, but every format test round-trips through the
engine's loaders to prove the two implementations agree byte for byte.
"""

import numpy as np
import pytest
from autov_rank import core as engine_core
from autov_rank import interaction as engine_interaction
from autov_rank import pipeline as engine_pipeline

from autov_bridge import formats
from autov_bridge.errors import BridgeFormatError


def test_tensor_bytes_match_engine_writer(tmp_path):
    m = np.arange(12, dtype=np.float32).reshape(3, 4) / 7.0
    formats.write_tensor(tmp_path / "bridge.avt1", m)
    engine_core.write_tensor(tmp_path / "engine.avt1", m)
    assert (tmp_path / "bridge.avt1").read_bytes() == (tmp_path / "engine.avt1").read_bytes()


def test_engine_reads_bridge_tensor(tmp_path):
    m = np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)
    formats.write_tensor(tmp_path / "t.avt1", m)
    back = engine_core.read_tensor(tmp_path / "t.avt1")
    np.testing.assert_array_equal(back, m)


def test_bridge_reads_engine_tensor(tmp_path):
    m = np.random.default_rng(1).standard_normal((2, 9)).astype(np.float32)
    engine_core.write_tensor(tmp_path / "t.avt1", m)
    np.testing.assert_array_equal(formats.read_tensor(tmp_path / "t.avt1"), m)


@pytest.mark.parametrize("corrupt", ["magic", "truncate", "pad"])
def test_tensor_reader_rejects_corruption(tmp_path, corrupt):
    formats.write_tensor(tmp_path / "t.avt1", np.ones((2, 2), dtype=np.float32))
    raw = (tmp_path / "t.avt1").read_bytes()
    if corrupt == "magic":
        raw = b"XXXX" + raw[4:]
    elif corrupt == "truncate":
        raw = raw[:-3]
    else:
        raw = raw + b"\x00\x00"
    (tmp_path / "t.avt1").write_bytes(raw)
    with pytest.raises(BridgeFormatError):
        formats.read_tensor(tmp_path / "t.avt1")


def test_tensor_writer_rejects_non_finite(tmp_path):
    bad = np.array([[1.0, np.inf]], dtype=np.float32)
    with pytest.raises(BridgeFormatError):
        formats.write_tensor(tmp_path / "t.avt1", bad)


def _records(n=3, pool=3, d=8, l_v=4, l_t=2, with_losses=False):
    rng = np.random.default_rng(42)
    recs = []
    for i in range(n):
        cands = [(f"c{j}", rng.standard_normal((l_v, d)).astype(np.float32))
                 for j in range(pool)]
        losses = {f"c{j}": float(rng.uniform(0.1, 2.0)) for j in range(pool)} if with_losses else {}
        recs.append(formats.ExportRecord(f"g{i}", rng.standard_normal((l_t, d)).astype(np.float32),
                                         cands, losses))
    return recs


def test_engine_loads_bridge_dataset(tmp_path):
    recs = _records(with_losses=True)
    formats.write_dataset(recs, tmp_path / "data.jsonl")
    groups = engine_pipeline.load_dataset(tmp_path / "data.jsonl")
    assert [g.group_id for g in groups] == [r.group_id for r in recs]
    for g, r in zip(groups, recs):
        np.testing.assert_array_equal(g.query, r.query)
        for cand, (cid, tokens) in zip(g.candidates, r.candidates):
            assert cand.candidate_id == cid
            np.testing.assert_array_equal(cand.tokens, tokens)
            assert cand.loss == pytest.approx(r.losses[cid])


def test_dataset_bytes_match_engine_writer(tmp_path):
    recs = _records(with_losses=True)
    formats.write_dataset(recs, tmp_path / "bridge" / "data.jsonl")
    from autov_rank.pipeline import Candidate, CandidateGroup, save_dataset

    groups = [
        CandidateGroup(r.group_id, r.query,
                       [Candidate(cid, tok, r.losses.get(cid)) for cid, tok in r.candidates])
        for r in recs
    ]
    save_dataset(groups, tmp_path / "engine" / "data.jsonl")
    assert ((tmp_path / "bridge" / "data.jsonl").read_bytes()
            == (tmp_path / "engine" / "data.jsonl").read_bytes())
    for blob in sorted((tmp_path / "engine" / "data_blobs").iterdir()):
        twin = tmp_path / "bridge" / "data_blobs" / blob.name
        assert twin.read_bytes() == blob.read_bytes(), blob.name


def test_bridge_dataset_reader_round_trips(tmp_path):
    recs = _records(with_losses=True)
    formats.write_dataset(recs, tmp_path / "data.jsonl")
    back = formats.read_dataset(tmp_path / "data.jsonl")
    assert len(back) == len(recs)
    for a, b in zip(back, recs):
        assert a.group_id == b.group_id
        assert a.losses == pytest.approx(b.losses)
        np.testing.assert_array_equal(a.query, b.query)


def test_dataset_reader_rejects_wrong_format(tmp_path):
    (tmp_path / "data.jsonl").write_text('{"format": "something-else", "version": 1}\n')
    with pytest.raises(BridgeFormatError):
        formats.read_dataset(tmp_path / "data.jsonl")


def test_engine_loads_bridge_interaction_dir(tmp_path):
    d, heads, f = 16, 4, 32
    rng = np.random.default_rng(7)
    tensors = {
        "wq": rng.standard_normal((d, d)),
        "wk": rng.standard_normal((d, d)),
        "wv": rng.standard_normal((d, d)),
        "wo": rng.standard_normal((d, d)),
        "w_ff1": rng.standard_normal((d, f)),
        "b_ff1": rng.standard_normal(f),
        "w_ff2": rng.standard_normal((f, d)),
        "b_ff2": rng.standard_normal(d),
        "norm1_gain": rng.standard_normal(d),
        "norm2_gain": rng.standard_normal(d),
    }
    formats.write_interaction_dir(tensors, {"d_model": d, "n_heads": heads, "d_ff": f}, tmp_path / "w")
    w = engine_interaction.load_interaction_weights(tmp_path / "w")
    assert (w.d_model, w.n_heads, w.d_ff) == (d, heads, f)
    np.testing.assert_array_equal(w.wq, tensors["wq"].astype(np.float32))
    np.testing.assert_array_equal(w.b_ff1, tensors["b_ff1"].astype(np.float32))


def test_interaction_writer_requires_all_tensors(tmp_path):
    with pytest.raises(BridgeFormatError, match="missing tensors"):
        formats.write_interaction_dir({"wq": np.ones((2, 2))},
                                      {"d_model": 2, "n_heads": 1, "d_ff": 4}, tmp_path / "w")
