import numpy as np
import pytest
from autov_rank.interaction import interact, load_interaction_weights

from autov_bridge import export_interaction_layer, toy
from autov_bridge.errors import BridgeError


def test_engine_loads_exported_layer(raw, tmp_path):
    manifest = export_interaction_layer(raw, 12, tmp_path / "w")
    assert manifest.kind == "interaction-layer"
    assert manifest.layer_index == 12
    w = load_interaction_weights(tmp_path / "w")
    assert w.d_model == raw.d_model
    assert w.n_heads == raw.n_heads
    assert w.d_ff == raw.d_ff


def test_exported_layer_matches_model_weights(raw, tmp_path):
    export_interaction_layer(raw, 5, tmp_path / "w")
    w = load_interaction_weights(tmp_path / "w")
    block = raw.decoder_layer(5)
    np.testing.assert_array_equal(w.wq, block["wq"])
    np.testing.assert_array_equal(w.w_ff2, block["w_ff2"])
    np.testing.assert_array_equal(w.norm2_gain, block["norm2_gain"])


def test_engine_can_run_exported_layer(raw, tmp_path):
    export_interaction_layer(raw, 0, tmp_path / "w")
    w = load_interaction_weights(tmp_path / "w")
    rng = np.random.default_rng(0)
    visual = rng.standard_normal((9, raw.d_model)).astype(np.float32)
    text = rng.standard_normal((5, raw.d_model)).astype(np.float32)
    v_t, t_t = interact(w, visual, text)
    assert v_t.shape == visual.shape
    assert t_t.shape == text.shape
    assert np.all(np.isfinite(v_t))


def test_different_layers_export_different_checksums(raw, tmp_path):
    m0 = export_interaction_layer(raw, 0, tmp_path / "w0")
    m12 = export_interaction_layer(raw, 12, tmp_path / "w12")
    assert m0.blobs["wq.avt1"] != m12.blobs["wq.avt1"]
    # Untrained gains and biases start identical everywhere, so only the
    # random projections are expected to differ.
    assert m0.blobs["b_ff1.avt1"] == m12.blobs["b_ff1.avt1"]


def test_reexport_is_checksum_identical(raw, tmp_path):
    m1 = export_interaction_layer(raw, 20, tmp_path / "a")
    m2 = export_interaction_layer(raw, 20, tmp_path / "b")
    assert m1.blobs == m2.blobs


def test_out_of_range_layer_rejected(raw, tmp_path):
    with pytest.raises(BridgeError, match="out of range"):
        export_interaction_layer(raw, raw.layer_count, tmp_path / "w")
    assert not (tmp_path / "w" / "weights.json").exists()
