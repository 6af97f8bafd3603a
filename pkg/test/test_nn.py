"""Unit tests for neural blocks, the parameter store and checkpoints."""

import numpy as np
import pytest

from desk3d import gradcore as G
from desk3d.exceptions import Desk3DCheckpointError, Desk3DGradientError, Desk3DValidationError
from desk3d.nn import (
    MLP,
    Linear,
    MultiHeadAttention,
    ParamStore,
    TransformerBlock,
    ema_update,
    load_checkpoint,
    load_store,
    optimizer_step,
    save_checkpoint,
    save_store,
    sinusoidal_embedding,
)


class TestParamStore:
    """Test suite for ParamStore."""

    def setup_method(self):
        """Set up a store with two layers."""
        self.rng = np.random.default_rng(0)
        self.store = ParamStore()
        self.first = Linear(self.store, "first", 3, 4, self.rng)
        self.second = Linear(self.store, "control.second", 4, 2, self.rng)

    def test_registration(self):
        """Test parameter names, counts and duplicate rejection."""
        assert set(self.store.names()) == {"first.weight", "first.bias", "control.second.weight", "control.second.bias"}
        assert self.store.num_parameters("first") == 3 * 4 + 4
        assert len(self.store) == 4
        with pytest.raises(Desk3DValidationError, match="already registered"):
            self.store.add("first.weight", np.zeros(1))
        with pytest.raises(Desk3DValidationError):
            self.store.add("bad name", np.zeros(1))

    def test_freeze_with_exclude(self):
        """Test that freeze stops gradients everywhere except the excluded prefix."""
        self.store.freeze(exclude="control.")
        assert not self.store["first.weight"].requires_grad
        assert self.store["control.second.weight"].requires_grad

    def test_checksum_tracks_values(self):
        """Test that checksums change with values and ignore excluded parameters."""
        base = self.store.checksum(exclude="control.")
        self.store["control.second.bias"].data += 1.0
        assert self.store.checksum(exclude="control.") == base
        self.store["first.bias"].data += 1.0
        assert self.store.checksum(exclude="control.") != base

    def test_optimizer_requires_gradients(self):
        """Test that a step without backward fails."""
        with pytest.raises(Desk3DGradientError, match="no gradient"):
            optimizer_step(self.store)

    def test_optimizer_reduces_loss(self):
        """Test that repeated steps reduce a quadratic loss."""
        x = self.rng.normal(size=(8, 3))
        target = self.rng.normal(size=(8, 2))

        def loss():
            pred = self.second(G.silu(self.first(x)))
            diff = pred - target
            return G.mean(diff * diff)

        start = loss().item()
        for _ in range(50):
            self.store.zero_grads()
            G.backward(loss())
            optimizer_step(self.store, lr=1e-2)
        assert loss().item() < start

    def test_frozen_parameters_do_not_move(self):
        """Test that frozen parameters stay bit-identical through optimizer steps."""
        self.store.freeze(exclude="control.")
        before = self.store.checksum(exclude="control.")
        x = self.rng.normal(size=(4, 3))
        for _ in range(3):
            self.store.zero_grads()
            G.backward(G.tsum(self.second(self.first(x))))
            optimizer_step(self.store)
        assert self.store.checksum(exclude="control.") == before

    def test_ema(self):
        """Test EMA initialization, blending and the swap context."""
        ema_update(self.store, 0.5)
        original = self.store["first.bias"].data.copy()
        self.store["first.bias"].data += 2.0
        ema_update(self.store, 0.5)
        np.testing.assert_allclose(self.store.ema_shadow["first.bias"], original + 1.0, rtol=1e-6)
        with self.store.use_ema():
            np.testing.assert_allclose(self.store["first.bias"].data, original + 1.0, rtol=1e-6)
        np.testing.assert_allclose(self.store["first.bias"].data, original + 2.0, rtol=1e-6)

    def test_ema_decay_validation(self):
        """Test EMA decay bounds."""
        with pytest.raises(Desk3DValidationError):
            ema_update(self.store, 1.0)


class TestBlocks:
    """Test suite for neural blocks."""

    def setup_method(self):
        """Set up a store and rng."""
        self.rng = np.random.default_rng(1)
        self.store = ParamStore()

    def test_linear_handles_vectors_and_batches(self):
        """Test that Linear maps the last axis for 1-D and N-D inputs."""
        layer = Linear(self.store, "lin", 3, 5, self.rng)
        assert layer(np.ones(3)).shape == (5,)
        assert layer(np.ones((2, 4, 3))).shape == (2, 4, 5)

    def test_zero_init_linear_outputs_zero(self):
        """Test zero-initialized layers."""
        layer = Linear(self.store, "zero", 3, 2, self.rng, zero_init=True)
        np.testing.assert_array_equal(layer(np.ones((4, 3))).data, np.zeros((4, 2)))

    def test_mlp_validation(self):
        """Test that an MLP needs at least two dims."""
        with pytest.raises(Desk3DValidationError):
            MLP(self.store, "mlp", [4], self.rng)

    def test_attention_heads_must_divide_dim(self):
        """Test head-count validation."""
        with pytest.raises(Desk3DValidationError, match="divisible"):
            MultiHeadAttention(self.store, "attn", 10, 3, self.rng)

    def test_self_attention_is_permutation_equivariant(self):
        """Test that permuting tokens permutes the block output."""
        block = TransformerBlock(self.store, "block", 8, 2, self.rng)
        x = self.rng.normal(size=(5, 8))
        order = [3, 0, 4, 1, 2]
        out = block(x).data
        permuted = block(x[order]).data
        np.testing.assert_allclose(permuted, out[order], atol=1e-5)

    def test_cross_attention_requires_context(self):
        """Test that a cross-attention block refuses to run without context."""
        block = TransformerBlock(self.store, "xblock", 8, 2, self.rng, cross_attention=True)
        with pytest.raises(Desk3DValidationError, match="context"):
            block(np.zeros((3, 8)))
        assert block(np.zeros((3, 8)), context=np.ones((4, 8))).shape == (3, 8)

    def test_sinusoidal_embedding_shape(self):
        """Test embedding shapes for even and odd dims."""
        assert sinusoidal_embedding(np.array([0, 5, 9]), 6).shape == (3, 6)
        assert sinusoidal_embedding(np.array([1]), 5).shape == (1, 5)


class TestCheckpoints:
    """Test suite for the checkpoint container."""

    def test_arrays_and_meta_round_trip(self, tmp_path):
        """Test that arrays (including scalars) and metadata survive a save/load."""
        arrays = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "scale": np.array(2.5, np.float32)}
        save_checkpoint(tmp_path / "x.ckpt", arrays, {"kind": "test"})
        loaded, meta = load_checkpoint(tmp_path / "x.ckpt")
        np.testing.assert_array_equal(loaded["a.weight"], arrays["a.weight"])
        assert loaded["scale"].shape == ()
        assert meta == {"kind": "test"}

    def test_store_round_trip_with_ema(self, tmp_path):
        """Test that a store and its EMA shadow are restored."""
        rng = np.random.default_rng(2)
        store = ParamStore()
        Linear(store, "lin", 2, 2, rng)
        ema_update(store, 0.9)
        save_store(tmp_path / "s.ckpt", store, {"kind": "store"})
        other = ParamStore()
        Linear(other, "lin", 2, 2, np.random.default_rng(99))
        meta = load_store(tmp_path / "s.ckpt", other)
        assert other.checksum() == store.checksum()
        assert other.ema_shadow is not None
        assert meta["kind"] == "store"

    def test_missing_file(self, tmp_path):
        """Test that a missing checkpoint raises a checkpoint error."""
        with pytest.raises(Desk3DCheckpointError, match="Cannot read"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_foreign_file(self, tmp_path):
        """Test that a file without the magic header is rejected."""
        path = tmp_path / "foreign.ckpt"
        path.write_bytes(b"hello\nend\n")
        with pytest.raises(Desk3DCheckpointError, match="Not a desk3d checkpoint"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        """Test that a truncated payload is detected."""
        path = tmp_path / "t.ckpt"
        save_checkpoint(path, {"w": np.ones(16, np.float32)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(Desk3DCheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        """Test that loading into differently shaped parameters fails."""
        store = ParamStore()
        Linear(store, "lin", 2, 3, np.random.default_rng(0))
        save_store(tmp_path / "s.ckpt", store)
        other = ParamStore()
        Linear(other, "lin", 3, 3, np.random.default_rng(0))
        with pytest.raises(Desk3DCheckpointError, match="Shape mismatch"):
            load_store(tmp_path / "s.ckpt", other)
