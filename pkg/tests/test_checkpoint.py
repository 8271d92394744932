"""
Tests for the checkpoint container.
"""

import struct

import pytest
import torch

from app.core.errors import VersionError
from app.kernels.tensor import make_generator
from app.models.detector import LffnDetector
from app.services.checkpoint import (
    Checkpoint,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture
def checkpoint(tiny_config) -> Checkpoint:
    detector = LffnDetector.initialize(tiny_config, make_generator(tiny_config.seed))
    velocities = {name: torch.full_like(t, 0.25) for name, t in detector.named_tensors().items()}
    generator = make_generator(99)
    torch.rand(5, generator=generator)
    history = [[1, 1.5, 0.5, 2.0], [2, 1.25, 0.25, 1.5]]
    return Checkpoint.from_state(detector, 2, velocities, generator, history)


class TestRoundTrip:
    def test_save_load_save_is_byte_identical(self, checkpoint, tmp_path):
        first = save_checkpoint(checkpoint, tmp_path / "a.ckpt")
        second = save_checkpoint(load_checkpoint(first), tmp_path / "b.ckpt")
        assert first.read_bytes() == second.read_bytes()

    def test_contents_survive(self, checkpoint):
        restored = checkpoint_from_bytes(checkpoint_to_bytes(checkpoint))
        assert restored.iteration == 2
        assert restored.history == checkpoint.history
        assert restored.config == checkpoint.config
        assert list(restored.tensors) == list(checkpoint.tensors)
        assert all(torch.equal(restored.tensors[k], checkpoint.tensors[k]) for k in checkpoint.tensors)

    def test_generator_state_is_restored(self, checkpoint):
        restored = checkpoint_from_bytes(checkpoint_to_bytes(checkpoint)).generator()
        expected = checkpoint.generator()
        assert torch.equal(torch.rand(4, generator=restored), torch.rand(4, generator=expected))

    def test_velocities_are_separated_from_parameters(self, checkpoint):
        assert set(checkpoint.velocities()) == set(checkpoint.parameters())
        assert all((v == 0.25).all() for v in checkpoint.velocities().values())

    def test_rebuilds_the_detector(self, checkpoint):
        detector = checkpoint_from_bytes(checkpoint_to_bytes(checkpoint)).to_detector()
        stored = checkpoint.parameters()
        assert all(torch.equal(t, stored[k]) for k, t in detector.named_tensors().items())


class TestIncompatibleData:
    def test_unsupported_version(self, checkpoint):
        blob = bytearray(checkpoint_to_bytes(checkpoint))
        blob[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionError, match="version"):
            checkpoint_from_bytes(bytes(blob))

    def test_bad_magic(self, checkpoint):
        blob = bytearray(checkpoint_to_bytes(checkpoint))
        blob[:4] = b"ABCD"
        with pytest.raises(VersionError):
            checkpoint_from_bytes(bytes(blob))

    def test_truncated_file(self, checkpoint):
        with pytest.raises(VersionError):
            checkpoint_from_bytes(checkpoint_to_bytes(checkpoint)[:-20])

    def test_other_configuration(self, checkpoint, make_config):
        with pytest.raises(VersionError):
            checkpoint.to_detector(make_config(mode="lffn"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(VersionError):
            load_checkpoint(tmp_path / "absent.ckpt")
