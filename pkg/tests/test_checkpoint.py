"""Tests for checkpoint save/load and its integrity checks."""

import json
import re
from pathlib import Path

import numpy as np
import pytest

from src.checkpoint import MANIFEST, PAYLOAD, load_checkpoint, save_checkpoint
from src.errors import ConfigError, FormatError, IntegrityError
from src.model import UniMSModel
from tests.factories import tiny_config


def _saved(tmp_path: Path) -> tuple[UniMSModel, Path]:
    model = UniMSModel(tiny_config())
    first = next(iter(model.params))
    moments = {first: (np.full(model.params[first].shape, 0.5), np.full(model.params[first].shape, 2.0))}
    registry = [{"step": 3, "val_loss": 1.25, "path": "x"}]
    path = save_checkpoint(tmp_path / "ckpt", model.params, model.config, 3, moments, registry)
    return model, path


class TestRoundTrip:
    """Tests for saving and reloading."""

    def test_reload_restores_everything(self, tmp_path: Path) -> None:
        """Parameters, step, moments and registry come back unchanged."""
        model, path = _saved(tmp_path)
        ckpt = load_checkpoint(path, expected=model.config)
        assert ckpt.step == 3
        assert ckpt.config == model.config
        assert list(ckpt.params) == list(model.params)
        for name, tensor in model.params.items():
            np.testing.assert_array_equal(ckpt.params[name].data, tensor.data)
        first = next(iter(model.params))
        m, v = ckpt.moments[first]
        assert (m == 0.5).all() and (v == 2.0).all()
        assert ckpt.registry == [{"step": 3, "val_loss": 1.25, "path": "x"}]

    def test_resave_is_byte_identical(self, tmp_path: Path) -> None:
        """Loading and saving again reproduces both files exactly."""
        _, path = _saved(tmp_path)
        ckpt = load_checkpoint(path)
        again = save_checkpoint(
            tmp_path / "again", ckpt.params, ckpt.config, ckpt.step, ckpt.moments, ckpt.registry
        )
        assert (again / MANIFEST).read_bytes() == (path / MANIFEST).read_bytes()
        assert (again / PAYLOAD).read_bytes() == (path / PAYLOAD).read_bytes()

    def test_model_from_checkpoint_matches(self, tmp_path: Path) -> None:
        """A model rebuilt from a checkpoint holds the same parameters."""
        model, path = _saved(tmp_path)
        ckpt = load_checkpoint(path)
        rebuilt = UniMSModel(ckpt.config, ckpt.params)
        before, after = model.params.snapshot(), rebuilt.params.snapshot()
        assert all(np.array_equal(before[n], after[n]) for n in before)


class TestVerification:
    """Tests for rejected checkpoints."""

    def test_config_mismatch_names_field(self, tmp_path: Path) -> None:
        """Loading against another shape names the differing field."""
        _, path = _saved(tmp_path)
        with pytest.raises(ConfigError, match="d_model"):
            load_checkpoint(path, expected=tiny_config(d_model=16))

    def test_corrupted_payload_names_tensor(self, tmp_path: Path) -> None:
        """Flipped bytes in the first tensor fail its digest."""
        _, path = _saved(tmp_path)
        first = json.loads((path / MANIFEST).read_text())["tensors"][0]["name"]
        payload = bytearray((path / PAYLOAD).read_bytes())
        payload[:8] = np.float64(123.0).tobytes()
        (path / PAYLOAD).write_bytes(bytes(payload))
        with pytest.raises(IntegrityError, match=re.escape(first)):
            load_checkpoint(path)

    def test_trailing_values(self, tmp_path: Path) -> None:
        """Values past the last tensor are an integrity error."""
        _, path = _saved(tmp_path)
        with (path / PAYLOAD).open("ab") as fh:
            fh.write(np.zeros(2).tobytes())
        with pytest.raises(IntegrityError, match="trailing"):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path: Path) -> None:
        """A payload cut short no longer fits the manifest."""
        _, path = _saved(tmp_path)
        data = (path / PAYLOAD).read_bytes()
        (path / PAYLOAD).write_bytes(data[: len(data) - 16])
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_unknown_format(self, tmp_path: Path) -> None:
        """A manifest of another format is a format error."""
        _, path = _saved(tmp_path)
        manifest = json.loads((path / MANIFEST).read_text())
        manifest["format"] = "something-else"
        (path / MANIFEST).write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_missing_directory(self, tmp_path: Path) -> None:
        """A missing checkpoint is a format error."""
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "absent")
