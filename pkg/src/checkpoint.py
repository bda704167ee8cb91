"""Checkpoint persistence: a JSON manifest next to a flat little-endian float64 payload.

Layout of a checkpoint directory::

    manifest.json   {"format", "step", "config", "payload", "registry",
                     "tensors": [{"name", "shape", "offset", "length", "sha256"}]}
    tensors.bin     every tensor's float64 values back to back

Parameters come first, then the optimizer moments as ``adam.m/<name>`` and
``adam.v/<name>``. Offsets and lengths count float64 elements.
"""

from __future__ import annotations

import hashlib
import json
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog
from pydantic import ValidationError

from src.config import ModelConfig
from src.errors import ConfigError, FormatError, IntegrityError
from src.layers import ParamStore

if TYPE_CHECKING:
    from pathlib import Path

logger = structlog.get_logger()

FORMAT = "unims-checkpoint-1"
MANIFEST = "manifest.json"
PAYLOAD = "tensors.bin"
_LE_F64 = np.dtype("<f8")


def _digest(values: np.ndarray[Any, Any]) -> str:
    return hashlib.sha256(values.tobytes()).hexdigest()


def save_checkpoint(
    path: Path,
    params: ParamStore,
    config: ModelConfig,
    step: int,
    moments: dict[str, tuple[np.ndarray[Any, Any], np.ndarray[Any, Any]]] | None = None,
    registry: list[dict[str, Any]] | None = None,
) -> Path:
    """Write a checkpoint directory.

    Args:
        path: Directory to create or overwrite.
        params: Model parameters.
        config: Model configuration stored for compatibility checks.
        step: Optimizer step count.
        moments: Adam first/second moments keyed by parameter name.
        registry: Best-checkpoint registry to persist alongside.

    Returns:
        The checkpoint directory.
    """
    path.mkdir(parents=True, exist_ok=True)
    arrays: list[tuple[str, np.ndarray[Any, Any]]] = [(n, t.data) for n, t in params.items()]
    for name, (m, v) in sorted((moments or {}).items()):
        arrays.append((f"adam.m/{name}", m))
        arrays.append((f"adam.v/{name}", v))

    entries: list[dict[str, Any]] = []
    offset = 0
    with (path / PAYLOAD).open("wb") as fh:
        for name, array in arrays:
            values = np.ascontiguousarray(array, dtype=_LE_F64)
            fh.write(values.tobytes())
            entries.append(
                {
                    "name": name,
                    "shape": list(values.shape),
                    "offset": offset,
                    "length": int(values.size),
                    "sha256": _digest(values),
                }
            )
            offset += int(values.size)

    manifest = {
        "format": FORMAT,
        "step": step,
        "config": config.model_dump(mode="json"),
        "payload": PAYLOAD,
        "registry": registry or [],
        "tensors": entries,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("checkpoint_saved", path=str(path), step=step, tensors=len(entries))
    return path


def check_config(stored: dict[str, Any], expected: ModelConfig) -> None:
    """Raise ConfigError naming the first field where stored and expected differ."""
    current = expected.model_dump(mode="json")
    for field in sorted(set(stored) | set(current)):
        if stored.get(field) != current.get(field):
            msg = (
                f"checkpoint config mismatch on field {field}: "
                f"stored {stored.get(field)!r}, expected {current.get(field)!r}"
            )
            raise ConfigError(msg)


class Checkpoint:
    """A loaded checkpoint."""

    def __init__(
        self,
        params: ParamStore,
        config: ModelConfig,
        step: int,
        moments: dict[str, tuple[np.ndarray[Any, Any], np.ndarray[Any, Any]]],
        registry: list[dict[str, Any]],
    ) -> None:
        self.params = params
        self.config = config
        self.step = step
        self.moments = moments
        self.registry = registry


def load_checkpoint(path: Path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint directory.

    Args:
        path: Checkpoint directory.
        expected: If given, the stored configuration must match it exactly.

    Returns:
        Parameters, configuration, step, optimizer moments and registry.

    Raises:
        FormatError: If the manifest is unreadable or of an unknown format.
        ConfigError: If the stored configuration differs from ``expected``.
        IntegrityError: If a tensor's extent or digest disagrees with the payload.
    """
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        payload = (path / manifest["payload"]).read_bytes()
    except (OSError, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        msg = f"cannot read checkpoint {path}: {e}"
        raise FormatError(msg) from e
    if manifest.get("format") != FORMAT:
        msg = f"{path}: unknown checkpoint format {manifest.get('format')!r}"
        raise FormatError(msg)

    if expected is not None:
        check_config(manifest["config"], expected)
    try:
        config = ModelConfig.model_validate(manifest["config"])
    except ValidationError as e:
        msg = f"{path}: stored config invalid: {e.errors()[0]['msg']}"
        raise ConfigError(msg) from e

    if len(payload) % _LE_F64.itemsize:
        msg = f"{path}: payload size {len(payload)} is not a multiple of 8"
        raise IntegrityError(msg)
    values = np.frombuffer(payload, dtype=_LE_F64)
    params = ParamStore()
    m: dict[str, np.ndarray[Any, Any]] = {}
    v: dict[str, np.ndarray[Any, Any]] = {}
    covered = 0
    for entry in manifest["tensors"]:
        name = entry["name"]
        start, length = int(entry["offset"]), int(entry["length"])
        if start != covered or start + length > values.size:
            msg = f"tensor {name}: extent [{start}, {start + length}) does not fit the payload"
            raise IntegrityError(msg)
        chunk = values[start : start + length]
        if _digest(chunk) != entry["sha256"] or int(np.prod(entry["shape"])) != length:
            msg = f"tensor {name}: payload does not match the manifest"
            raise IntegrityError(msg)
        array = chunk.astype(np.float64).reshape(entry["shape"])
        if name.startswith("adam.m/"):
            m[name.removeprefix("adam.m/")] = array
        elif name.startswith("adam.v/"):
            v[name.removeprefix("adam.v/")] = array
        else:
            params.set(name, array)
        covered = start + length
    if covered != values.size:
        msg = f"{path}: {values.size - covered} trailing values after the last tensor"
        raise IntegrityError(msg)

    moments = {name: (m[name], v[name]) for name in m if name in v}
    logger.info("checkpoint_loaded", path=str(path), step=manifest["step"])
    return Checkpoint(
        params=params,
        config=config,
        step=int(manifest["step"]),
        moments=moments,
        registry=list(manifest.get("registry", [])),
    )
