"""Binary checkpoint format: "KLRA", u32 version, then named float64 matrices (little-endian)."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"KLRA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(matrices: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, m in matrices.items():
        m = np.asarray(m, dtype=np.float64)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2:
            raise CheckpointError(f"{name}: only matrices can be stored, got shape {m.shape}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *m.shape))
        parts.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(data) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            size = rows * cols * 8
            if pos + size > len(data):
                raise CheckpointError(f"{name}: truncated data")
            out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}") from exc
    return out


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, matrices: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(matrices))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def stage_payload(checkpoint, config) -> dict[str, np.ndarray]:
    """Matrices describing one training stage: merged weights, subspaces and adapter factors."""
    out: dict[str, np.ndarray] = {
        "stage": np.array([[checkpoint.stage]], dtype=np.float64),
        "task_index": np.array([[checkpoint.task_index]], dtype=np.float64),
    }
    model = checkpoint.model
    for i in model.adapted_layers:
        pre = f"layer{i}/"
        out[pre + "W"] = model.layers[i].weight
        u = checkpoint.subspaces.get(i)
        if u is not None:
            out[pre + "Wp"] = u.Wp.basis
            out[pre + "M"] = u.M.basis
        ad = checkpoint.adapters.get(i)
        if ad is not None:
            out[pre + "A"] = ad.A
            out[pre + "B"] = ad.B
            out[pre + "alpha"] = np.array([[ad.alpha]])
            out[pre + "r"] = np.array([[ad.r]], dtype=np.float64)
        out[pre + "epsilon_w"] = np.array([[float(config.for_layer(i, "epsilon_w"))]])
        out[pre + "epsilon_f"] = np.array([[float(config.for_layer(i, "epsilon_f"))]])
    return out
