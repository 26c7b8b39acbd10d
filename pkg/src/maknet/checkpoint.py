"""Bit-exact binary checkpoints.

Layout (all integers little-endian):

    magic       4s   b"MAKN"
    version     u32  1
    digest      32s  sha256 of the embedded model-config text
    cfg_len     u32  followed by cfg_len bytes of model-config text (utf-8)
    n_tensors   u32  followed by named tensors:
        name_len u16, name utf-8, rank u8, dims u32 * rank, values f64
    has_state   u8   optional training state:
        n_tensors u32, named tensors as above (optimizer moments, counters)
        n_rng     u8, per stream: name (u16+utf8), blob (u32+json utf-8)

Values are stored as 64-bit floats regardless of compute width so files are
bit-comparable across dtype configurations. Loading verifies the magic,
version, and digest; a digest mismatch against the caller's expected model
config is refused.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_id",
    "model_tensors",
    "restore_model_tensors",
    "rng_state_blob",
    "restore_rng_state",
]

MAGIC = b"MAKN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_named(out: bytearray, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    out += struct.pack("<H", len(raw))
    out += raw
    arr64 = np.ascontiguousarray(arr, dtype=np.float64)
    out += struct.pack("<B", arr64.ndim)
    for d in arr64.shape:
        out += struct.pack("<I", d)
    out += arr64.tobytes()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def named(self) -> tuple[str, np.ndarray]:
        name_len = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        rank = self.unpack("<B")
        dims = tuple(self.unpack("<I") for _ in range(rank)) if rank else ()
        count = 1
        for d in dims:
            count *= d
        arr = np.frombuffer(self.take(count * 8), dtype="<f8").reshape(dims).copy()
        return name, arr


def save_checkpoint(
    path,
    model_config_text: str,
    tensors: dict[str, np.ndarray],
    train_state: dict[str, np.ndarray] | None = None,
    rng_states: dict[str, str] | None = None,
) -> None:
    """Atomic write (temp file + rename)."""
    cfg_bytes = model_config_text.encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += hashlib.sha256(cfg_bytes).digest()
    out += struct.pack("<I", len(cfg_bytes))
    out += cfg_bytes
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        _pack_named(out, name, arr)
    if train_state is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        out += struct.pack("<I", len(train_state))
        for name, arr in train_state.items():
            _pack_named(out, name, arr)
        rng_states = rng_states or {}
        out += struct.pack("<B", len(rng_states))
        for name, blob in rng_states.items():
            raw = name.encode("utf-8")
            out += struct.pack("<H", len(raw))
            out += raw
            data = blob.encode("utf-8")
            out += struct.pack("<I", len(data))
            out += data
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def load_checkpoint(path, expected_model_digest: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a MAKNet checkpoint")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = r.take(32)
    cfg_len = r.unpack("<I")
    cfg_text = r.take(cfg_len).decode("utf-8")
    if hashlib.sha256(cfg_text.encode("utf-8")).digest() != digest:
        raise CheckpointError(f"{path}: embedded config digest mismatch (corrupt)")
    if (
        expected_model_digest is not None
        and digest.hex() != expected_model_digest
    ):
        raise CheckpointError(
            f"{path}: model-config digest {digest.hex()[:12]}... does not match "
            f"expected {expected_model_digest[:12]}..."
        )
    n = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        name, arr = r.named()
        tensors[name] = arr
    result = {
        "model_config_text": cfg_text,
        "model_digest": digest.hex(),
        "tensors": tensors,
        "train_state": None,
        "rng_states": {},
    }
    if r.unpack("<B"):
        n_state = r.unpack("<I")
        state = {}
        for _ in range(n_state):
            name, arr = r.named()
            state[name] = arr
        result["train_state"] = state
        n_rng = r.unpack("<B")
        rngs = {}
        for _ in range(n_rng):
            name_len = r.unpack("<H")
            name = r.take(name_len).decode("utf-8")
            blob_len = r.unpack("<I")
            rngs[name] = r.take(blob_len).decode("utf-8")
        result["rng_states"] = rngs
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return result


def checkpoint_id(path) -> str:
    """Identity of a checkpoint file: sha256 of its bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def model_tensors(model) -> dict[str, np.ndarray]:
    """Named parameters plus named buffers, in definition order."""
    out = {}
    for name, p in model.named_parameters():
        out["param." + name] = p.data
    for name, b in model.named_buffers():
        out["buffer." + name] = b
    return out


def restore_model_tensors(model, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = {"param." + n for n in params} | {"buffer." + n for n in buffers}
    if expected != set(tensors):
        missing = expected - set(tensors)
        extra = set(tensors) - expected
        raise CheckpointError(
            f"checkpoint/model mismatch: missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]}"
        )
    for name, p in params.items():
        arr = tensors["param." + name]
        if arr.shape != p.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.shape}"
            )
        p.data = arr.astype(p.dtype)
    for name in buffers:
        model.set_buffer(name, tensors["buffer." + name])


def rng_state_blob(rng: np.random.Generator) -> str:
    """Canonical JSON for a Generator's bit-generator state."""
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def restore_rng_state(blob: str) -> np.random.Generator:
    state = json.loads(blob)
    bitgen_cls = getattr(np.random, state["bit_generator"])
    bg = bitgen_cls()
    bg.state = state
    return np.random.Generator(bg)
