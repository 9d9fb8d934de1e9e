# backend/checkpoint.py
"""
RTPC checkpoint files.

Layout (little-endian):
    b"RTPC" | u32 version | u32 metadata length | metadata (UTF-8 key=value lines)
    then, until end of file, one record per tensor:
    u32 name length | name (UTF-8) | 4 x u32 dims | float32 payload
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Union

import numpy as np

from backend.errors import CheckpointError, DatasetIOError, FormatError
from backend.models import NetworkConfig
from backend.network import ResNetTP, build, set_frozen_groups

logger = logging.getLogger(__name__)

MAGIC = b"RTPC"
VERSION = 1
_U32 = struct.Struct("<I")
_DIMS = struct.Struct("<4I")

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, str] = field(default_factory=dict)

    @property
    def frozen(self) -> Set[str]:
        raw = self.metadata.get("frozen", "")
        return {g for g in raw.split(",") if g}

    @property
    def config(self) -> NetworkConfig:
        if "config" not in self.metadata:
            raise CheckpointError("checkpoint metadata has no network config")
        return NetworkConfig.model_validate_json(self.metadata["config"])

    @property
    def epoch(self) -> int:
        return int(self.metadata.get("epoch", "0"))


@dataclass
class LoadResult:
    loaded: List[str]
    unknown: List[str]
    missing: List[str]


# --- 1. Encoding ---


def _encode_metadata(metadata: Dict[str, str]) -> bytes:
    lines = []
    for key, value in metadata.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise CheckpointError(f"metadata entry {key!r} cannot be encoded as a key=value line")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_metadata(raw: bytes) -> Dict[str, str]:
    metadata = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed metadata line {line!r}")
        metadata[key] = value
    return metadata


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = _encode_metadata(ckpt.metadata)
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta)), meta]
    for name, array in ckpt.tensors.items():
        if array.ndim != 4:
            raise CheckpointError(f"tensor {name} is not 4-D")
        encoded = name.encode("utf-8")
        parts += [_U32.pack(len(encoded)), encoded, _DIMS.pack(*array.shape),
                  np.ascontiguousarray(array, dtype="<f4").tobytes()]
    return b"".join(parts)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    if payload[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {payload[:4]!r}, expected {MAGIC!r}")
    try:
        (version,) = _U32.unpack_from(payload, 4)
        if version != VERSION:
            raise FormatError(f"{source}: unsupported checkpoint version {version}")
        (meta_len,) = _U32.unpack_from(payload, 8)
        offset = 12
        metadata = _decode_metadata(payload[offset:offset + meta_len])
        offset += meta_len
        tensors: Dict[str, np.ndarray] = {}
        while offset < len(payload):
            (name_len,) = _U32.unpack_from(payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            dims = _DIMS.unpack_from(payload, offset)
            offset += _DIMS.size
            count = int(np.prod(dims))
            end = offset + 4 * count
            if end > len(payload):
                raise FormatError(f"{source}: truncated record for {name}")
            tensors[name] = np.frombuffer(payload[offset:end], dtype="<f4").astype(np.float32).reshape(dims)
            offset = end
    except struct.error as e:
        raise FormatError(f"{source}: truncated checkpoint ({e})") from e
    return Checkpoint(tensors=tensors, metadata=metadata)


# --- 2. Network <-> Checkpoint ---


def checkpoint_from_network(net: ResNetTP, epoch: int = 0, extra: Optional[Dict[str, str]] = None) -> Checkpoint:
    metadata = {
        "config": net.config.model_dump_json(),
        "config_hash": net.config.fingerprint(),
        "epoch": str(epoch),
        "seed": str(net.config.seed),
        "frozen": ",".join(sorted(net.frozen_groups)),
    }
    metadata.update(extra or {})
    tensors = {name: p.data.astype(np.float32, copy=True) for name, p in net.parameters().items()}
    return Checkpoint(tensors=tensors, metadata=metadata)


def save_checkpoint(net: ResNetTP, path: PathLike, epoch: int = 0, extra: Optional[Dict[str, str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint_from_network(net, epoch, extra)))
    logger.info("saved checkpoint %s (epoch %d)", path, epoch)
    return path


def read_checkpoint(path: PathLike) -> Checkpoint:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read checkpoint ({e.strerror})", str(path)) from e
    return decode_checkpoint(payload, str(path))


def load_checkpoint(net: ResNetTP, source: Union[PathLike, Checkpoint], strict: bool = True,
                    exclude: Sequence[str] = ()) -> LoadResult:
    """
    Copies checkpoint tensors into ``net``.

    strict: every name must match in both directions. Non-strict: names unknown to
    the network are ignored and parameters absent from the checkpoint keep their
    current values. Shape clashes are always an error. Names starting with one of
    the ``exclude`` prefixes are skipped on both sides.
    """
    ckpt = source if isinstance(source, Checkpoint) else read_checkpoint(source)
    params = net.parameters()

    def excluded(name):
        return any(name == prefix or name.startswith(prefix + ".") for prefix in exclude)

    incoming = {n: a for n, a in ckpt.tensors.items() if not excluded(n)}
    expected = {n: p for n, p in params.items() if not excluded(n)}
    unknown = sorted(set(incoming) - set(expected))
    missing = sorted(set(expected) - set(incoming))
    if strict and (unknown or missing):
        raise CheckpointError(
            "strict load failed; unknown: [" + ", ".join(unknown) + "]; missing: [" + ", ".join(missing) + "]"
        )

    clashes = [
        f"{n}: checkpoint {incoming[n].shape} vs network {expected[n].shape}"
        for n in sorted(set(incoming) & set(expected))
        if incoming[n].shape != expected[n].shape
    ]
    if clashes:
        raise CheckpointError("shape clash: " + "; ".join(clashes))

    loaded = []
    for name in expected:
        if name in incoming:
            p = expected[name]
            p.data[...] = incoming[name].astype(p.dtype, copy=False)
            loaded.append(name)
    if unknown or missing:
        logger.info("non-strict load: %d loaded, %d ignored, %d left at init", len(loaded), len(unknown), len(missing))
    return LoadResult(loaded=loaded, unknown=unknown, missing=missing)


def network_from_checkpoint(path: PathLike, apply_frozen: bool = False) -> ResNetTP:
    ckpt = read_checkpoint(path)
    net = build(ckpt.config)
    load_checkpoint(net, ckpt, strict=True)
    if apply_frozen:
        set_frozen_groups(net, sorted(ckpt.frozen))
    return net


# --- 3. Snapshots & Diffing ---


def snapshot(net: ResNetTP) -> Dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in net.parameters().items()}


def restore(net: ResNetTP, state: Dict[str, np.ndarray]):
    for name, p in net.parameters().items():
        p.data[...] = state[name]


def diff_checkpoints(a: Checkpoint, b: Checkpoint, names: Optional[Iterable[str]] = None) -> List[str]:
    """Names present in both checkpoints whose tensors differ bitwise."""
    candidates = set(a.tensors) & set(b.tensors)
    if names is not None:
        candidates &= set(names)
    return sorted(
        n for n in candidates
        if a.tensors[n].shape != b.tensors[n].shape or a.tensors[n].tobytes() != b.tensors[n].tobytes()
    )


def group_of(name: str) -> str:
    return name.split(".", 1)[0]
