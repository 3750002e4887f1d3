"""WMCK checkpoint files.

Layout (little-endian)::

    b"WMCK" | u16 version | 32-byte config digest
    u32 len | config text (key = value)
    u32 len | JSON metadata (epochs, optimizer step counts, run log)
    u32 count | count x [ u16 len | name | u8 rank | u32 extents... | float32 data ]

Blobs hold every network parameter, the sphere centre and radius, and both
Adam moment arrays of every optimizer.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig
from .training import EpochRecord, ModelBundle, build_bundle

MAGIC = b"WMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _blobs(bundle: ModelBundle) -> dict[str, np.ndarray]:
    blobs = {name: p.data for name, p in bundle.named_parameters().items()}
    if bundle.sphere.center is not None:
        blobs["sphere.center"] = bundle.sphere.center
        blobs["sphere.radius"] = np.array([bundle.sphere.radius], dtype=np.float32)
    for key, opt in sorted(bundle.optimizers.items()):
        for i, (m, v) in enumerate(zip(opt.state.first_moment, opt.state.second_moment)):
            blobs[f"adam.{key}.m.{i}"] = m
            blobs[f"adam.{key}.v.{i}"] = v
    return blobs


def dumps(bundle: ModelBundle) -> bytes:
    cfg_text = bundle.config.to_text().encode()
    meta = {
        "epochs_done": bundle.epochs_done,
        "adam_steps": {k: o.state.step_count for k, o in sorted(bundle.optimizers.items())},
        "nu_svdd": bundle.sphere.nu_svdd,
        "nu_prior": bundle.sphere.nu_prior,
        # wall-clock is left out so identical runs give identical bytes
        "run_log": [{k: v for k, v in asdict(r).items() if k != "seconds"} for r in bundle.run_log],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<H", VERSION), bundle.config.digest(),
           struct.pack("<I", len(cfg_text)), cfg_text,
           struct.pack("<I", len(meta_bytes)), meta_bytes]
    blobs = _blobs(bundle)
    out.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def loads(buf: bytes, expected_config: TrainConfig | None = None) -> ModelBundle:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    digest = r.take(32, "config digest")
    (n,) = r.unpack("<I", "config length")
    try:
        cfg = TrainConfig.from_text(r.take(n, "config").decode())
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"embedded config is invalid: {exc}") from None
    if cfg.digest() != digest:
        raise CheckpointDigestError("config digest does not match the embedded config")
    if expected_config is not None and expected_config.digest() != digest:
        raise CheckpointDigestError("checkpoint was trained with a different configuration")
    (n,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(n, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint metadata is invalid: {exc}") from None
    (count,) = r.unpack("<I", "blob count")
    blobs = {}
    for _ in range(count):
        (ln,) = r.unpack("<H", "blob name length")
        name = r.take(ln, "blob name").decode()
        (rank,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{rank}I", f"{name} shape") if rank else ()
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size, f"{name} data"), dtype="<f4").reshape(shape)
        blobs[name] = data.astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes in checkpoint")

    bundle = build_bundle(cfg)
    for name, p in bundle.named_parameters().items():
        if name not in blobs or blobs[name].shape != p.data.shape:
            raise CheckpointError(f"parameter {name} missing or misshapen")
        p.data[...] = blobs[name]
    if "sphere.center" in blobs:
        bundle.sphere.center = blobs["sphere.center"].copy()
        bundle.sphere.radius = float(blobs["sphere.radius"][0])
    try:
        for key, opt in bundle.optimizers.items():
            opt.state.step_count = int(meta["adam_steps"][key])
            for i in range(len(opt.params)):
                opt.state.first_moment[i][...] = blobs[f"adam.{key}.m.{i}"]
                opt.state.second_moment[i][...] = blobs[f"adam.{key}.v.{i}"]
        bundle.epochs_done = int(meta["epochs_done"])
        bundle.run_log = [EpochRecord(**rec) for rec in meta["run_log"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint is missing optimizer or log state ({exc})") from None
    return bundle


def save_checkpoint(bundle: ModelBundle, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(bundle))
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: TrainConfig | None = None) -> ModelBundle:
    return loads(Path(path).read_bytes(), expected_config)
