# -*- coding: UTF-8 -*-
"""
Checkpoint container
<stem>.bin holds the raw little-endian arrays back to back; <stem>.manifest
is a text index (name, dtype, shape, byte offset, byte count, crc32) with a
JSON metadata header line. A BEST file in the same directory names the stem
of the best checkpoint.
"""

import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .errors import InputError
from .network import RMAFFPSN
from .settings import NetworkConfig

logger = logging.getLogger(__name__)

FORMAT_LINE = "# rmaff-ps checkpoint v1"
COLUMNS = "# name\tdtype\tshape\toffset\tnbytes\tcrc32"
BEST_FILE = "BEST"
OPTIMIZER_PREFIX = "opt."
DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass
class Checkpoint:
    epoch: int
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    val_mae: float = float("nan")
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _stem_paths(path: Union[str, Path]):
    path = Path(path)
    if path.suffix in (".bin", ".manifest"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".bin"), path.with_name(path.name + ".manifest")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _little_endian(value: np.ndarray) -> np.ndarray:
    value = np.asarray(value)
    if value.dtype == np.float64:
        return value.astype("<f8", copy=False)
    return value.astype("<f4", copy=False)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write <path>.bin and <path>.manifest; returns the manifest path"""
    bin_path, manifest_path = _stem_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries = [(name, value) for name, value in ckpt.params.items()]
    entries += [(OPTIMIZER_PREFIX + name, value) for name, value in ckpt.optimizer.items()]

    chunks = []
    lines = [FORMAT_LINE]
    meta = dict(ckpt.meta, epoch=ckpt.epoch, val_mae=ckpt.val_mae, rng_state=ckpt.rng_state)
    lines.append("# meta " + json.dumps(meta, sort_keys=True))
    lines.append(COLUMNS)
    offset = 0
    for name, value in entries:
        arr = np.ascontiguousarray(_little_endian(value))
        raw = arr.tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        lines.append("\t".join([name, arr.dtype.str, shape, str(offset), str(len(raw)), "{:08x}".format(zlib.crc32(raw))]))
        chunks.append(raw)
        offset += len(raw)
    _atomic_write(bin_path, b"".join(chunks))
    _atomic_write(manifest_path, ("\n".join(lines) + "\n").encode("utf-8"))
    logger.debug("Saved checkpoint %s (%s entries, %s bytes)", manifest_path, len(entries), offset)
    return manifest_path


def resolve_checkpoint(path: Union[str, Path]) -> Path:
    """A stem, .bin or .manifest path, or a directory holding a BEST file"""
    path = Path(path)
    if path.is_dir():
        best = path / BEST_FILE
        if not best.exists():
            raise InputError("{} has no {} file".format(path, BEST_FILE))
        return _stem_paths(path / best.read_text(encoding="utf-8").strip())[1]
    manifest = _stem_paths(path)[1]
    if not manifest.exists():
        raise InputError("Checkpoint manifest {} not found".format(manifest))
    return manifest


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    manifest_path = resolve_checkpoint(path)
    bin_path = _stem_paths(manifest_path)[0]
    try:
        blob = bin_path.read_bytes()
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InputError("Cannot read checkpoint {}: {}".format(manifest_path, e)) from e
    if not lines or lines[0] != FORMAT_LINE:
        raise InputError("{} is not a checkpoint manifest".format(manifest_path))

    meta: dict = {}
    params: Dict[str, np.ndarray] = {}
    optimizer: Dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("# meta "):
            meta = json.loads(line[len("# meta "):])
            continue
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise InputError("{}:{}: expected 6 fields, got {}".format(manifest_path, lineno, len(parts)))
        name, dtype, shape_text, offset, nbytes, crc = parts
        if dtype not in DTYPES:
            raise InputError("{}:{}: unsupported dtype {}".format(manifest_path, lineno, dtype))
        offset, nbytes = int(offset), int(nbytes)
        raw = blob[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise InputError("{}: entry {} runs past the end of {}".format(manifest_path, name, bin_path.name))
        if "{:08x}".format(zlib.crc32(raw)) != crc:
            raise InputError("{}: checksum mismatch for {}".format(manifest_path, name))
        shape = tuple(int(d) for d in shape_text.split(",")) if shape_text else ()
        value = np.frombuffer(raw, dtype=DTYPES[dtype]).reshape(shape).astype(DTYPES[dtype].newbyteorder("="))
        if name.startswith(OPTIMIZER_PREFIX):
            optimizer[name[len(OPTIMIZER_PREFIX):]] = value
        else:
            params[name] = value

    epoch = int(meta.pop("epoch", 0))
    val_mae = float(meta.pop("val_mae", float("nan")))
    rng_state = meta.pop("rng_state", {})
    return Checkpoint(epoch, params, optimizer, val_mae, rng_state, meta)


def write_best(directory: Union[str, Path], stem: str) -> None:
    _atomic_write(Path(directory) / BEST_FILE, (stem + "\n").encode("utf-8"))


def best_stem(directory: Union[str, Path]) -> Optional[str]:
    best = Path(directory) / BEST_FILE
    return best.read_text(encoding="utf-8").strip() if best.exists() else None


def network_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the network a checkpoint was trained with and load its state"""
    if "network" not in ckpt.meta:
        raise InputError("Checkpoint carries no network configuration")
    net = RMAFFPSN(NetworkConfig.model_validate(ckpt.meta["network"]))
    net.load_state_dict(ckpt.params)
    return net
