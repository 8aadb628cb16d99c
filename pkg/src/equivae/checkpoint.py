"""Self-describing binary checkpoints.

Layout::

    b"EQVAECKP" | u32 LE format version | u64 LE header length | JSON header | payload

The header lists every tensor's name, shape and byte offset into the payload,
which holds little-endian float64 data. JSON is written with sorted keys so a
load/save round trip reproduces the file byte for byte.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .evaluate import ClusterMeans

MAGIC = b"EQVAECKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_MEANS_KEY = "__cluster_means__"


class CheckpointError(ValueError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: dict
    architecture: dict
    config: dict
    cluster_means: ClusterMeans = None


def save_checkpoint(path, arrays, architecture, config, cluster_means=None):
    tensors = dict(arrays)
    means_meta = None
    if cluster_means is not None:
        tensors[_MEANS_KEY] = cluster_means.means
        means_meta = {"counts": [int(c) for c in cluster_means.counts], "m": int(cluster_means.m)}
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        blob = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "architecture": architecture,
        "config": config,
        "cluster_means": means_meta,
        "tensors": entries,
        "payload_bytes": offset,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hdr)))
        fh.write(hdr)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise TruncatedCheckpointError(f"{path}: shorter than the checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise TruncatedCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
        entries = header["tensors"]
        payload_bytes = header["payload_bytes"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable header") from exc
    body = raw[start + hlen :]
    if len(body) < payload_bytes:
        raise TruncatedCheckpointError(f"{path}: payload has {len(body)} of {payload_bytes} bytes")
    if len(body) > payload_bytes:
        raise CorruptHeaderError(f"{path}: {len(body) - payload_bytes} trailing bytes")
    arrays = {}
    for e in entries:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["nbytes"] != 8 * count or e["offset"] + e["nbytes"] > payload_bytes:
            raise CorruptHeaderError(f"{path}: inconsistent entry for {e['name']}")
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"]).astype(np.float64)
        arrays[e["name"]] = arr.reshape(tuple(e["shape"]))
    means = None
    if header.get("cluster_means") is not None:
        meta = header["cluster_means"]
        means = ClusterMeans(arrays.pop(_MEANS_KEY), np.asarray(meta["counts"], dtype=np.int64), int(meta["m"]))
    return Checkpoint(arrays, header.get("architecture", {}), header.get("config", {}), means)
