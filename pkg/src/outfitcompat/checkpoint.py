"""Binary checkpoint container.

Layout::

    8 bytes   magic  b"OCMPCKPT"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length in bytes, uint64 little-endian
    n bytes   header, UTF-8 JSON with sorted keys
    ...       payload: float64 little-endian arrays, back to back

The header holds ``config`` (the :class:`ModelConfig` fields), ``cov_eps``,
``extra`` (free-form metadata such as training hyperparameters) and
``arrays``, an ordered list of ``{name, shape, offset}`` records.  Array
names are ``param/<name>``, ``state/<name>`` and ``cov/<j>``.  Nothing
time- or path-dependent is written, so equal models give equal bytes.
"""

import json
import struct

import numpy as np

from .model import CompatModel, ModelConfig
from .objective import CovarianceState

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CheckpointError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointShapeError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]

MAGIC = b"OCMPCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    """Unrecognized magic, unsupported version or unreadable header."""


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def checkpoint_bytes(model, covs, extra=None):
    arrays = [(f"param/{k}", v) for k, v in model.params.items()]
    arrays += [(f"state/{k}", v) for k, v in model.state.items()]
    arrays += [(f"cov/{j}", m) for j, m in enumerate(covs.matrices)]
    records, chunks, offset = [], [], 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        records.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "config": model.config.to_dict(),
        "cov_eps": covs.eps,
        "extra": extra or {},
        "arrays": records,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(path, model, covs, extra=None):
    """Write ``model`` and ``covs`` to ``path``."""
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, covs, extra))


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, covs, extra)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        records = header["arrays"]
        cov_eps = float(header["cov_eps"])
        payload_bytes = int(header["payload_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointVersionError(f"{path}: unreadable header ({exc})") from exc
    payload = blob[start + hlen:]
    if len(payload) < payload_bytes:
        raise CheckpointTruncatedError(
            f"{path}: payload has {len(payload)} bytes, expected {payload_bytes}")

    arrays = {}
    for rec in records:
        shape = tuple(rec["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        off = rec["offset"]
        if off + n > len(payload):
            raise CheckpointTruncatedError(f"{path}: array {rec['name']} cut short")
        arrays[rec["name"]] = np.frombuffer(payload, dtype="<f8", count=n // 8,
                                            offset=off).reshape(shape).astype(np.float64)

    ref = CompatModel.init(config, seed=0)
    params, state = {}, {}
    for group, target, expected in (("param", params, ref.params), ("state", state, ref.state)):
        for name, ref_arr in expected.items():
            key = f"{group}/{name}"
            if key not in arrays:
                raise CheckpointShapeError(f"{path}: missing array {key}")
            if arrays[key].shape != ref_arr.shape:
                raise CheckpointShapeError(
                    f"{path}: {key} has shape {arrays[key].shape}, config implies {ref_arr.shape}")
            target[name] = arrays[key]
    model = CompatModel(config, params, state)
    dims = model.metric_input_dims()
    mats = []
    for j, q in enumerate(dims):
        m = arrays.get(f"cov/{j}")
        if m is None or m.shape != (q, q):
            raise CheckpointShapeError(
                f"{path}: covariance {j} missing or not {q}x{q}")
        mats.append(m)
    return model, CovarianceState(mats, eps=cov_eps), header.get("extra", {})
