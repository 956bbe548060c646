"""On-disk formats: binary grids, RFC-4180 CSV, JSON lines, and the run cache.

Binary grid format: a 64-byte little-endian header followed by the payload as
float64, row-major.  Header layout (offsets in bytes):

    0   8s   magic  b"KAMGRID1"
    8   u16  version (1)
    10  u16  ndim
    12  4u32 dims (unused trailing dims zero)
    28  f64  time parameter (tables) or 0
    36  f64  radius parameter (tables) or 0
    44  16s  config content-hash prefix (hex, zero-padded)
    60  4x   padding

Every CSV/JSON artifact carries the config content hash, either as a sidecar
field or in its own metadata block.
"""

import csv
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import BadInputError

_MAGIC = b"KAMGRID1"
_HEADER = struct.Struct("<8sHH4Idd16s4x")
assert _HEADER.size == 64


def content_hash(payload) -> str:
    """Deterministic sha256 hex digest of a JSON-serializable payload."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_grid(path, array, config_hash="", t=0.0, radius=0.0):
    array = np.asarray(array, dtype="<f8")
    dims = list(array.shape) + [0] * (4 - array.ndim)
    if array.ndim > 4:
        raise BadInputError("binary grid supports at most 4 dims")
    header = _HEADER.pack(_MAGIC, 1, array.ndim, *dims, float(t), float(radius),
                          config_hash[:16].encode().ljust(16, b"\0"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(array.tobytes(order="C"))


def read_grid(path):
    with open(path, "rb") as f:
        head = f.read(64)
        magic, version, ndim, d0, d1, d2, d3, t, radius, chash = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise BadInputError(f"{path}: not a kamflow grid file")
        dims = [d for d in (d0, d1, d2, d3)[:ndim]]
        data = np.frombuffer(f.read(), dtype="<f8").reshape(dims)
    meta = {"version": version, "t": t, "radius": radius,
            "config_hash": chash.rstrip(b"\0").decode()}
    return data.copy(), meta


def write_csv(path, rows, header, config_hash=""):
    """RFC-4180-style CSV with LF line endings plus a JSON meta sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["%.17g" % v if isinstance(v, float) else v for v in row])
    _write_sidecar(path, config_hash)


def write_jsonl(path, records, config_hash=""):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_sidecar(path, config_hash)


def write_json(path, payload, config_hash=""):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(payload)
    if config_hash:
        body["config_hash"] = config_hash
    with open(path, "w") as f:
        json.dump(body, f, sort_keys=True, indent=2, default=str)
        f.write("\n")


def _write_sidecar(path, config_hash):
    meta = {"config_hash": config_hash, "format": "kamflow-v1"}
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True)
        f.write("\n")


def cache_root(override=None):
    root = override or os.environ.get("KAMFLOW_CACHE")
    return Path(root) if root else None


class Cache:
    """Content-addressed artifact cache with a lock file per key (single
    writer, concurrent readers)."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def dir(self, key):
        return self.root / key[:24]

    def path(self, key, name):
        return self.dir(key) / name

    def has(self, key, name):
        return self.path(key, name).exists()

    def writer_lock(self, key):
        d = self.root / key[:24]
        d.mkdir(parents=True, exist_ok=True)
        return _FileLock(d / ".lock")


class _FileLock:
    def __init__(self, path):
        self.path = Path(path)
        self.fd = None

    def __enter__(self):
        for _ in range(1000):
            try:
                self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                return self
            except FileExistsError:
                import time
                time.sleep(0.01)
        raise BadInputError(f"could not acquire lock {self.path}")

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)
        return False


def save_solution(directory, name, spec, result, config_hash="", tolerances=None):
    """Binary grid + JSON sidecar for a solved field."""
    directory = Path(directory)
    write_grid(directory / f"{name}.grid", result.u.values, config_hash)
    write_json(directory / f"{name}.json", {
        "system": spec.name,
        "params": spec.params,
        "c": spec.c.tolist(),
        "alpha": result.alpha,
        "grid": spec.geometry.sizes.tolist(),
        "tau": result.tau,
        "tolerances": tolerances or {},
    }, config_hash)


def load_solution(directory, name, spec):
    from .fields import ScalarField
    from .weakkam import WeakKamResult
    directory = Path(directory)
    values, _ = read_grid(directory / f"{name}.grid")
    with open(directory / f"{name}.json") as f:
        meta = json.load(f)
    field = ScalarField(spec.geometry, values, label=f"u_c[{spec.name}]")
    field.alpha = meta["alpha"]
    field.tau = meta["tau"]
    return WeakKamResult(spec, meta["alpha"], field, meta["tau"], [], 0)
