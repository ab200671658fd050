"""Dataset plumbing: deterministic JSON, binary blobs, and run manifests.

Artifact directories pair a ``*.jsonl`` index with one ``*.bin`` blob file.
Blobs hold little-endian arrays (float32 for point clouds and features,
float64 for poses and actions); the JSONL records carry byte offsets.
A ``manifest.json`` per directory stores the deterministic dataset header
plus an append-only list of run records (the only place timestamps live).
"""

from __future__ import annotations

import hashlib
import json
import os
import time

import numpy as np

MANIFEST_NAME = "manifest.json"


def json_dumps(obj) -> str:
    """Canonical one-line JSON: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class BlobWriter:
    """Sequential little-endian array writer returning (offset, count) handles."""

    def __init__(self, path):
        self.path = path
        self._f = open(path, "wb")
        self._offset = 0

    def put(self, array, dtype):
        a = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
        raw = a.tobytes()
        off = self._offset
        self._f.write(raw)
        self._offset += len(raw)
        return [off, int(a.size)]

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class BlobReader:
    def __init__(self, path):
        with open(path, "rb") as f:
            self._raw = f.read()

    def get(self, handle, dtype, shape=None):
        off, count = handle
        dt = np.dtype(dtype).newbyteorder("<")
        a = np.frombuffer(self._raw, dtype=dt, count=count, offset=off)
        a = a.astype(dt.newbyteorder("="), copy=True)
        return a.reshape(shape) if shape is not None else a


def write_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json_dumps(rec) + "\n")


def read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, header: dict):
    """Create or update the directory manifest, keeping the header deterministic."""
    path = os.path.join(out_dir, MANIFEST_NAME)
    doc = dict(header)
    runs = []
    if os.path.exists(path):
        with open(path) as f:
            runs = json.load(f).get("runs", [])
    doc["runs"] = runs
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    return path


def append_run_record(out_dir, command: str, config: dict, seed, inputs: dict | None = None):
    """Append one run record (command, resolved config, input hashes, timestamps)."""
    path = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(path):
        with open(path) as f:
            doc = json.load(f)
    else:
        doc = {"schema": "artifact/1"}
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs or {},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    doc.setdefault("runs", []).append(record)
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    return path
