"""Named parameter storage, initialisation and the on-disk model bundle.

A bundle is a directory holding ``arch.json`` (format version, architecture
id, hyperparameters, parameter manifest, CRC32) and ``weights.bin`` (all
parameter values concatenated in manifest order as little-endian float64).
"""

from __future__ import annotations

import json
import os
import zlib
from pathlib import Path

import numpy as np

from .tensor import Tensor

FORMAT_VERSION = 1


class BundleError(ValueError):
    """Base class for model bundle load failures."""


class FormatVersionError(BundleError):
    pass


class ChecksumError(BundleError):
    pass


class ByteCountError(BundleError):
    pass


class ShapeMismatchError(BundleError):
    pass


def make_rng(seed):
    """All stochastic code draws from numpy's PCG64 generator seeded with a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParameterSet:
    """Ordered collection of trainable tensors plus their Adam moments.

    Entries added with ``trainable=False`` (fixed feature normalisation
    statistics) are persisted but never updated by the optimiser.
    """

    def __init__(self):
        self._values = {}
        self._moments = {}
        self._trainable = {}

    def add(self, name, value, trainable=True):
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self._values[name] = Tensor(value, requires_grad=trainable)
        self._moments[name] = (np.zeros_like(value), np.zeros_like(value))
        self._trainable[name] = trainable
        return self._values[name]

    def __getitem__(self, name):
        return self._values[name]

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def names(self):
        return list(self._values)

    def items(self):
        return list(self._values.items())

    def trainable(self, name):
        return self._trainable[name]

    def moments(self, name):
        return self._moments[name]

    def set_moments(self, name, m, v):
        self._moments[name] = (m, v)

    def zero_grad(self):
        for t in self._values.values():
            t.grad = None

    def count(self):
        return sum(t.size for n, t in self._values.items() if self._trainable[n])

    def copy(self):
        other = ParameterSet()
        for name, t in self._values.items():
            other.add(name, t.data.copy(), self._trainable[name])
        return other


def save_params(params, directory, architecture, hyperparameters):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    chunks = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset,
                         "trainable": params.trainable(name)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    arch = {
        "format_version": FORMAT_VERSION,
        "architecture": architecture,
        "hyperparameters": hyperparameters,
        "parameters": manifest,
        "weights_bytes": len(blob),
        "weights_crc32": zlib.crc32(blob),
    }
    tmp = directory / "weights.bin.tmp"
    tmp.write_bytes(blob)
    os.replace(tmp, directory / "weights.bin")
    (directory / "arch.json").write_text(json.dumps(arch, indent=2) + "\n", encoding="utf-8")


def load_params(directory, expected=None):
    """Read a bundle; returns (ParameterSet, arch dict).

    ``expected`` may be a freshly built ParameterSet for the same
    architecture; every stored shape is then validated against it.
    """
    directory = Path(directory)
    arch = json.loads((directory / "arch.json").read_text(encoding="utf-8"))
    if arch.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"unknown bundle format version {arch.get('format_version')!r}")
    entries = arch["parameters"]
    ends = [e["offset"] for e in entries[1:]] + [arch["weights_bytes"]]
    running = 0
    for e, end in zip(entries, ends):
        nbytes = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if e["offset"] != running or end - e["offset"] != nbytes:
            raise ShapeMismatchError(
                f"parameter {e['name']!r}: shape {e['shape']} needs {nbytes} bytes but the "
                f"manifest reserves {end - e['offset']}")
        running += nbytes
    blob = (directory / "weights.bin").read_bytes()
    if len(blob) != running:
        raise ByteCountError(f"weights.bin holds {len(blob)} bytes, expected {running}")
    if zlib.crc32(blob) != arch["weights_crc32"]:
        raise ChecksumError(f"weights.bin CRC32 {zlib.crc32(blob)} != recorded {arch['weights_crc32']}")
    params = ParameterSet()
    for e in entries:
        shape = tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        value = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(shape)
        params.add(e["name"], value.astype(np.float64), e.get("trainable", True))
    if expected is not None:
        if expected.names() != params.names():
            missing = set(expected.names()) ^ set(params.names())
            raise ShapeMismatchError(f"parameter names differ from architecture: {sorted(missing)}")
        for name, t in expected.items():
            if params[name].shape != t.shape:
                raise ShapeMismatchError(
                    f"parameter {name!r}: stored shape {params[name].shape} != architecture shape {t.shape}")
    return params, arch
