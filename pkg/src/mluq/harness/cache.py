"""Versioned binary cache for the offline stage.

The offline spaces are a one-time preprocessing product; this module
persists them in an explicit little-endian layout so a run can skip the
snapshot eigensolves.  Layout: an 8-byte magic string, a uint32 format
version, a uint32 section count, then named sections.  Each section
carries a uint16 name length, the utf-8 name, a uint64 payload length,
the payload's sha256 digest, and the payload itself.  Array payloads
store each array as uint32 rank, uint64 dims, float64 data.
"""

import hashlib
import json
import struct

import numpy as np

from ..errors import ConfigurationError, IntegrityError
from ..gmsfem.solver import SpaceHierarchy
from ..gmsfem.spaces import OfflineSpace
from ..grid import build_grids, build_neighborhoods
from ..randfield import CovarianceSpec, KLModel

_MAGIC = b"MLUQOFC1"
_VERSION = 1


def _pack_arrays(arrays):
    out = [struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def _unpack_arrays(payload, section):
    view = memoryview(payload)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise IntegrityError(f"cache section '{section}' is truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(count):
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n_items = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * n_items), dtype="<f8")
        arrays.append(data.reshape(shape).copy())
    if pos != len(view):
        raise IntegrityError(f"cache section '{section}' has trailing bytes")
    return arrays


def _write_section(fh, name, payload):
    raw = name.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(hashlib.sha256(payload).digest())
    fh.write(payload)


def write_offline_cache(path, hierarchy, compat_key):
    """Persist the hierarchy's offline stage; compat_key guards reloads."""
    grid = hierarchy.grid
    model = hierarchy.kl_model
    meta = {
        "compat": compat_key,
        "nx_fine": grid.nx_fine, "ny_fine": grid.ny_fine,
        "nx_coarse": grid.nx_coarse, "ny_coarse": grid.ny_coarse,
        "sigma2": model.spec.sigma2, "l1": model.spec.l1, "l2": model.spec.l2,
        "level_dims": list(hierarchy.level_dims),
        "snapshot_seed": hierarchy.snapshot_seed,
        "n_snapshot_params": hierarchy.n_snapshot_params,
        "snapshots_per_param": hierarchy.snapshots_per_param,
        "offline_dim": hierarchy.offline_dim,
        "n_neighborhoods": len(hierarchy.offline),
    }
    sections = [
        ("meta", json.dumps(meta, sort_keys=True).encode()),
        ("kle", _pack_arrays([model.eigenvalues, model.eigenfunctions,
                              model.weights])),
        ("fields", _pack_arrays([hierarchy.kappa_bar, hierarchy.weight_bar])),
        ("offline", _pack_arrays(
            [a for sp in hierarchy.offline for a in (sp.eigenvalues, sp.basis)])),
    ]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(sections)))
        for name, payload in sections:
            _write_section(fh, name, payload)


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise IntegrityError(f"cache ends early while reading {what}")
    return data


def read_offline_cache(path, compat_key=None):
    """Load a cache written by write_offline_cache.

    A compat_key, when given, must match the one stored at write time;
    a mismatch means the configuration describes different spaces and the
    cache is refused.  Any digest mismatch raises an integrity error
    naming the offending section.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, "magic")
        if magic != _MAGIC:
            raise IntegrityError(f"{path} is not an offline cache (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise IntegrityError(
                f"unsupported cache version {version} (expected {_VERSION})")
        (n_sections,) = struct.unpack("<I", _read_exact(fh, 4, "section count"))
        sections = {}
        for _ in range(n_sections):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "section name"))
            name = _read_exact(fh, name_len, "section name").decode()
            (size,) = struct.unpack("<Q", _read_exact(fh, 8, f"size of '{name}'"))
            digest = _read_exact(fh, 32, f"digest of '{name}'")
            payload = _read_exact(fh, size, f"payload of '{name}'")
            if hashlib.sha256(payload).digest() != digest:
                raise IntegrityError(f"cache section '{name}' digest mismatch")
            sections[name] = payload

    for required in ("meta", "kle", "fields", "offline"):
        if required not in sections:
            raise IntegrityError(f"cache is missing section '{required}'")
    meta = json.loads(sections["meta"].decode())
    if compat_key is not None and meta.get("compat") != compat_key:
        raise ConfigurationError(
            "offline cache was built for a different grid/covariance/space "
            "configuration; rebuild it")

    grid = build_grids(meta["nx_fine"], meta["ny_fine"],
                       meta["nx_coarse"], meta["ny_coarse"])
    neighborhoods = build_neighborhoods(grid)
    if len(neighborhoods) != meta["n_neighborhoods"]:
        raise IntegrityError("cache neighborhood count does not match the grid")

    eigenvalues, eigenfunctions, weights = _unpack_arrays(sections["kle"], "kle")
    spec = CovarianceSpec(sigma2=meta["sigma2"], l1=meta["l1"], l2=meta["l2"])
    model = KLModel(spec=spec, eigenvalues=eigenvalues,
                    eigenfunctions=eigenfunctions, weights=weights)

    kappa_bar, weight_bar = _unpack_arrays(sections["fields"], "fields")
    flat = _unpack_arrays(sections["offline"], "offline")
    if len(flat) != 2 * len(neighborhoods):
        raise IntegrityError("cache offline section has the wrong array count")
    offline = []
    for i, nbh in enumerate(neighborhoods):
        vals, basis = flat[2 * i], flat[2 * i + 1]
        if basis.shape[0] != nbh.fine_nodes.size:
            raise IntegrityError(
                f"offline basis {i} has {basis.shape[0]} rows for a "
                f"{nbh.fine_nodes.size}-node neighborhood")
        offline.append(OfflineSpace(neighborhood=nbh, basis=basis, eigenvalues=vals))

    return SpaceHierarchy(
        grid=grid, neighborhoods=neighborhoods, kl_model=model, offline=offline,
        kappa_bar=kappa_bar, weight_bar=weight_bar,
        level_dims=tuple(meta["level_dims"]), snapshot_seed=meta["snapshot_seed"],
        n_snapshot_params=meta["n_snapshot_params"],
        snapshots_per_param=meta["snapshots_per_param"],
        offline_dim=meta["offline_dim"])
