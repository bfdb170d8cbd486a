"""On-disk formats: scene directories, training corpora, observation CSVs.

Binary payloads are little-endian 32-bit floats with versioned headers, so
re-running any generator overwrites byte-identically.  Masks serialize as
bitsets over the shared flat-index convention (LSB-first within each byte).
Scene metadata is a flat `key = value` text file.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .core import FiberObservations, GridSpec, RadioMapTensor, SensingMask, Slf
from .simulate import Scene

__all__ = [
    "StorageError",
    "write_scene",
    "read_scene_observations",
    "read_scene_tensor",
    "read_scene_factors",
    "read_metadata",
    "write_corpus",
    "read_corpus",
    "load_observation_csv",
    "write_observation_csv",
    "write_pgm",
    "write_f32",
    "read_f32",
]

_CORPUS_MAGIC = b"SCCORP\x00\x00"
_FORMAT_VERSION = 1

SCENE_FILES = ("metadata.txt", "tensor.f32", "fibers.f32", "mask.bin", "factors.f32")


class StorageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# primitives


def write_f32(path, arr: np.ndarray) -> None:
    np.asarray(arr, dtype="<f4").tofile(path)


def read_f32(path, shape: tuple) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise StorageError(f"{path}: expected {expected} float32 values, found {arr.size}")
    return arr.reshape(shape).astype(np.float64)


def _mask_to_bits(mask: SensingMask) -> bytes:
    g = mask.grid
    bits = np.zeros(g.n_cells, dtype=np.uint8)
    bits[mask.cols] = 1
    return np.packbits(bits, bitorder="little").tobytes()


def _mask_from_bits(data: bytes, grid: GridSpec) -> SensingMask:
    need = (grid.n_cells + 7) // 8
    if len(data) != need:
        raise StorageError(f"mask bitset has {len(data)} bytes, expected {need}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: grid.n_cells]
    cells = [grid.cell_of(int(q)) for q in np.nonzero(bits)[0]]
    return SensingMask(grid, tuple(cells))


# ---------------------------------------------------------------------------
# metadata


def write_metadata(path, entries: dict) -> None:
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {value}\n")


def read_metadata(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise StorageError(f"{path}: malformed metadata line {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# scenes


def write_scene(scene: Scene, directory) -> None:
    """Write the five scene files: metadata, ground-truth tensor, observed
    fibers, mask bitset, and factor ground truth (C then S)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = scene.config
    g = cfg.grid
    meta = {
        "schema": "speccart-scene-v1",
        "rows": g.rows,
        "cols": g.cols,
        "bins": g.bins,
        "emitters": cfg.n_emitters,
        "rho": repr(cfg.sample_fraction),
        "seed": cfg.seed,
        "sparse_occupancy": cfg.sparse_occupancy,
        "gamma_range": f"{cfg.gamma_range[0]}:{cfg.gamma_range[1]}",
        "eta_range": f"{cfg.eta_range[0]}:{cfg.eta_range[1]}",
        "dcorr_range": f"{cfg.dcorr_range[0]}:{cfg.dcorr_range[1]}",
        "psd_extra_bands": cfg.psd_extra_bands,
        "snr_db": "" if cfg.snr_db is None else repr(cfg.snr_db),
        "n_obs": len(scene.observations.mask),
        "emitter_cells": ";".join(f"{p.location[0]}:{p.location[1]}" for p in scene.emitters),
        "noise_frob": "" if scene.noise is None else repr(float(np.linalg.norm(scene.noise))),
        "masked_noise_frob": ""
        if scene.noise is None
        else repr(
            float(
                np.sqrt(
                    sum(
                        (scene.noise[i, j, :] ** 2).sum()
                        for i, j in scene.observations.mask.cells
                    )
                )
            )
        ),
    }
    write_metadata(d / "metadata.txt", meta)
    write_f32(d / "tensor.f32", scene.tensor.values)
    write_f32(d / "fibers.f32", scene.observations.fibers)
    (d / "mask.bin").write_bytes(_mask_to_bits(scene.observations.mask))
    write_f32(
        d / "factors.f32",
        np.concatenate([scene.factors.C.ravel(), scene.factors.S.ravel()]),
    )


def _scene_grid(meta: dict) -> GridSpec:
    return GridSpec(int(meta["rows"]), int(meta["cols"]), int(meta["bins"]))


def read_scene_observations(directory) -> FiberObservations:
    d = Path(directory)
    meta = read_metadata(d / "metadata.txt")
    grid = _scene_grid(meta)
    mask = _mask_from_bits((d / "mask.bin").read_bytes(), grid)
    fibers = read_f32(d / "fibers.f32", (len(mask), grid.bins))
    return FiberObservations(mask, fibers)


def read_scene_tensor(directory) -> RadioMapTensor:
    d = Path(directory)
    meta = read_metadata(d / "metadata.txt")
    grid = _scene_grid(meta)
    return RadioMapTensor(grid, read_f32(d / "tensor.f32", (grid.rows, grid.cols, grid.bins)))


def read_scene_factors(directory) -> tuple[np.ndarray, np.ndarray]:
    d = Path(directory)
    meta = read_metadata(d / "metadata.txt")
    grid = _scene_grid(meta)
    R = int(meta["emitters"])
    flat = np.fromfile(d / "factors.f32", dtype="<f4").astype(np.float64)
    nc = grid.bins * R
    ns = R * grid.n_cells
    if flat.size != nc + ns:
        raise StorageError(f"factors.f32 holds {flat.size} values, expected {nc + ns}")
    return flat[:nc].reshape(grid.bins, R), flat[nc:].reshape(R, grid.n_cells)


# ---------------------------------------------------------------------------
# training corpora


def write_corpus(path, samples: Iterable[tuple[SensingMask, Slf]]) -> int:
    """Stream training pairs to disk; returns the record count.

    Record layout: u32 rows, u32 cols, rows*cols float32 (row-major map),
    then the mask bitset.
    """
    count = 0
    body = io.BytesIO()
    for mask, slf in samples:
        body.write(struct.pack("<II", slf.rows, slf.cols))
        body.write(np.asarray(slf.values, dtype="<f4").tobytes())
        body.write(_mask_to_bits(mask))
        count += 1
    with open(path, "wb") as fh:
        fh.write(_CORPUS_MAGIC)
        fh.write(struct.pack("<IQ", _FORMAT_VERSION, count))
        fh.write(body.getvalue())
    return count


def read_corpus(path, bins: int = 1) -> Iterator[tuple[SensingMask, Slf]]:
    """Yield (mask, SLF) pairs back from :func:`write_corpus` output.

    `bins` sets the spectral size of the grid attached to the masks; the
    corpus itself is purely spatial.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(_CORPUS_MAGIC) + 12 or data[: len(_CORPUS_MAGIC)] != _CORPUS_MAGIC:
        raise StorageError(f"{path}: not a corpus file")
    offset = len(_CORPUS_MAGIC)
    version, count = struct.unpack_from("<IQ", data, offset)
    offset += 12
    if version != _FORMAT_VERSION:
        raise StorageError(f"{path}: unsupported corpus version {version}")
    for n in range(count):
        if len(data) - offset < 8:
            raise StorageError(f"{path}: truncated at record {n}")
        rows, cols = struct.unpack_from("<II", data, offset)
        offset += 8
        nv = rows * cols
        nb = (nv + 7) // 8
        if len(data) - offset < 4 * nv + nb:
            raise StorageError(f"{path}: truncated at record {n}")
        values = np.frombuffer(data, dtype="<f4", count=nv, offset=offset).astype(np.float64)
        offset += 4 * nv
        grid = GridSpec(rows, cols, bins)
        mask = _mask_from_bits(data[offset : offset + nb], grid)
        offset += nb
        yield mask, Slf(rows, cols, values.reshape(rows, cols))
    if offset != len(data):
        raise StorageError(f"{path}: {len(data) - offset} trailing bytes")


# ---------------------------------------------------------------------------
# external observations


def load_observation_csv(path) -> FiberObservations:
    """Read sensor measurements from a (i, j, k, value) CSV.

    The first row must be a dims header `rows,cols,bins,#dims`; indices are
    0-based, and every sensed cell must supply all `bins` values (sensors
    report whole fibers).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 4 or header[3].strip() != "#dims":
            raise StorageError(f"{path}: first row must be 'rows,cols,bins,#dims'")
        rows, cols, bins = (int(v) for v in header[:3])
        grid = GridSpec(rows, cols, bins)
        values: dict = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                i, j, k, val = int(row[0]), int(row[1]), int(row[2]), float(row[3])
            except (ValueError, IndexError) as err:
                raise StorageError(f"{path}:{lineno}: malformed row {row!r}") from err
            if not (0 <= i < rows and 0 <= j < cols and 0 <= k < bins):
                raise StorageError(f"{path}:{lineno}: index ({i},{j},{k}) out of bounds")
            values.setdefault((i, j), {})[k] = val
    if not values:
        raise StorageError(f"{path}: no observations")
    for cell, fiber in values.items():
        if len(fiber) != bins:
            raise StorageError(
                f"{path}: cell {cell} has {len(fiber)} of {bins} bins; sensors report whole fibers"
            )
    mask = SensingMask(grid, tuple(values.keys()))
    fibers = np.array([[values[cell][k] for k in range(bins)] for cell in mask.cells])
    return FiberObservations(mask, fibers)


def write_observation_csv(path, obs: FiberObservations) -> None:
    g = obs.grid
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([g.rows, g.cols, g.bins, "#dims"])
        for m, (i, j) in enumerate(obs.mask.cells):
            for k in range(g.bins):
                writer.writerow([i, j, k, repr(float(obs.fibers[m, k]))])


# ---------------------------------------------------------------------------
# images


def write_pgm(path, values: np.ndarray) -> None:
    """Binary PGM of a 2-D array, scaled to its own max (lossy; pair with
    the raw float sidecar for exact values)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PGM export needs a 2-D array")
    peak = arr.max()
    scaled = np.zeros_like(arr) if peak <= 0 else arr / peak * 255.0
    img = np.clip(np.round(scaled), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
