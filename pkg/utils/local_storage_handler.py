"""
Module for storing run outputs in local run directories
Handles tables, JSON reports, binary grid functions and sinograms, and the
per-run manifest with SHA-256 checksums
"""

import hashlib
import json
import os
import struct
from datetime import datetime

import numpy as np
import pandas as pd

import config
from utils.errors import StorageError
from utils.grid import GridFunction, RegularGrid
from utils.logger_setup import setup_logger
from utils.transform import Sinogram

logger = setup_logger()

FORMAT_VERSION = 1
GRID_MAGIC = b"FXGF"
GRID_HEADER = "<4sI3Id3d"
SINOGRAM_MAGIC = b"FXSG"
SINOGRAM_HEADER = "<4sIIIII40s"
HEADER_SIZE = 64
TRIPLET_DTYPE = np.dtype([("row", "<i8"), ("col", "<i8"), ("value", "<f8")])
FLOAT_FORMAT = "%.17g"


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, complex):
        return {"re": value.real, "im": value.imag}
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serialisable")


def dumps(payload):
    """Deterministic JSON text"""
    return json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n"


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class LocalStorageHandler:
    """Owns one run directory; never overwrites an existing run"""

    def __init__(self, subcommand, config_digest, output_root=config.OUTPUT_ROOT):
        """Create <output_root>/<subcommand>_<timestamp>_<digest>, suffixed if taken"""
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        base = os.path.join(output_root, f"{subcommand}_{timestamp}_{config_digest}")
        self.subcommand = subcommand
        self.config_digest = config_digest
        self.files = []
        try:
            os.makedirs(output_root, exist_ok=True)
            run_dir, suffix = base, 0
            while True:
                try:
                    os.makedirs(run_dir)
                    break
                except FileExistsError:
                    suffix += 1
                    run_dir = f"{base}_{suffix}"
        except OSError as e:
            logger.error(f"Error creating run directory under {output_root}: {e}")
            raise StorageError(f"Cannot create run directory: {e}") from e
        self.run_dir = run_dir
        logger.info(f"Run directory: {self.run_dir}")

    def path(self, name):
        return os.path.join(self.run_dir, name)

    def _write_bytes(self, name, payload):
        target = self.path(name)
        try:
            with open(target, "wb") as f:
                f.write(payload)
        except OSError as e:
            logger.error(f"Error writing {target}: {e}")
            raise StorageError(f"Cannot write {target}: {e}") from e
        self.files.append(name)
        logger.debug(f"Wrote {target} ({len(payload)} bytes)")
        return target

    def save_text(self, name, text):
        return self._write_bytes(name, text.encode("utf-8"))

    def save_config(self, text):
        return self.save_text("resolved_config.txt", text)

    def save_json(self, name, payload):
        return self.save_text(name, dumps(payload))

    def save_table(self, name, df):
        """CSV with full float precision"""
        text = df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return self.save_text(name, text)

    def save_grid_function(self, name, gf):
        header = struct.pack(
            GRID_HEADER,
            GRID_MAGIC,
            FORMAT_VERSION,
            *[int(n) for n in gf.grid.dims],
            float(gf.grid.spacing),
            *[float(c) for c in gf.grid.origin],
        ).ljust(HEADER_SIZE, b"\0")
        body = (
            np.ascontiguousarray(gf.values, dtype="<f8").tobytes()
            + np.ascontiguousarray(gf.support_mask, dtype=np.uint8).tobytes()
        )
        target = self._write_bytes(name, header + body)
        self.save_json(
            f"{name}.json",
            {"format": "FXGF", "geometry_hash": gf.geometry_hash, "meta": gf.meta},
        )
        return target

    def save_sinogram(self, name, d):
        per_base = int(d.lambda_nodes.ndim == 2)
        P, L, W = d.shape
        header = struct.pack(
            SINOGRAM_HEADER,
            SINOGRAM_MAGIC,
            FORMAT_VERSION,
            P,
            L,
            W,
            per_base,
            d.geometry_hash.encode("ascii")[:40].ljust(40, b"\0"),
        )
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (d.base_points, d.lambda_nodes, d.omega_angles, d.data)
        )
        target = self._write_bytes(name, header + body)
        self.save_json(
            f"{name}.json",
            {
                "format": "FXSG",
                "base_points": P,
                "lambda_nodes": L,
                "omega_angles": W,
                "per_base_lambda": bool(per_base),
                "geometry_hash": d.geometry_hash,
            },
        )
        return target

    def save_triplets(self, name, assembled):
        """Sparse operator as (row, col, value) records in unknown numbering"""
        coo = assembled.matrix.tocoo()
        records = np.empty(coo.nnz, dtype=TRIPLET_DTYPE)
        records["row"] = coo.row
        records["col"] = coo.col
        records["value"] = coo.data
        target = self._write_bytes(name, records.tobytes())
        self.save_json(
            f"{name}.json",
            {
                "format": "triplets",
                "dtype": [list(item) for item in TRIPLET_DTYPE.descr],
                "shape": list(assembled.matrix.shape),
                "unknowns": assembled.unknowns,
                "grid_dims": list(assembled.grid.dims),
                "balance": assembled.balance,
                "basis": assembled.basis,
                "h": assembled.h,
                "geometry_hash": assembled.geometry_hash,
            },
        )
        return target

    def write_manifest(self, extra=None):
        """manifest.json with a checksum per payload file"""
        entries = {name: sha256_file(self.path(name)) for name in sorted(set(self.files))}
        payload = {
            "subcommand": self.subcommand,
            "config_digest": self.config_digest,
            "files": entries,
        }
        if extra:
            payload.update(extra)
        target = self.path("manifest.json")
        try:
            with open(target, "w", encoding="utf-8") as f:
                f.write(dumps(payload))
        except OSError as e:
            logger.error(f"Error writing manifest: {e}")
            raise StorageError(f"Cannot write {target}: {e}") from e
        logger.info(f"Manifest lists {len(entries)} files")
        return target


def _read_bytes(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        logger.error(f"Error reading {path}: {e}")
        raise StorageError(f"Cannot read {path}: {e}") from e


def _read_sidecar(path):
    sidecar = f"{path}.json"
    if not os.path.exists(sidecar):
        return {}
    try:
        with open(sidecar, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise StorageError(f"Cannot read sidecar {sidecar}: {e}") from e


def load_grid_function(path):
    raw = _read_bytes(path)
    size = struct.calcsize(GRID_HEADER)
    if len(raw) < HEADER_SIZE:
        raise StorageError(f"{path} is too short for a grid function")
    magic, version, nx, ny, nz, spacing, ox, oy, oz = struct.unpack(GRID_HEADER, raw[:size])
    if magic != GRID_MAGIC or version != FORMAT_VERSION:
        raise StorageError(f"{path} is not an FXGF v{FORMAT_VERSION} file")
    n = nx * ny * nz
    if len(raw) != HEADER_SIZE + 9 * n:
        raise StorageError(f"{path} has {len(raw)} bytes, expected {HEADER_SIZE + 9 * n}")
    values = np.frombuffer(raw, dtype="<f8", count=n, offset=HEADER_SIZE)
    mask = np.frombuffer(raw, dtype=np.uint8, count=n, offset=HEADER_SIZE + 8 * n)
    sidecar = _read_sidecar(path)
    grid = RegularGrid(origin=(ox, oy, oz), spacing=spacing, dims=(nx, ny, nz))
    return GridFunction(
        grid,
        values.copy(),
        mask.astype(bool),
        sidecar.get("geometry_hash", ""),
        sidecar.get("meta", {}),
    )


def load_sinogram(path):
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise StorageError(f"{path} is too short for a sinogram")
    magic, version, P, L, W, per_base, hash_bytes = struct.unpack(
        SINOGRAM_HEADER, raw[:HEADER_SIZE]
    )
    if magic != SINOGRAM_MAGIC or version != FORMAT_VERSION:
        raise StorageError(f"{path} is not an FXSG v{FORMAT_VERSION} file")
    n_lambda = P * L if per_base else L
    counts = (3 * P, n_lambda, W, P * L * W)
    if len(raw) != HEADER_SIZE + 8 * sum(counts):
        raise StorageError(f"{path} is truncated or padded")
    arrays, offset = [], HEADER_SIZE
    for count in counts:
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).copy())
        offset += 8 * count
    base_points, lambda_nodes, omega_angles, data = arrays
    return Sinogram(
        base_points=base_points.reshape(P, 3),
        lambda_nodes=lambda_nodes.reshape(P, L) if per_base else lambda_nodes,
        omega_angles=omega_angles,
        data=data.reshape(P, L, W),
        geometry_hash=hash_bytes.rstrip(b"\0").decode("ascii"),
    )


def load_table(path):
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        logger.error(f"Error reading table {path}: {e}")
        raise StorageError(f"Cannot read {path}: {e}") from e
