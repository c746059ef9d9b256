import json
import os

import numpy as np
import pandas as pd
import pytest

from utils.errors import StorageError
from utils.geometry import trace_geodesic
from utils.grid import GridFunction
from utils.inversion import SolveReport
from utils.local_storage_handler import (
    HEADER_SIZE,
    TRIPLET_DTYPE,
    LocalStorageHandler,
    dumps,
    load_grid_function,
    load_sinogram,
    load_table,
    sha256_file,
)
from utils.normal_operator import assemble_A, quadrature_sinogram
from utils.output_handler import (
    REPORT_COLUMNS,
    ellipticity_frame,
    ellipticity_summary,
    error_decay_order,
    report_frame,
    standardize_dataframe,
    trace_frame,
)
from utils.symbols import SymbolSample


@pytest.fixture
def storage(run_root):
    return LocalStorageHandler("test", "abc123def456", run_root)


class TestRunDirectory:
    def test_name_and_collision_suffix(self, run_root):
        first = LocalStorageHandler("trace", "0123456789ab", run_root)
        second = LocalStorageHandler("trace", "0123456789ab", run_root)
        assert os.path.basename(first.run_dir).startswith("trace_")
        assert first.run_dir.endswith("0123456789ab")
        assert second.run_dir != first.run_dir
        assert os.path.isdir(second.run_dir)

    def test_manifest_hashes_every_payload(self, storage):
        storage.save_json("a.json", {"b": 1, "a": np.float64(2.5)})
        storage.save_text("notes.txt", "hello\n")
        with open(storage.write_manifest({"success": True}), encoding="utf-8") as fh:
            manifest = json.load(fh)
        assert manifest["files"] == {
            "a.json": sha256_file(storage.path("a.json")),
            "notes.txt": sha256_file(storage.path("notes.txt")),
        }
        assert manifest["config_digest"] == "abc123def456"
        assert manifest["success"] is True

    def test_json_is_deterministic(self):
        assert dumps({"b": 1, "a": 1j}) == dumps({"a": complex(0, 1), "b": 1})
        assert json.loads(dumps({"z": 1j}))["z"] == {"re": 0.0, "im": 1.0}

    def test_write_failure(self, storage):
        with pytest.raises(StorageError):
            storage.save_text(os.path.join("missing_dir", "x.txt"), "x")


class TestBinaryFormats:
    def test_grid_function(self, storage, geometry, small_grid, rng):
        mask = small_grid.mask(geometry, "M")
        values = np.where(mask, rng.normal(size=small_grid.dims), 0.0)
        gf = GridFunction(small_grid, values, mask, geometry.geometry_hash(), {"kind": "test"})
        path = storage.save_grid_function("f.fxgf", gf)
        assert os.path.getsize(path) == HEADER_SIZE + 9 * small_grid.size
        loaded = load_grid_function(path)
        np.testing.assert_array_equal(loaded.values, gf.values)
        np.testing.assert_array_equal(loaded.support_mask, mask)
        assert loaded.grid.dims == tuple(small_grid.dims)
        assert loaded.grid.spacing == small_grid.spacing
        assert loaded.geometry_hash == geometry.geometry_hash()
        assert loaded.meta == {"kind": "test"}

    def test_sinogram_with_per_point_nodes(self, storage, geometry, bump, scattering_config):
        base = geometry.c_M + np.array([[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]])
        d = quadrature_sinogram(scattering_config, geometry, bump, base)
        loaded = load_sinogram(storage.save_sinogram("d.fxsg", d))
        np.testing.assert_array_equal(loaded.data, d.data)
        np.testing.assert_array_equal(loaded.lambda_nodes, d.lambda_nodes)
        np.testing.assert_array_equal(loaded.base_points, d.base_points)
        assert loaded.geometry_hash == geometry.geometry_hash()

    def test_triplets(self, storage, geometry, op_config, small_grid):
        assembled = assemble_A(op_config, geometry, small_grid, balance=1.0)
        path = storage.save_triplets("A.triplets", assembled)
        records = np.fromfile(path, dtype=TRIPLET_DTYPE)
        assert records.size == assembled.matrix.nnz
        dense = np.zeros(assembled.matrix.shape)
        dense[records["row"], records["col"]] = records["value"]
        np.testing.assert_array_equal(dense, assembled.matrix.toarray())
        with open(f"{path}.json", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        assert sidecar["shape"] == [assembled.n, assembled.n]
        assert sidecar["unknowns"] == assembled.unknowns.tolist()

    def test_missing_file(self, tmp_path):
        with pytest.raises(StorageError):
            load_sinogram(str(tmp_path / "absent.fxsg"))
        with pytest.raises(StorageError):
            load_grid_function(str(tmp_path / "absent.fxgf"))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.fxsg"
        path.write_bytes(b"NOPE" + b"\0" * 200)
        with pytest.raises(StorageError):
            load_sinogram(str(path))

    def test_truncated_grid_function(self, storage, geometry, small_grid):
        path = storage.save_grid_function("g.fxgf", GridFunction.zeros(geometry, small_grid))
        with open(path, "rb") as f:
            raw = f.read()
        with open(path, "wb") as f:
            f.write(raw[:-10])
        with pytest.raises(StorageError):
            load_grid_function(path)


class TestTables:
    def test_table_keeps_full_precision(self, storage):
        df = pd.DataFrame({"value": [np.pi, 1.0 / 3.0]})
        loaded = load_table(storage.save_table("t.csv", df))
        assert loaded["value"].tolist() == [np.pi, 1.0 / 3.0]

    def test_standardize_orders_and_fills(self):
        df = standardize_dataframe(pd.DataFrame({"extra": [1], "b": [2]}), ["a", "b"])
        assert list(df.columns) == ["a", "b", "extra"]
        assert df["a"].isna().all()

    def test_trace_frame(self, geometry):
        trace = trace_geodesic(geometry, geometry.c_M, np.array([0.0, 1.0, 0.0]))
        df = trace_frame(trace, geometry)
        assert len(df) == trace.t.size
        row = df.loc[df["t"].abs().idxmin()]
        assert row["gamma2_1"] == pytest.approx(0.0, abs=1e-12)

    def test_ellipticity_summary(self):
        samples = [
            SymbolSample((2.0, 0.0, 0.0), xi, (0.0, 0.0), 0.0, complex(1.0 / (1.0 + xi)))
            for xi in (0.0, 1.0, 10.0)
        ]
        df = ellipticity_frame(samples)
        assert df["radius"].tolist() == [0.0, 1.0, 10.0]
        summary = ellipticity_summary(df)
        assert len(summary) == 3

    def test_error_decay_order(self):
        reports = [
            SolveReport(h=h, l2_error=0.3 * h, converged=True) for h in (0.4, 0.2, 0.1)
        ]
        reports.append(SolveReport(h=0.05, converged=False))
        df = report_frame(reports)
        assert list(df.columns[: len(REPORT_COLUMNS)]) == REPORT_COLUMNS
        assert error_decay_order(df) == pytest.approx(1.0)
