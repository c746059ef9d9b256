import json
import os

import numpy as np
import pytest

import config
from main import main
from utils.errors import StorageError, ValidationError
from utils.experiment_config import ExperimentConfig, resolve_workers
from utils.geometry import GeometrySpec
from utils.local_storage_handler import load_table, sha256_file

SMALL = [
    "--set",
    "solver.grid_n=7",
    "--set",
    "normal_op.n_lambda=12",
    "--set",
    "normal_op.n_omega=24",
    "--h",
    "0.2",
]


def only_run(root, prefix):
    runs = [name for name in os.listdir(root) if name.startswith(prefix)]
    assert len(runs) == 1, runs
    return os.path.join(root, runs[0])


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


class TestExperimentConfig:
    def test_empty_text_gives_defaults(self):
        cfg = ExperimentConfig.parse("")
        assert cfg == ExperimentConfig()
        assert cfg.build_geometry() == GeometrySpec()
        assert cfg.normal_op.h == config.H

    def test_sections_comments_and_lists(self):
        text = """
        # lab settings
        [normal_op]
        h = 0.1   # smaller h
        variant = scattering
        damping_check = false

        [sweep]
        h_values = 0.4, 0.2, 0.1, 0.05
        probe_eta = 0.5, -1
        """
        cfg = ExperimentConfig.parse(text)
        assert cfg.normal_op.h == 0.1
        assert cfg.normal_op.variant == "scattering"
        assert cfg.normal_op.damping_check is False
        assert cfg.sweep.h_values == (0.4, 0.2, 0.1, 0.05)
        assert cfg.sweep.probe_eta == (0.5, -1.0)
        op = cfg.build_op_config(workers=2)
        assert op.variant == "scattering" and op.workers == 2 and not op.damping_check

    def test_resolved_text_round_trips(self):
        cfg = ExperimentConfig.parse("[geometry]\ncenter = 2, 0.5, 0\n[solver]\nbalance = 0.5\n")
        again = ExperimentConfig.parse(cfg.to_text())
        assert again == cfg
        assert again.digest() == cfg.digest()
        assert len(cfg.digest()) == 12
        assert cfg.digest() != ExperimentConfig().digest()

    def test_overrides_win(self):
        cfg = ExperimentConfig.parse("[normal_op]\nh = 0.1\n", ["normal_op.h=0.3", "output.root=elsewhere"])
        assert cfg.normal_op.h == 0.3
        assert cfg.output.root == "elsewhere"

    @pytest.mark.parametrize(
        "text",
        [
            "[normal_op]\nhh = 0.1\n",
            "[mystery]\nh = 0.1\n",
            "h = 0.1\n",
            "[normal_op]\njust words\n",
            "[solver]\nbalance = 2\n",
            "[geometry]\ncertificate_samples = 10\n",
            "[sweep]\nh_values = 0.1, x\n",
        ],
    )
    def test_invalid_text(self, text):
        with pytest.raises(ValidationError):
            ExperimentConfig.parse(text)

    def test_malformed_override(self):
        with pytest.raises(ValidationError):
            ExperimentConfig.parse("", ["h=0.1"])

    def test_invalid_values_reach_the_domain_types(self):
        cfg = ExperimentConfig.parse("[normal_op]\nh = 3\n")
        with pytest.raises(ValidationError):
            cfg.build_op_config()

    def test_load(self, tmp_path):
        path = tmp_path / "lab.cfg"
        path.write_text("[phantom]\nwidth = 0.15\n", encoding="utf-8")
        assert ExperimentConfig.load(str(path)).phantom.width == 0.15
        with pytest.raises(StorageError):
            ExperimentConfig.load(str(tmp_path / "missing.cfg"))


class TestResolveWorkers:
    def test_flag_first(self, monkeypatch):
        monkeypatch.setenv(config.WORKERS_ENV, "4")
        assert resolve_workers(3) == 3

    def test_environment(self, monkeypatch):
        monkeypatch.setenv(config.WORKERS_ENV, "4")
        assert resolve_workers() == 4

    def test_default(self, monkeypatch):
        monkeypatch.delenv(config.WORKERS_ENV, raising=False)
        assert resolve_workers() == config.DEFAULT_WORKERS

    def test_invalid(self, monkeypatch):
        with pytest.raises(ValidationError):
            resolve_workers(0)
        monkeypatch.setenv(config.WORKERS_ENV, "many")
        with pytest.raises(ValidationError):
            resolve_workers()


class TestCommandLine:
    def test_certify_writes_a_run_directory(self, run_root):
        assert main(["certify", "--out", run_root]) == 0
        run_dir = only_run(run_root, "certify_")
        certificate = read_json(os.path.join(run_dir, "certificate.json"))
        assert certificate["C0"] == pytest.approx(2.0, abs=1e-9)
        manifest = read_json(os.path.join(run_dir, "manifest.json"))
        assert manifest["subcommand"] == "certify"
        assert manifest["success"] is True
        assert set(manifest["files"]) == {"certificate.json", "resolved_config.txt"}
        for name, digest in manifest["files"].items():
            assert sha256_file(os.path.join(run_dir, name)) == digest
        assert os.path.exists(os.path.join(run_dir, "run.log"))
        assert run_dir.endswith(manifest["config_digest"])

    def test_repeated_runs_do_not_overwrite(self, run_root):
        assert main(["trace", "--out", run_root]) == 0
        assert main(["trace", "--out", run_root]) == 0
        runs = sorted(os.listdir(run_root))
        assert len(runs) == 2
        tables = [load_table(os.path.join(run_root, r, "trace.csv")) for r in runs]
        assert tables[0].equals(tables[1])
        hashes = [
            read_json(os.path.join(run_root, r, "manifest.json"))["files"]["trace.csv"]
            for r in runs
        ]
        assert hashes[0] == hashes[1]

    def test_missing_input_exits_before_writing(self, run_root, tmp_path):
        missing = str(tmp_path / "nothing.fxsg")
        assert main(["reconstruct", "--input", missing, "--out", run_root]) == 4
        assert not os.path.exists(run_root) or not os.listdir(run_root)

    def test_bad_override_exits_with_validation_code(self, run_root):
        assert main(["trace", "--set", "bogus.key=1", "--out", run_root]) == 2

    def test_zero_velocity(self, run_root):
        assert main(["trace", "--v", "0,0,0", "--out", run_root]) == 2

    def test_apply_with_assembly(self, run_root):
        assert main(["apply", "--assemble", "--out", run_root, *SMALL]) == 0
        run_dir = only_run(run_root, "apply_")
        summary = read_json(os.path.join(run_dir, "apply.json"))
        assert summary["sup_norm"] > 0.0
        assert summary["balance"] == 1.0
        assert summary["basis"] == config.SOLVER_BASIS
        assert "assembly_discrepancy" not in summary
        size = os.path.getsize(os.path.join(run_dir, "operator.triplets"))
        assert size == 24 * summary["nnz"]

    def test_unbalanced_assembly_reports_its_discrepancy(self, run_root):
        argv = ["apply", "--assemble", "--set", "solver.balance=0", "--out", run_root, *SMALL]
        assert main(argv) == 0
        summary = read_json(os.path.join(only_run(run_root, "apply_"), "apply.json"))
        assert summary["balance"] == 0.0
        assert np.isfinite(summary["assembly_discrepancy"])
        assert summary["assembly_discrepancy"] >= 0.0

    def test_scattering_apply_records_bundle_diagnostics(self, run_root):
        argv = ["apply", "--variant", "scattering", "--out", run_root, *SMALL]
        assert main(argv) == 0
        summary = read_json(os.path.join(only_run(run_root, "apply_"), "apply.json"))
        assert summary["variant"] == "scattering"
        for key in ("scale_capped", "rays_beyond_lambda0", "lambda0", "max_abs_lambda"):
            assert key in summary
        assert summary["scale_capped"] == 0
        assert summary["lambda0"] == pytest.approx(config.CERTIFICATE_EPSILON)

    def test_phantom_outside_m_exits_before_writing(self, run_root):
        argv = ["apply", "--set", "phantom.center=2.9,0,0", "--out", run_root, *SMALL]
        assert main(argv) == 2
        assert not os.path.exists(run_root) or not os.listdir(run_root)

    @pytest.mark.slow
    def test_forward_then_reconstruct(self, run_root):
        assert main(["forward", "--out", run_root, *SMALL]) == 0
        sinogram = os.path.join(only_run(run_root, "forward_"), "sinogram.fxsg")
        assert main(["reconstruct", "--input", sinogram, "--out", run_root, *SMALL]) == 0
        report = read_json(os.path.join(only_run(run_root, "reconstruct_"), "report.json"))
        assert report["converged"] is True
        assert report["grid_dims"] == "7x7x7"
        assert report["balance"] == 1.0
        assert report["basis"] == config.SOLVER_BASIS

    @pytest.mark.slow
    def test_stability_over_a_small_family(self, run_root):
        argv = ["stability", "--set", "sweep.stability_phantoms=3", "--out", run_root, *SMALL]
        assert main(argv) == 0
        run_dir = only_run(run_root, "stability_")
        summary = read_json(os.path.join(run_dir, "stability.json"))
        assert summary["rows"] == 3
        assert summary["failed"] == 0
        assert 1.0 <= summary["ratio_spread"] <= config.STABILITY_SPREAD_LIMIT
        assert len(load_table(os.path.join(run_dir, "stability.csv"))) == 3

    @pytest.mark.slow
    def test_selftest_passes_and_repeats_exactly(self, run_root):
        assert main(["selftest", "--workers", "1", "--out", run_root]) == 0
        assert main(["selftest", "--workers", "1", "--out", run_root]) == 0
        runs = sorted(os.listdir(run_root))
        assert len(runs) == 2
        hashes = [
            read_json(os.path.join(run_root, r, "manifest.json"))["files"]["selftest.csv"]
            for r in runs
        ]
        assert hashes[0] == hashes[1]
        summary = read_json(os.path.join(run_root, runs[0], "selftest.json"))
        assert summary["passed"] is True
        assert summary["failed"] == []
