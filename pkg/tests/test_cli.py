"""Tests for spec parsing, run orchestration, reports, and the demo."""

import hashlib
import http.server
import json
import os
import threading

import numpy as np
import pytest

from lossnets.cli import (
    DatasetRef,
    SpecError,
    calibrate_and_eval,
    collect_cells,
    main,
    parse_spec,
    rank_row,
    render_report,
    resolve_dataset,
    run_dir_for,
    run_toy_demo,
    win_row,
    worker_count,
)
from lossnets.metrics import MetricId
from lossnets.training import CS_WEIGHT_GRID

TINY_CONFIG = {
    "outer_steps": 6,
    "k_alpha": 2,
    "k_beta": 2,
    "eta_alpha": 1e-3,
    "eta_beta": 1e-3,
    "clip_norm": 1.0,
    "batch_size": 10,
    "eval_every": 3,
    "record_wall_time": False,
    "pretrain_steps": 5,
}


def tiny_spec_payload(**over):
    payload = {
        "datasets": [
            {"kind": "two-cluster", "n_train": 60, "n_test": 20, "n_features": 3, "seed": 7}
        ],
        "metrics": ["mcr"],
        "modes": ["sl-s", "ce"],
        "seeds": [0],
        "output_dir": "runs",
        "config": dict(TINY_CONFIG),
    }
    payload.update(over)
    return payload


def write_spec(tmp_path, **over):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(tiny_spec_payload(**over)))
    return path


class TestSpecParsing:
    def test_minimal_defaults(self, tmp_path):
        spec = parse_spec(
            {"datasets": [{"kind": "two-cluster"}], "metrics": ["auc"], "modes": ["ce"]},
            base_dir=tmp_path,
        )
        assert spec.seeds == [0]
        assert spec.report_style == "ranks"
        assert spec.datasets[0].name == "two-cluster"
        assert spec.datasets[0].params["standardize"] is False
        assert spec.metrics == [MetricId.AUC]
        assert spec.output_dir == tmp_path / "runs"

    def test_path_datasets_resolve_against_base_dir(self, tmp_path):
        spec = parse_spec(
            {
                "datasets": [
                    {"kind": "libsvm", "path": "data/tiny.libsvm"},
                    {"kind": "csv", "path": "other.csv", "target": "y"},
                ],
                "metrics": ["mcr"],
                "modes": ["ce"],
            },
            base_dir=tmp_path,
        )
        assert spec.datasets[0].params["path"] == str(tmp_path / "data" / "tiny.libsvm")
        assert spec.datasets[0].name == "tiny"
        assert spec.datasets[1].params["standardize"] is True

    @pytest.mark.parametrize(
        "mutation, message",
        [
            ({"datasets": []}, "non-empty 'datasets'"),
            ({"datasets": [{"kind": "nope"}]}, "kind"),
            ({"datasets": [{"kind": "libsvm"}]}, "path"),
            ({"datasets": [{"kind": "csv", "path": "x.csv"}]}, "target"),
            ({"datasets": [{"kind": "registry"}]}, "name"),
            ({"metrics": ["mcr", "nope"]}, "bad metric"),
            ({"metrics": []}, "non-empty 'metrics'"),
            ({"modes": ["sgd"]}, "mode must be one of"),
            ({"seeds": [0, True]}, "integers"),
            ({"seeds": "0"}, "integers"),
            ({"config": {"metric": "auc"}}, "per run"),
            ({"config": {"nope": 1}}, "unknown config overrides"),
            ({"config": {"eta_alpha": -1.0}}, "bad config override"),
            ({"report_style": "fancy"}, "report_style"),
            ({"typo": 1}, "unknown spec keys"),
        ],
    )
    def test_rejects_bad_specs(self, tmp_path, mutation, message):
        with pytest.raises(SpecError, match=message):
            parse_spec(tiny_spec_payload(**mutation), base_dir=tmp_path)

    def test_duplicate_dataset_names_rejected(self, tmp_path):
        payload = tiny_spec_payload(
            datasets=[{"kind": "two-cluster"}, {"kind": "two-cluster"}]
        )
        with pytest.raises(SpecError, match="unique"):
            parse_spec(payload, base_dir=tmp_path)

    def test_unsafe_dataset_name_rejected(self, tmp_path):
        payload = tiny_spec_payload(
            datasets=[{"kind": "two-cluster", "name": "../evil"}]
        )
        with pytest.raises(SpecError, match="dataset name"):
            parse_spec(payload, base_dir=tmp_path)


class TestResolveDataset:
    def test_two_cluster_sizes_and_determinism(self):
        ref = DatasetRef(
            kind="two-cluster",
            name="syn",
            params={"n_train": 80, "n_test": 20, "n_features": 4, "seed": 3, "standardize": False},
        )
        train, test = resolve_dataset(ref)
        train2, test2 = resolve_dataset(ref)
        assert len(train) == 80 and len(test) == 20
        assert train.n_features == 4
        assert np.array_equal(train.features, train2.features)
        assert np.array_equal(test.targets, test2.targets)

    def test_standardize_flag(self):
        ref = DatasetRef(
            kind="two-cluster",
            name="syn",
            params={"n_train": 200, "n_test": 50, "standardize": True, "seed": 0},
        )
        train, _ = resolve_dataset(ref)
        assert np.allclose(train.features.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(train.features.std(axis=0), 1.0, atol=1e-12)

    def test_unknown_option_rejected(self):
        ref = DatasetRef(
            kind="two-cluster", name="syn", params={"clusters": 3, "standardize": False}
        )
        with pytest.raises(SpecError, match="unknown two-cluster options"):
            resolve_dataset(ref)


class TestRunGrid:
    def test_end_to_end_grid(self, tmp_path, capsys):
        spec = write_spec(tmp_path)
        assert main(["run", str(spec)]) == 0
        out = tmp_path / "runs"
        assert (out / "results.json").exists()
        assert (out / "report.txt").exists()
        for mode in ("sl-s", "ce"):
            run_dir = run_dir_for(out, "two-cluster", MetricId.MCR, mode, 0)
            assert (run_dir / "config.json").exists()
            assert (run_dir / "trace.csv").exists()
            assert (run_dir / "prediction.ckpt").exists()
            result = json.loads((run_dir / "result.json").read_text())
            assert result["status"] == "ok"
            assert result["gamma"] is not None
            assert 0.0 <= result["test_loss"] <= 1.0
            assert result["config"]["outer_steps"] == 6
            assert result["flags"]["validation_fraction"] == 0.1
        assert (run_dir_for(out, "two-cluster", MetricId.MCR, "sl-s", 0) / "surrogate.ckpt").exists()
        assert not (run_dir_for(out, "two-cluster", MetricId.MCR, "ce", 0) / "surrogate.ckpt").exists()
        sl = json.loads((run_dir_for(out, "two-cluster", MetricId.MCR, "sl-s", 0) / "result.json").read_text())
        assert sl["alpha_steps"] == 6 * 2
        assert sl["beta_steps"] == 6 * 2
        report = capsys.readouterr().out
        assert "== mcr loss (test) ==" in report
        assert "rank" in report

    def test_rerun_is_idempotent_and_force_redoes(self, tmp_path):
        spec = write_spec(tmp_path)
        assert main(["run", str(spec)]) == 0
        trace = run_dir_for(tmp_path / "runs", "two-cluster", MetricId.MCR, "ce", 0) / "trace.csv"
        first = os.stat(trace).st_mtime_ns
        assert main(["run", str(spec)]) == 0
        assert os.stat(trace).st_mtime_ns == first
        payload = json.loads((tmp_path / "runs" / "results.json").read_text())
        assert all(run.get("skipped") for run in payload["runs"])
        assert main(["run", str(spec), "--force"]) == 0
        assert os.stat(trace).st_mtime_ns > first

    def test_failed_run_reports_partial_failure(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,y\noops,1\n")
        spec = write_spec(
            tmp_path,
            datasets=[{"kind": "csv", "path": "bad.csv", "target": "y"}],
            modes=["ce"],
        )
        assert main(["run", str(spec)]) == 1
        run_dir = run_dir_for(tmp_path / "runs", "bad", MetricId.MCR, "ce", 0)
        result = json.loads((run_dir / "result.json").read_text())
        assert result["status"] == "failed"
        assert "oops" in result["error"] or "numeric" in result["error"]
        assert "failed runs:" in capsys.readouterr().out

    def test_failed_run_retried_without_force(self, tmp_path):
        bad = tmp_path / "flaky.csv"
        bad.write_text("a,y\noops,1\n")
        spec = write_spec(
            tmp_path,
            datasets=[{"kind": "csv", "path": "flaky.csv", "target": "y"}],
            modes=["ce"],
        )
        assert main(["run", str(spec)]) == 1
        bad.write_text("a,y\n" + "0.1,1\n-0.3,0\n0.5,1\n-0.8,0\n" * 10)
        assert main(["run", str(spec)]) == 0

    def test_cs_mode_records_tuned_weight(self, tmp_path):
        spec = write_spec(tmp_path, modes=["cs"])
        assert main(["run", str(spec)]) == 0
        run_dir = run_dir_for(tmp_path / "runs", "two-cluster", MetricId.MCR, "cs", 0)
        result = json.loads((run_dir / "result.json").read_text())
        assert result["cs_weight"] in CS_WEIGHT_GRID

    def test_worker_pool_runs_grid(self, tmp_path):
        spec = write_spec(tmp_path, seeds=[0, 1], modes=["ce"])
        assert main(["run", str(spec), "--workers", "2"]) == 0
        for seed in (0, 1):
            run_dir = run_dir_for(tmp_path / "runs", "two-cluster", MetricId.MCR, "ce", seed)
            assert json.loads((run_dir / "result.json").read_text())["status"] == "ok"

    def test_seed_and_out_flags_override_spec(self, tmp_path):
        spec = write_spec(tmp_path, modes=["ce"])
        assert main(["run", str(spec), "--out", str(tmp_path / "alt"), "--seeds", "5"]) == 0
        assert (run_dir_for(tmp_path / "alt", "two-cluster", MetricId.MCR, "ce", 5) / "result.json").exists()

    def test_invalid_spec_exits_2(self, tmp_path):
        missing = tmp_path / "missing.json"
        assert main(["run", str(missing)]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", str(bad)]) == 2
        wrong = tmp_path / "wrong.json"
        wrong.write_text(json.dumps(tiny_spec_payload(modes=["sgd"])))
        assert main(["run", str(wrong)]) == 2

    def test_bad_seeds_flag_exits_2(self, tmp_path):
        spec = write_spec(tmp_path)
        assert main(["run", str(spec), "--seeds", "0,x"]) == 2


class TestWorkerCount:
    def test_flag_beats_env(self, monkeypatch):
        monkeypatch.setenv("LOSSNETS_WORKERS", "4")
        assert worker_count(2) == 2
        assert worker_count(None) == 4

    def test_default_and_bad_env(self, monkeypatch):
        monkeypatch.delenv("LOSSNETS_WORKERS", raising=False)
        assert worker_count(None) == 1
        monkeypatch.setenv("LOSSNETS_WORKERS", "many")
        with pytest.raises(SpecError, match="integer"):
            worker_count(None)


def results_payload(cells, datasets, metrics, modes):
    """Assemble a results payload from {(ds, metric, mode): [losses per seed]}."""
    runs = []
    for (ds, metric, mode), losses in cells.items():
        for seed, loss in enumerate(losses):
            runs.append(
                {
                    "status": "ok",
                    "dataset": {"name": ds, "kind": "two-cluster"},
                    "metric": metric,
                    "mode": mode,
                    "seed": seed,
                    "test_loss": loss,
                }
            )
    return {
        "version": "test",
        "spec": {
            "datasets": [{"name": d} for d in datasets],
            "metrics": metrics,
            "modes": modes,
            "seeds": [0],
            "report_style": "ranks",
        },
        "runs": runs,
    }


class TestReport:
    def test_rank_fixture_with_ties(self):
        payload = results_payload(
            {
                ("d1", "mcr", "a"): [0.1],
                ("d1", "mcr", "b"): [0.2],
                ("d1", "mcr", "c"): [0.2],
            },
            ["d1"],
            ["mcr"],
            ["a", "b", "c"],
        )
        cells = collect_cells(payload["runs"])
        ranks = rank_row(cells, ["d1"], "mcr", ["a", "b", "c"])
        assert ranks == {"a": 1.0, "b": 2.5, "c": 2.5}

    def test_rank_averages_across_datasets(self):
        cells = {
            ("d1", "mcr"): {"a": 0.1, "b": 0.3},
            ("d2", "mcr"): {"a": 0.4, "b": 0.2},
        }
        ranks = rank_row(cells, ["d1", "d2"], "mcr", ["a", "b"])
        assert ranks == {"a": 1.5, "b": 1.5}

    def test_win_counts_share_ties(self):
        cells = {
            ("d1", "f1"): {"a": 0.1, "b": 0.1},
            ("d2", "f1"): {"a": 0.5, "b": 0.2},
        }
        wins = win_row(cells, ["d1", "d2"], "f1", ["a", "b"])
        assert wins == {"a": 1, "b": 2}

    def test_mean_over_seeds(self):
        payload = results_payload(
            {("d1", "mcr", "a"): [0.1, 0.3]}, ["d1"], ["mcr"], ["a"]
        )
        cells = collect_cells(payload["runs"])
        assert cells[("d1", "mcr")]["a"] == pytest.approx(0.2)

    def test_render_marks_lowest_and_handles_missing(self):
        payload = results_payload(
            {
                ("d1", "mcr", "sl-s"): [0.10],
                ("d1", "mcr", "ce"): [0.20],
            },
            ["d1", "d2"],
            ["mcr"],
            ["sl-s", "ce"],
        )
        text = render_report(payload, style="ranks")
        assert "0.1000*" in text
        assert "0.2000" in text
        assert "-" in text  # d2 row has no runs
        text_wins = render_report(payload, style="wins")
        assert "wins" in text_wins

    def test_report_subcommand_round_trip(self, tmp_path, capsys):
        payload = results_payload(
            {("d1", "mcr", "ce"): [0.2], ("d1", "mcr", "sl-s"): [0.1]},
            ["d1"],
            ["mcr"],
            ["ce", "sl-s"],
        )
        results = tmp_path / "results.json"
        results.write_text(json.dumps(payload))
        assert main(["report", str(results), "--style", "wins"]) == 0
        assert (tmp_path / "report.txt").exists()
        assert "wins" in capsys.readouterr().out

    def test_report_rejects_bad_file(self, tmp_path):
        bad = tmp_path / "results.json"
        bad.write_text("[]")
        assert main(["report", str(bad)]) == 2
        assert main(["report", str(tmp_path / "none.json")]) == 2


class TestCalibrateCommand:
    def _finished_run(self, tmp_path, metric="mcr"):
        spec = write_spec(tmp_path, modes=["ce"], metrics=[metric])
        assert main(["run", str(spec)]) == 0
        return run_dir_for(tmp_path / "runs", "two-cluster", MetricId(metric), "ce", 0)

    def test_calibrate_reproduces_recorded_gamma(self, tmp_path, capsys):
        run_dir = self._finished_run(tmp_path)
        recorded = json.loads((run_dir / "result.json").read_text())
        assert main(["calibrate", str(run_dir)]) == 0
        payload = json.loads((run_dir / "calibration.json").read_text())
        assert payload["gamma"] == pytest.approx(recorded["gamma"])
        assert payload["test_loss"] == pytest.approx(recorded["test_loss"])
        again = calibrate_and_eval(run_dir)
        assert again["gamma"] == payload["gamma"]
        assert "gamma" in capsys.readouterr().out

    def test_ranking_metric_skips_calibration(self, tmp_path, capsys):
        run_dir = self._finished_run(tmp_path, metric="auc")
        assert main(["calibrate", str(run_dir)]) == 0
        payload = json.loads((run_dir / "calibration.json").read_text())
        assert payload["gamma"] is None
        assert not payload["calibrated"]
        assert "no threshold" in capsys.readouterr().out

    def test_missing_checkpoint_fails(self, tmp_path):
        run_dir = self._finished_run(tmp_path)
        (run_dir / "prediction.ckpt").unlink()
        assert main(["calibrate", str(run_dir)]) == 1

    def test_missing_config_is_invalid(self, tmp_path):
        assert main(["calibrate", str(tmp_path)]) == 2


class TestToyDemo:
    @pytest.fixture
    def fast_profile(self, monkeypatch):
        import lossnets.cli as cli

        tiny = dict(cli.TOY_PROFILE, outer_steps=20)
        monkeypatch.setattr(cli, "TOY_PROFILE", tiny)
        return tiny

    def test_artifacts_and_shapes(self, tmp_path, fast_profile):
        summary = run_toy_demo(tmp_path / "demo", seed=0)
        for name in (
            "scatter.csv",
            "snapshot-first.csv",
            "snapshot-mid.csv",
            "snapshot-final.csv",
            "snapshots.csv",
            "demo.json",
            "trace.csv",
        ):
            assert (tmp_path / "demo" / name).exists()
        lines = (tmp_path / "demo" / "snapshot-final.csv").read_text().splitlines()
        assert lines[0] == "alpha,true_loss,surrogate_loss,current_alpha"
        assert len(lines) == 1 + 1001
        scatter = (tmp_path / "demo" / "scatter.csv").read_text().splitlines()
        assert scatter[0] == "x,target"
        assert len(scatter) == 1 + 1000
        assert summary["snapshot_iterations"] == [2, 10, 20]
        assert len(summary["snapshots"]) == 3
        current = {float(row.split(",")[3]) for row in lines[1:]}
        assert current == {summary["snapshots"][-1]["alpha"]}

    def test_deterministic_under_seed(self, tmp_path, fast_profile):
        a = run_toy_demo(tmp_path / "a", seed=3)
        b = run_toy_demo(tmp_path / "b", seed=3)
        assert a["final_alpha"] == b["final_alpha"]
        for name in ("snapshot-final.csv", "scatter.csv", "trace.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        c = run_toy_demo(tmp_path / "c", seed=4)
        assert c["final_alpha"] != a["final_alpha"]

    def test_toy_subcommand(self, tmp_path, fast_profile, capsys):
        assert main(["toy", "--out", str(tmp_path / "d"), "--seed", "1"]) == 0
        assert "final train MCR" in capsys.readouterr().out


class _QuietHandler(http.server.SimpleHTTPRequestHandler):
    def log_message(self, *args):
        pass


@pytest.fixture
def file_server(tmp_path_factory):
    root = tmp_path_factory.mktemp("served")
    handler = lambda *a, **kw: _QuietHandler(*a, directory=str(root), **kw)
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield root, f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


class TestFetchCommand:
    def test_fetch_and_report_stats(self, file_server, tmp_path, capsys):
        root, url = file_server
        payload = b"+1 1:1 2:2\n-1 1:-1\n"
        (root / "tiny.libsvm").write_bytes(payload)
        registry = tmp_path / "registry.json"
        registry.write_text(
            json.dumps(
                {
                    "tiny": {
                        "url": f"{url}/tiny.libsvm",
                        "sha256": hashlib.sha256(payload).hexdigest(),
                        "format": "libsvm",
                    }
                }
            )
        )
        cache = tmp_path / "cache"
        code = main(["fetch", "tiny", "--registry", str(registry), "--cache", str(cache)])
        assert code == 0
        out = capsys.readouterr().out
        assert "2 rows" in out
        assert "positive fraction 0.500" in out

    def test_unknown_and_unreachable_fail(self, file_server, tmp_path, capsys):
        root, url = file_server
        registry = tmp_path / "registry.json"
        registry.write_text(
            json.dumps(
                {"gone": {"url": "http://127.0.0.1:9/x", "sha256": None, "format": "libsvm"}}
            )
        )
        assert main(["fetch", "nope", "--registry", str(registry), "--cache", str(tmp_path / "c")]) == 1
        assert main(["fetch", "gone", "--registry", str(registry), "--cache", str(tmp_path / "c")]) == 1
        assert "fetch failed" in capsys.readouterr().err
