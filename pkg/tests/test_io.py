import json

import numpy as np
import pytest

from basil.cli import main
from basil.report import (ReportError, generate_report, parse_results_csv,
                          summary_table, svg_line_plot)
from basil.runner import (ExperimentConfig, SynthSpec, load_dataset,
                          run_experiment, run_seed, write_results_csv)
from basil.trainer import TrainerConfig

TINY_SYNTH = SynthSpec(classes=3, instances=1, frames=12, dim=4, drift=0.05,
                       noise=0.3, seed=0, class_sep=4.0, instance_spread=0.3)


def tiny_config(run_id="t", **kw):
    kw.setdefault("trainer", TrainerConfig(buffer_capacity=10, n_replay=4,
                                           n_kd=4, mc_eval=4,
                                           learning_rate=0.02))
    kw.setdefault("synth", TINY_SYNTH)
    kw.setdefault("seeds", [0])
    kw.setdefault("hidden_dims", (8,))
    kw.setdefault("classes_per_increment", 1)
    kw.setdefault("offline_epochs", 3)
    return ExperimentConfig(run_id=run_id, **kw)


class TestExperimentConfig:
    def test_requires_exactly_one_source(self):
        with pytest.raises(ValueError):
            ExperimentConfig(run_id="x")
        with pytest.raises(ValueError):
            ExperimentConfig(run_id="x", synth=TINY_SYNTH, data_dir="/tmp/d")

    def test_rejects_duplicate_seeds(self):
        with pytest.raises(ValueError):
            tiny_config(seeds=[1, 1])

    def test_round_trippable_dict(self):
        d = tiny_config().to_dict()
        assert d["ordering"] == "class-instance"
        assert d["trainer"]["mode"] == "basil"
        json.dumps(d)  # must be JSON-serializable


class TestRunSeed:
    def test_rows_and_omega(self, tmp_path):
        cfg = tiny_config()
        rows, omega = run_seed(cfg, load_dataset(cfg), 0,
                               cache_dir=tmp_path)
        assert len(rows) == 3  # one event per class group
        assert rows[-1]["omega_all_running"] == pytest.approx(omega)
        for r in rows:
            assert 0.0 <= r["alpha"] <= 1.0
            assert r["alpha_offline"] > 0.0

    def test_deterministic(self, tmp_path):
        cfg = tiny_config()
        ds = load_dataset(cfg)
        a = run_seed(cfg, ds, 3, cache_dir=tmp_path)
        b = run_seed(cfg, ds, 3, cache_dir=tmp_path)
        assert a == b

    def test_extra_evals_do_not_change_rows(self, tmp_path):
        cfg = tiny_config()
        ds = load_dataset(cfg)
        plain = run_seed(cfg, ds, 1, cache_dir=tmp_path)
        probed = run_seed(cfg, ds, 1, cache_dir=tmp_path, extra_eval_every=3)
        assert plain == probed

    def test_resume_matches_fresh(self, tmp_path):
        cfg = tiny_config()
        ds = load_dataset(cfg)
        ckpt = tmp_path / "run.ckpt"
        fresh = run_seed(cfg, ds, 2, cache_dir=tmp_path,
                         checkpoint_path=ckpt)
        # rewind the sidecar to the second event and resume from there
        sidecar = json.loads((tmp_path / "run.ckpt.events.json").read_text())
        assert sidecar["position"] > 0
        resumed = run_seed(cfg, ds, 2, cache_dir=tmp_path,
                           checkpoint_path=ckpt, resume=True)
        assert resumed == fresh


class TestRunExperiment:
    def test_outputs(self, tmp_path):
        cfg = tiny_config(seeds=[0, 1])
        summary = run_experiment(cfg, tmp_path / "out")
        assert summary["num_seeds"] == 2
        assert set(summary["omega_per_seed"]) == {"0", "1"}
        res = tmp_path / "out" / "results_t.csv"
        assert res.exists()
        config, rows = parse_results_csv(res)
        assert config["run_id"] == "t"
        assert len(rows) == 6
        assert (tmp_path / "out" / "summary_t.json").exists()

    def test_csv_bytes_reproducible(self, tmp_path):
        cfg = tiny_config()
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        assert ((tmp_path / "a" / "results_t.csv").read_bytes()
                == (tmp_path / "b" / "results_t.csv").read_bytes())

    def test_parallel_matches_serial(self, tmp_path):
        serial = run_experiment(tiny_config(seeds=[0, 1]), tmp_path / "s")
        parallel = run_experiment(tiny_config(seeds=[0, 1], jobs=2),
                                  tmp_path / "p")
        assert serial == parallel
        # identical data rows; the config header legitimately differs in jobs
        rows_s = (tmp_path / "s" / "results_t.csv").read_text().splitlines()[1:]
        rows_p = (tmp_path / "p" / "results_t.csv").read_text().splitlines()[1:]
        assert rows_s == rows_p


class TestResultsCsv:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config()
        rows = [{"run_id": "t", "seed": 0, "mode": "basil",
                 "ordering": "class-instance", "event_index": 0,
                 "alpha": 1 / 3, "alpha_offline": 0.75,
                 "omega_all_running": 4 / 9}]
        path = tmp_path / "results_t.csv"
        write_results_csv(path, cfg, rows)
        config, back = parse_results_csv(path)
        assert back[0]["alpha"] == pytest.approx(1 / 3, abs=1e-12)
        assert config["trainer"]["lambda2"] == 0.3

    def test_parse_errors_name_line(self, tmp_path):
        p = tmp_path / "results_x.csv"
        p.write_text("# config: {}\nrun_id,seed,mode,ordering,event_index,"
                     "alpha,alpha_offline,omega_all_running\na,b\n")
        with pytest.raises(ReportError, match="3"):
            parse_results_csv(p)

    def test_missing_header(self, tmp_path):
        p = tmp_path / "results_x.csv"
        p.write_text("just,some,fields\n")
        with pytest.raises(ReportError):
            parse_results_csv(p)


class TestReport:
    def test_generates_files(self, tmp_path):
        run_experiment(tiny_config("r1"), tmp_path / "res")
        cfg2 = tiny_config("r2")
        cfg2.trainer.lambda2 = 0.0
        run_experiment(cfg2, tmp_path / "res")
        written = generate_report(tmp_path / "res", tmp_path / "rep")
        names = {p.name for p in written}
        assert {"summary.txt", "summary.csv", "accuracy_vs_event.svg"} <= names
        text = (tmp_path / "rep" / "summary.txt").read_text()
        assert "r1" in text and "r2" in text

    def test_lambda_sweep_plot(self, tmp_path):
        for i, lam in enumerate((0.0, 0.3)):
            cfg = tiny_config(f"lam{i}")
            cfg.trainer.lambda2 = lam
            run_experiment(cfg, tmp_path / "res")
        written = generate_report(tmp_path / "res", tmp_path / "rep")
        assert any(p.name == "omega_vs_lambda2.svg" for p in written)

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(ReportError, match="no runs"):
            generate_report(tmp_path, tmp_path / "rep")

    def test_svg_plot_well_formed(self):
        svg = svg_line_plot([("a", [0, 1, 2], [0.1, 0.5, 0.2])], "x", "y", "t")
        assert svg.startswith("<svg ") and svg.rstrip().endswith("</svg>")
        assert "polyline" in svg

    def test_summary_table_alignment(self, tmp_path):
        run_experiment(tiny_config("longrunname"), tmp_path / "res")
        results = [parse_results_csv(p)
                   for p in sorted((tmp_path / "res").glob("results_*.csv"))]
        text, csv = summary_table(results)
        lines = text.splitlines()
        assert lines[0].startswith("run_id")
        assert "longrunname" in lines[1]
        assert csv.splitlines()[0] == "run_id,mode,ordering,seeds,omega_mean,omega_std"


class TestCli:
    def synth(self, tmp_path, *extra):
        return main(["synth", "--classes", "3", "--instances", "1",
                     "--frames", "12", "--dim", "4", "--noise", "0.3",
                     "--out", str(tmp_path / "data"), *extra])

    def test_synth_then_run_then_report(self, tmp_path, capsys):
        assert self.synth(tmp_path) == 0
        assert (tmp_path / "data" / "train_manifest.json").exists()
        rc = main(["run", "--data", str(tmp_path / "data"), "--run-id", "cli",
                   "--hidden", "8", "--buffer", "10", "--seed", "0",
                   "--out", str(tmp_path / "res")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "omega_mean" in out
        assert main(["report", "--results", str(tmp_path / "res")]) == 0
        assert (tmp_path / "res" / "report" / "summary.txt").exists()

    def test_synth_refuses_overwrite(self, tmp_path, capsys):
        assert self.synth(tmp_path) == 0
        assert self.synth(tmp_path) == 2
        assert "--force" in capsys.readouterr().err
        assert self.synth(tmp_path, "--force") == 0

    def test_run_with_toml_config(self, tmp_path, capsys):
        cfg = tmp_path / "exp.toml"
        cfg.write_text(
            'run_id = "toml"\nseeds = [0]\nhidden_dims = [8]\n'
            'classes_per_increment = 1\noffline_epochs = 3\n'
            '[synth]\nclasses = 3\ninstances = 1\nframes = 12\ndim = 4\n'
            'noise = 0.3\nclass_sep = 4.0\n'
            '[trainer]\nbuffer_capacity = 10\nn_replay = 4\nn_kd = 4\n')
        rc = main(["run", "--config", str(cfg), "--out", str(tmp_path / "res")])
        assert rc == 0
        assert (tmp_path / "res" / "results_toml.csv").exists()

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "exp.toml"
        cfg.write_text(
            'run_id = "a"\nseeds = [0]\nhidden_dims = [8]\n'
            'classes_per_increment = 1\noffline_epochs = 3\n'
            '[synth]\nclasses = 3\ninstances = 1\nframes = 12\ndim = 4\n'
            'noise = 0.3\n[trainer]\nbuffer_capacity = 10\n')
        rc = main(["run", "--config", str(cfg), "--run-id", "b",
                   "--mode", "finetune", "--out", str(tmp_path / "res")])
        assert rc == 0
        config, _ = parse_results_csv(tmp_path / "res" / "results_b.csv")
        assert config["trainer"]["mode"] == "finetune"

    def test_unknown_config_key_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "exp.toml"
        cfg.write_text('run_id = "x"\nbananas = 1\n')
        assert main(["run", "--config", str(cfg),
                     "--out", str(tmp_path / "res")]) == 2
        assert "bananas" in capsys.readouterr().err

    def test_missing_data_dir_is_usage_error(self, tmp_path):
        assert main(["run", "--data", str(tmp_path / "nope"), "--seed", "0",
                     "--out", str(tmp_path / "res")]) == 2

    def test_bad_flag_usage_exit(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["run"])  # missing required --out
        assert exc.value.code == 2

    def test_report_missing_results_is_fault(self, tmp_path):
        assert main(["report", "--results", str(tmp_path / "void")]) == 1
