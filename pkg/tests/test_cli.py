import json

import numpy as np
import pytest

from ldnets import config as C
from ldnets.cli import main
from ldnets.errors import ConfigError
from ldnets.fcnn import init_glorot
from ldnets.model import LDNet


@pytest.fixture(scope="module")
def tc1a(tmp_path_factory):
    d = tmp_path_factory.mktemp("tc1a")
    assert main(["gen-data", "--case", "tc1a", "--n", "3", "--seed", "7", "--out", str(d / "train")]) == 0
    assert main(["gen-data", "--case", "tc1a", "--n", "2", "--seed", "7", "--first-index", "100", "--out", str(d / "test")]) == 0
    return d


def train(d, out, *extra):
    return main(["train", "--dataset", str(d / "train"), "--out", str(out), *extra])


class TestConfig:
    def test_defaults_explicit(self):
        cfg = C.resolve("train", {"dataset": "d", "out": "o"})
        assert cfg["schedule"]["adam_epochs"] == 200 and cfg["schedule"]["bfgs_epochs"] == 500
        assert cfg["model"]["dyn_hidden"] == [9, 9] and cfg["loss"]["alpha_dyn"] == 0.0

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            C.resolve("train", {"dataset": "d", "out": "o", "modle": {}})

    def test_overrides(self):
        tree = C.apply_overrides({}, ["model.dt=0.1", "model.dyn_hidden=[3,4]", "out=x"])
        assert tree == {"model": {"dt": 0.1, "dyn_hidden": [3, 4]}, "out": "x"}

    def test_hash_stable(self):
        a = C.resolve("train", {"dataset": "d", "out": "o"})
        b = C.resolve("train", {"out": "o", "dataset": "d"})
        assert C.config_hash(a) == C.config_hash(b)
        assert C.config_hash(a) != C.config_hash(C.resolve("train", {"dataset": "d", "out": "p"}))

    def test_gen_data_params_filled(self):
        cfg = C.resolve("gen_data", {"case": "tc3", "splits": {"train": {"n_samples": 1, "out": "x"}}})
        assert cfg["params"]["stimulus"]["amplitude"] == 1.0 and cfg["params"]["nx"] == 800


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        assert main(["train", "--dataset", "x", "--out", str(tmp_path), "--set", "model.dt=-1"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json")]) == 2

    def test_unknown_case(self, tmp_path):
        assert main(["gen-data", "--case", "tc9", "--n", "1", "--seed", "0", "--out", str(tmp_path / "d")]) == 2

    def test_solver_error(self, tmp_path, capsys):
        # a time step far above the explicit diffusion limit blows up
        args = ["gen-data", "--case", "tc3", "--n", "1", "--seed", "0", "--out", str(tmp_path / "d"),
                "--set", "params.nt=500", "--set", "params.stimulus.max_events=1"]
        assert main(args) == 3
        assert "solver" in capsys.readouterr().err

    def test_divergence(self, tc1a, tmp_path, capsys):
        assert train(tc1a, tmp_path / "r0", "--adam-epochs", "0", "--bfgs-epochs", "0") == 0
        ck = tmp_path / "r0" / "checkpoint.bin"
        np.full(np.fromfile(ck, dtype="<f8").size, 1e200).astype("<f8").tofile(ck)
        code = train(tc1a, tmp_path / "r1", "--resume", str(tmp_path / "r0" / "checkpoint"), "--adam-epochs", "1")
        assert code == 4
        assert "divergence" in capsys.readouterr().err

    def test_mismatch(self, tc1a, tmp_path):
        assert main(["gen-data", "--case", "tc1b", "--n", "1", "--seed", "0", "--out", str(tmp_path / "b")]) == 0
        assert train(tc1a, tmp_path / "r", "--adam-epochs", "0", "--bfgs-epochs", "0") == 0
        code = main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint"), "--dataset", str(tmp_path / "b")])
        assert code == 5


class TestCommands:
    def test_zero_schedule_is_init(self, tc1a, tmp_path):
        assert train(tc1a, tmp_path / "r", "--adam-epochs", "0", "--bfgs-epochs", "0", "--seed", "3") == 0
        model, meta = LDNet.load(tmp_path / "r" / "checkpoint")
        dyn = init_glorot(model.dyn_net.layer_sizes, 3, 0)
        rec = init_glorot(model.rec_net.layer_sizes, 3, 1)
        assert model.params.tobytes() == np.concatenate([dyn.params, rec.params]).tobytes()
        resolved = json.loads((tmp_path / "r" / "resolved_config.json").read_text())
        assert resolved["config_hash"] == meta["config_hash"]

    def test_resume_zero_epochs(self, tc1a, tmp_path):
        assert train(tc1a, tmp_path / "a", "--adam-epochs", "2", "--bfgs-epochs", "2") == 0
        ck = str(tmp_path / "a" / "checkpoint")
        assert train(tc1a, tmp_path / "b", "--resume", ck, "--adam-epochs", "0", "--bfgs-epochs", "0") == 0
        for name in ("a", "b"):
            assert main(["eval", "--checkpoint", str(tmp_path / name / "checkpoint"), "--dataset",
                         str(tc1a / "test"), "--out", str(tmp_path / f"{name}.csv"), "--run-id", "x"]) == 0
        values = [[r.split(",")[3] for r in (tmp_path / f"{n}.csv").read_text().splitlines()[1:]] for n in "ab"]
        assert values[0] == values[1]

    def test_history_csv(self, tc1a, tmp_path):
        assert train(tc1a, tmp_path / "r", "--adam-epochs", "3", "--bfgs-epochs", "4") == 0
        lines = (tmp_path / "r" / "loss_history.csv").read_text().splitlines()
        assert lines[0] == "epoch,stage,loss,config_hash"
        rows = [l.split(",") for l in lines[1:]]
        assert [r[1] for r in rows[:3]] == ["adam"] * 3
        bfgs = [float(r[2]) for r in rows if r[1] == "bfgs"]
        assert all(b <= a for a, b in zip(bfgs, bfgs[1:]))

    def test_eval_on_training_data(self, tc1a, tmp_path):
        assert train(tc1a, tmp_path / "r", "--adam-epochs", "2", "--bfgs-epochs", "0") == 0
        out = tmp_path / "m.csv"
        assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint"), "--dataset", str(tc1a / "train"),
                     "--split", "train", "--out", str(out)]) == 0
        vals = [float(r.split(",")[3]) for r in out.read_text().splitlines()[1:]]
        assert all(np.isfinite(v) and v >= 0 for v in vals)

    def test_windows_partition_and_outputs(self, tc1a, tmp_path):
        assert train(tc1a, tmp_path / "r", "--adam-epochs", "1", "--bfgs-epochs", "0") == 0
        out = tmp_path / "m.csv"
        code = main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint"), "--dataset", str(tc1a / "test"),
                     "--window", "0,5", "--window", "5,10", "--window", "all", "--out", str(out),
                     "--heatmaps", str(tmp_path / "hm"), "--dump-fields", str(tmp_path / "f")])
        assert code == 0
        tags = [r.split(",")[4] for r in out.read_text().splitlines()[1:]]
        assert tags == ["0-5", "0-5", "5-10", "5-10", "all", "all"]
        assert (tmp_path / "hm" / "sample_0.png").read_bytes()[:4] == b"\x89PNG"
        dump = (tmp_path / "f" / "fields_1.csv").read_text().splitlines()
        assert dump[0] == "t,x0,y0,pred0" and len(dump) == 1 + 100 * 101

    def test_report_ranks(self, tmp_path):
        from ldnets.metrics import write_metrics_csv

        rows = [
            {"run_id": "a", "split": "test", "metric": "nrmse", "value": 0.3, "time_window": "all"},
            {"run_id": "b", "split": "test", "metric": "nrmse", "value": 0.1, "time_window": "all"},
        ]
        write_metrics_csv(tmp_path / "in.csv", rows)
        assert main(["report", str(tmp_path / "in.csv"), "--out", str(tmp_path / "r.csv")]) == 0
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "run_id,test_nrmse" and lines[1].startswith("b,") and lines[2].startswith("a,")

    def test_dry_run(self, capsys):
        assert main(["train", "--dataset", "d", "--out", "o", "--dry-run"]) == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["schedule"]["bfgs_gtol"] == 1e-12 and "config_hash" in cfg

    def test_recipe_sections(self, tmp_path, capsys):
        recipe = {"train": {"dataset": "d", "out": "o", "model": {"n_latent": 3}}, "eval": {"checkpoint": "c"}}
        (tmp_path / "r.json").write_text(json.dumps(recipe))
        assert main(["train", "--config", str(tmp_path / "r.json"), "--dry-run"]) == 0
        assert json.loads(capsys.readouterr().out)["model"]["n_latent"] == 3


def test_end_to_end_deterministic(tmp_path, monkeypatch):
    """Two full gen-data + train + eval runs give byte-identical artifacts."""
    outs = []
    for name in ("one", "two"):
        # identical relative paths, since paths enter the config hash
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        assert main(["gen-data", "--case", "tc1b", "--n", "2", "--seed", "5", "--out", "train"]) == 0
        assert main(["train", "--dataset", "train", "--out", "run", "--adam-epochs", "3", "--bfgs-epochs", "3"]) == 0
        assert main(["eval", "--checkpoint", "run/checkpoint", "--dataset", "train", "--out", "m.csv", "--run-id", "r"]) == 0
        files = ("train/manifest.json", "run/checkpoint.bin", "run/checkpoint.json", "run/loss_history.csv", "m.csv")
        outs.append([(tmp_path / name / p).read_bytes() for p in files])
    assert outs[0] == outs[1]
