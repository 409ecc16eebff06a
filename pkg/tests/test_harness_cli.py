import csv
import json
import shutil

import pytest
import yaml

from fedunlearn import harness
from fedunlearn.cli import EXIT_CONFIG, EXIT_DATA, EXIT_FAIL, EXIT_OK, main
from fedunlearn.config import ExperimentConfig
from fedunlearn.data import manifest_hash
from fedunlearn.errors import ConfigError, ContractError
from fedunlearn.nn import load_model

SMALL = {
    "seed": 3,
    "dataset": {"kind": "synth", "clients": 5, "classes": 3, "dim": 2, "samples_per_client": 120,
                "test_fraction": 0.2, "reserve_fraction": 0.1},
    "model": {"arch": "mlp", "hidden": [16]},
    "federation": {"rounds": 3, "local_epochs": 1, "batch_size": 16, "learning_rate": 0.05, "momentum": 0.9},
    "unlearn": {"client": 0, "forget_fraction": 0.1, "lam": 0.7, "epochs": 2, "minibatch": 8,
                "learning_rate": 0.01, "third_party": ["noise", "reserved"]},
    "mia": {"epochs": 20},
}


def _write_cfg(tmp_path, raw, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


def _cfg(tmp_path, out="run", **over):
    raw = json.loads(json.dumps(SMALL))
    for section, values in over.items():
        raw[section].update(values) if isinstance(values, dict) else raw.__setitem__(section, values)
    raw["out"] = str(tmp_path / out)
    return raw


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("harness")
    cfg = ExperimentConfig.from_dict(_cfg(tmp))
    report = harness.run_all(cfg)
    return cfg, report, tmp / "run"


# -- config and exit codes ----------------------------------------------------------------


def test_unknown_config_key_exit_2(tmp_path):
    raw = _cfg(tmp_path)
    raw["federation"]["epochs_per_round"] = 3
    assert main(["train", "--config", str(_write_cfg(tmp_path, raw))]) == EXIT_CONFIG


@pytest.mark.parametrize("lam", ["-0.1", "1.5"])
def test_lambda_out_of_range_exit_2(tmp_path, lam):
    assert main(["unlearn", "--config", str(_write_cfg(tmp_path, _cfg(tmp_path))), "--lambda", lam]) == EXIT_CONFIG


def test_lambda_out_of_range_in_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_cfg(tmp_path, unlearn={"lam": 2.0}))


def test_missing_dataset_path_exit_2(tmp_path):
    raw = _cfg(tmp_path, dataset={"kind": "idx", "train_images": "nope-images", "train_labels": "nope-labels",
                                  "test_images": "nope-t-images", "test_labels": "nope-t-labels"})
    raw["model"] = {"arch": "lenet5"}
    assert main(["train", "--config", str(_write_cfg(tmp_path, raw))]) == EXIT_CONFIG


def test_corrupt_idx_file_exit_3(tmp_path):
    names = ["train-images", "train-labels", "test-images", "test-labels"]
    for n in names:
        (tmp_path / n).write_bytes(b"\x00\x00\x08\x01garbage")
    raw = _cfg(tmp_path, dataset={"kind": "idx", "train_images": names[0], "train_labels": names[1],
                                  "test_images": names[2], "test_labels": names[3]})
    raw["model"] = {"arch": "lenet5"}
    assert main(["train", "--config", str(_write_cfg(tmp_path, raw))]) == EXIT_DATA


def test_reserved_kind_without_reserve_split(tmp_path):
    raw = _cfg(tmp_path, dataset={"reserve_fraction": 0.0}, unlearn={"third_party": ["reserved"]})
    path = _write_cfg(tmp_path, raw)
    assert main(["train", "--config", str(path)]) == EXIT_OK
    assert main(["unlearn", "--config", str(path)]) == EXIT_CONFIG


def test_missing_model_file_is_io_error(run, tmp_path):
    cfg, _, out = run
    path = _write_cfg(tmp_path, {**cfg.to_dict(), "out": str(out)})
    rc = main(["mia", "--config", str(path), "--third-party", "noise", "--model", f"x={tmp_path / 'absent.funl'}"])
    assert rc == EXIT_FAIL
    with pytest.raises(FileNotFoundError):
        harness.cmd_mia(cfg, "noise", model_paths={"x": tmp_path / "absent.funl"})


def test_cli_seed_override_changes_model(tmp_path):
    base = _write_cfg(tmp_path, _cfg(tmp_path, out="a"))
    assert main(["train", "--config", str(base)]) == EXIT_OK
    assert main(["train", "--config", str(base), "--seed", "4", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "target.funl").read_bytes() != (tmp_path / "b" / "target.funl").read_bytes()


# -- stage artifacts ----------------------------------------------------------------------


def test_trace_rows_equal_steps(run):
    _, report, out = run
    for kind in ("noise", "reserved"):
        rows = (out / f"trace_{kind}.jsonl").read_text().splitlines()
        assert len(rows) == report["unlearned"][kind]["trace"]["steps"] > 0


def test_manifest_hash_checked_on_retrain(run, tmp_path):
    cfg, _, out = run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    manifest = json.loads((copy / "manifest.json").read_text())
    manifest["clients"][0]["train"] = manifest["clients"][0]["train"][1:]
    (copy / "manifest.json").write_text(json.dumps(manifest))
    cfg2 = ExperimentConfig.from_dict({**cfg.to_dict(), "out": str(copy)})
    with pytest.raises(ConfigError, match="manifest"):
        harness.cmd_retrain(cfg2)


def test_retrain_uses_train_manifest(run):
    _, report, out = run
    train = json.loads((out / "train.json").read_text())
    assert train["manifest_sha256"] == report["manifest_sha256"]
    assert manifest_hash(json.loads((out / "manifest.json").read_text())) == report["manifest_sha256"]


def test_retrain_model_loadable_by_mia(run):
    cfg, _, out = run
    load_model(out / "retrain.funl")
    frag = harness.cmd_mia(cfg, "noise", model_paths={"retrain": out / "retrain.funl"})
    assert set(frag["verdicts"]) == {"target", "unlearned", "retrain"}


def test_mia_balanced_set_size(run):
    _, report, _ = run
    for kind, block in report["mia"].items():
        for label in ("target", "unlearned", "retrain"):
            v = block[label]
            assert v["n_forget"] == v["n_nonmember"] and v["n_forget"] + v["n_nonmember"] == 2 * v["n_forget"]
    prep = harness.prepare(run[0])
    assert report["mia"]["noise"]["target"]["n_forget"] == len(prep.clients[0].forget)


def test_unlearn_comm_accounting(run):
    _, report, _ = run
    for kind, block in report["unlearned"].items():
        assert block["comm_messages"] == 5 + 1


# -- report ----------------------------------------------------------------------------------


def test_speedup_six_significant_digits(run):
    _, report, _ = run
    t = report["timing"]
    for kind, s in t["speedup"].items():
        assert s == float(f"{t['retrain_seconds'] / t['unlearn_seconds'][kind]:.6g}")
    assert harness.speedup(10.0, 3.0) == 3.33333
    with pytest.raises(ContractError):
        harness.speedup(1.0, 0.0)


def test_retrain_slower_than_unlearn(run):
    t = run[1]["timing"]
    assert all(t["retrain_seconds"] > s for s in t["unlearn_seconds"].values())


def test_accuracy_csv_rows(run):
    _, report, out = run
    rows = list(csv.DictReader((out / "accuracy_by_client.csv").open()))
    assert len(rows) == report["num_clients"] == 5
    assert list(rows[0])[:4] == ["client_id", "target_acc", "unlearned_acc", "retrain_acc"]
    assert {"unlearned_acc_noise", "unlearned_acc_reserved"} <= set(rows[0])


def test_report_validates_and_rejects_unknown_fields(run, tmp_path):
    _, report, out = run
    assert harness.load_report(out / "report.json") == report
    bad = dict(report, extra_field=1)
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(ContractError):
        harness.load_report(tmp_path / "bad.json")
    nested = json.loads(json.dumps(report))
    nested["timing"]["wall"] = 1.0
    with pytest.raises(ContractError):
        harness.validate_report(nested)


def test_report_subcommand_by_out_dir(run):
    _, report, out = run
    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "report.json").read_text()) == report


def test_both_kinds_side_by_side(run):
    _, report, _ = run
    assert report["third_party_kinds"] == ["noise", "reserved"]
    assert set(report["unlearned"]) == set(report["mia"]) == {"noise", "reserved"}


# -- timing and determinism ---------------------------------------------------------------


def test_synth_five_client_run_under_60s(run):
    assert run[1]["num_clients"] == 5
    assert run[1]["timing"]["train_seconds"] < 60.0


def test_seed_reuse_byte_identical_model(tmp_path):
    for name in ("a", "b"):
        harness.cmd_train(ExperimentConfig.from_dict(_cfg(tmp_path, out=name)))
    assert (tmp_path / "a" / "target.funl").read_bytes() == (tmp_path / "b" / "target.funl").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
