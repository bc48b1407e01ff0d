import copy
import csv
import json

import numpy as np
import pytest

from chansearch.cli import main
from chansearch.config import ECHO_NAME, ConfigError, load_config, resolve
from chansearch.reporting import METRIC_COLUMNS, metric_columns, read_metrics
from chansearch.supernet import ArchitectureSpec

SYN = {"kind": "synthetic", "synthetic": {"knee": 8, "samples": 256, "test_samples": 128, "noise": 0.25, "seed": 1}}


def _raw(epochs=3, stages=None, **search):
    s = {"epochs_search": epochs, "epochs_train": 1, "batch_size": 32, "w_lr": 0.1, "warmup_epochs": 1}
    s.update(search)
    net = {"stem_channels": 8, "head_channels": 16}
    net["stages"] = stages or [{"start": 4, "end": 16, "step": 4, "selector": "gaussian"}]
    return {"search": s, "net": net, "data": copy.deepcopy(SYN)}


def _write(tmp_path, raw, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


# config ------------------------------------------------------------------------

@pytest.mark.parametrize("section,key", [("search", "learning_rate"), ("net", "width"), ("data", "root")])
def test_unknown_keys_rejected(section, key):
    raw = _raw()
    raw[section][key] = 1
    with pytest.raises(ConfigError, match=key):
        resolve(raw)


def test_unknown_top_level_and_stage_keys():
    raw = _raw()
    raw["extra"] = {}
    with pytest.raises(ConfigError, match="extra"):
        resolve(raw)
    raw = _raw(stages=[{"start": 4, "end": 16, "step": 4, "kind": "gumbel"}])
    with pytest.raises(ConfigError, match=r"stages\[0\]"):
        resolve(raw)


def test_bad_values_are_config_errors():
    with pytest.raises(ConfigError):
        resolve(_raw(epochs=0))
    with pytest.raises(ConfigError):
        resolve(_raw(stages=[{"start": 16, "end": 4, "step": 4}]))
    with pytest.raises(ConfigError, match="preset"):
        resolve(_raw(), preset="fancy")


def test_overrides_and_preset():
    cfg = resolve(_raw(), seed=9, lam=0.5, out_dir="x")
    assert (cfg.search.seed, cfg.search.lam, cfg.out_dir) == (9, 0.5, "x")
    assert cfg.net.in_channels == 16 and cfg.net.num_classes == 8  # filled from the data source
    dm = resolve(_raw(), preset="dmask-small")
    assert all(st.selector == "gumbel" for st in dm.net.stages) and not dm.search.reallocate
    expanded = resolve({"net": {"num_stages": 3, "scale": 0.25}, "data": copy.deepcopy(SYN)}, preset="dmask-large")
    assert len(expanded.net.stages) == 3


def test_geometry_mismatch():
    raw = _raw()
    raw["net"]["in_channels"] = 3
    with pytest.raises(ConfigError, match="data provides"):
        resolve(raw)


def test_echo_replays_exactly(tmp_path):
    cfg = resolve(_raw(), preset="flexcharts", seed=4, lam=0.02)
    path = cfg.echo(tmp_path)
    again = load_config(path)
    assert again.to_json() == cfg.to_json()
    assert again.search == cfg.search and again.net == cfg.net


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{search: 1")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(path)


def test_shipped_toy_config_loads():
    cfg = load_config("configs/toy.json")
    assert cfg.net.stages[0].selector == "gaussian" and cfg.search.epochs_search == 50


# CLI ---------------------------------------------------------------------------

def test_search_writes_all_outputs(tmp_path, capsys):
    cfg = _write(tmp_path, _raw(epochs=4))
    out = tmp_path / "run"
    assert main(["search", "--config", str(cfg), "--out", str(out), "-q"]) == 0
    for name in ("metrics.csv", "alphas.csv", "events.csv", "arch.json", "checkpoint.bin", ECHO_NAME):
        assert (out / name).exists(), name
    rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 4 and list(rows[0]) == metric_columns(1)
    spec = ArchitectureSpec.from_json((out / "arch.json").read_text())
    assert json.loads(capsys.readouterr().out)["channels"] == spec.channels


def test_fifty_epoch_metrics_table(tmp_path):
    cfg = _write(tmp_path, _raw(epochs=50, warmup_epochs=5))
    out = tmp_path / "run"
    d = dict(SYN, synthetic=dict(SYN["synthetic"], samples=64))
    raw = json.loads(cfg.read_text())
    raw["data"] = d
    cfg.write_text(json.dumps(raw))
    assert main(["search", "--config", str(cfg), "--out", str(out), "-q"]) == 0
    rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 50 and [int(r["epoch"]) for r in rows] == list(range(1, 51))
    assert {"expected_flops", "param_count"} <= set(rows[0])


@pytest.mark.parametrize("preset", ["dmask-small", "dmask-large", "flexcharts"])
def test_metrics_schema_stable_across_presets(tmp_path, preset):
    cfg = _write(tmp_path, _raw(epochs=2))
    out = tmp_path / preset
    assert main(["search", "--config", str(cfg), "--out", str(out), "--preset", preset, "-q"]) == 0
    with open(out / "metrics.csv") as fh:
        header = next(csv.reader(fh))
    assert header == METRIC_COLUMNS + ["stage0_state", "stage0_fmax"]
    with open(out / "events.csv") as fh:
        events = list(csv.DictReader(fh))
    if preset.startswith("dmask"):
        assert events == []


def test_alpha_bell_peaks_at_mu(tmp_path):
    cfg = _write(tmp_path, _raw(epochs=3))
    out = tmp_path / "run"
    assert main(["search", "--config", str(cfg), "--out", str(out), "-q"]) == 0
    with open(out / "alphas.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["epoch"] == "3"]
    mu = float(rows[0]["mu"])
    peak = max(rows, key=lambda r: float(r["alpha"]))
    assert all(abs(int(peak["channels"]) - mu) <= abs(int(r["channels"]) - mu) for r in rows)
    assert abs(sum(float(r["weight"]) for r in rows) - 1) < 1e-12


def test_train_eval_export(tmp_path, capsys):
    cfg = _write(tmp_path, _raw(epochs=2))
    out = tmp_path / "run"
    assert main(["search", "--config", str(cfg), "--out", str(out), "-q"]) == 0
    assert main(["train", "--config", str(cfg), "--spec", str(out / "arch.json"), "--out", str(tmp_path / "t"),
                 "-q"]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--model", str(tmp_path / "t" / "model.npz"), "-q"]) == 0
    acc = json.loads(capsys.readouterr().out)["accuracy"]
    assert acc == json.loads((tmp_path / "t" / "train.json").read_text())["accuracy"]
    assert main(["export", "--checkpoint", str(out / "checkpoint.bin"), "-q"]) == 0
    exported = ArchitectureSpec.from_json(capsys.readouterr().out)
    assert exported == ArchitectureSpec.from_json((out / "arch.json").read_text())


def test_exit_code_usage(tmp_path, capsys):
    assert main(["search", "--bogus"]) == 1
    assert main([]) == 1
    raw = _raw()
    raw["search"]["nope"] = 1
    assert main(["search", "--config", str(_write(tmp_path, raw)), "--out", str(tmp_path / "o")]) == 1
    assert main(["search", "--config", str(_write(tmp_path, _raw(), "ok.json"))]) == 1  # no output dir
    assert "error" in capsys.readouterr().err


def test_exit_code_runtime(tmp_path):
    bad = tmp_path / "arch.json"
    bad.write_text('{"channels": [8]}')
    cfg = _write(tmp_path, _raw())
    assert main(["train", "--config", str(cfg), "--spec", str(bad), "--out", str(tmp_path / "t"), "-q"]) == 2
    assert main(["export", "--checkpoint", str(tmp_path / "missing.bin"), "-q"]) == 2


def test_exit_code_non_finite(tmp_path):
    cfg = _write(tmp_path, _raw(w_lr=1e300, grad_clip=0.0))
    out = tmp_path / "run"
    with np.errstate(all="ignore"):
        code = main(["search", "--config", str(cfg), "--out", str(out), "-q"])
    assert code == 2
    assert "where" in json.loads((out / "diagnostic.json").read_text())


def test_exit_code_budget_then_resume(tmp_path):
    cfg = _write(tmp_path, _raw(epochs=4, stop_after_epoch=2))
    out = tmp_path / "run"
    assert main(["search", "--config", str(cfg), "--out", str(out), "-q"]) == 3
    assert len(read_metrics(out / "metrics.csv")) == 2
    full = _write(tmp_path, _raw(epochs=4), "full.json")
    assert main(["search", "--config", str(full), "--out", str(out), "--resume", str(out / "checkpoint.bin"),
                 "-q"]) == 0
    ref = tmp_path / "ref"
    assert main(["search", "--config", str(full), "--out", str(ref), "-q"]) == 0
    assert (out / "metrics.csv").read_bytes() == (ref / "metrics.csv").read_bytes()
    assert (out / "arch.json").read_bytes() == (ref / "arch.json").read_bytes()


def test_selftest_passes(capsys):
    assert main(["selftest", "-q"]) == 0
    assert "FAIL" not in capsys.readouterr().out
