import os
from pathlib import Path

import pytest

from f4flow.cli import main
from f4flow.evaluate import REPORT_COLUMNS, read_report
from f4flow.patches import read_dataset

TINY_CFG = """\
[run]
seed = 4
[phantom]
families = tube-jet,cavity-vortex
eval_families = dual-lumen
n_models = 3
n_frames = 1
grid = 24
[patch]
stride = 12
[model]
channels = 4
n_blocks_low = 1
n_blocks_high = 1
[train]
epochs = 1
batch_size = 4
lr0 = 0.001
[ensemble]
kind = stacking
n_base = 2
meta_channels = 4
meta_epochs = 1
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_CFG)
    for fam in ("tube-jet", "cavity-vortex"):
        assert run("phantom", "--family", fam, "--out", root / "ph", "--models", 3, "--grid", 24, "--seed", 1) == 0
    for man in sorted((root / "ph").glob("*.manifest")):
        assert run("synth", "--in", man, "--snr", "10:20", "--out", root / "syn", "--seed", 2) == 0
    assert run("patch", "--in", root / "syn", "--out", root / "d.f4p", "--stride", 12, "--seed", 3) == 0
    return root, cfg


def test_phantom_outputs_and_determinism(tmp_path):
    assert run("phantom", "--family", "tube-jet", "--out", tmp_path / "a", "--grid", 32, "--seed", 5) == 0
    assert run("phantom", "--family", "tube-jet", "--out", tmp_path / "b", "--grid", 32, "--seed", 5) == 0
    files = sorted(os.listdir(tmp_path / "a"))
    assert files == ["tube-jet-m0.manifest", "tube-jet-m0_f000.f4v"]
    assert (tmp_path / "a" / files[1]).read_bytes() == (tmp_path / "b" / files[1]).read_bytes()


def test_usage_errors_exit_2(tmp_path, monkeypatch):
    with pytest.raises(SystemExit) as e:
        run("phantom", "--family", "nope", "--out", tmp_path)
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        run("synth", "--in", tmp_path / "x", "--snr", "20:10", "--out", tmp_path)
    assert e.value.code == 2
    assert run("ensemble", "--kind", "stacking", "--members", "a.f4w,b.f4w", "--out", tmp_path / "e.txt") == 2
    monkeypatch.setenv("F4FLOW_SEED", "abc")
    assert run("phantom", "--family", "tube-jet", "--out", tmp_path / "p", "--grid", 24) == 2


def test_runtime_errors_exit_1(tmp_path):
    assert run("train", "--data", tmp_path / "missing.f4p", "--out", tmp_path / "m.f4w") == 1
    assert run("eval", "--model", "trilinear-stub", "--data", tmp_path / "missing.f4p",
               "--report", tmp_path / "r.csv") == 1
    assert not (tmp_path / "r.csv").exists()


def test_synth_pairs(pipeline):
    root, _ = pipeline
    pairs = sorted((root / "syn").glob("*.pairs"))
    assert len(pairs) == 6
    assert len(list((root / "syn").glob("*.f4v"))) == 12
    lines = [ln for ln in pairs[0].read_text().splitlines() if not ln.startswith("#")]
    hr, lr, comp, frame, venc, sigma, snr = lines[0].split()
    assert 10 <= float(snr) <= 20 and float(sigma) > 0


def test_patch_split_manifest(pipeline):
    root, _ = pipeline
    ps = read_dataset(root / "d.f4p")
    rows = [ln.split() for ln in (root / "d.f4p.split").read_text().splitlines() if ln and not ln.startswith("#")]
    assert len(rows) == 6 and {r[2] for r in rows} == {"train", "validation", "test"}
    assert len(ps) > 0


def test_min_fluid_boundary(pipeline, tmp_path, capsys):
    root, _ = pipeline
    assert run("patch", "--in", root / "syn", "--out", tmp_path / "z.f4p", "--stride", 12, "--min-fluid", 1.01) == 0
    assert len(read_dataset(tmp_path / "z.f4p")) == 0
    assert "warning" in capsys.readouterr().err.lower()


def test_train_ensemble_eval(pipeline, tmp_path):
    root, cfg = pipeline
    for i in (0, 1):
        assert run("train", "--data", root / "d.f4p", "--spec", cfg, "--out", tmp_path / f"m{i}.f4w",
                   "--bootstrap", i, "--seed", i) == 0
    assert (tmp_path / "m0.f4w.log.csv").read_text().startswith("epoch,lr,train_loss,val_loss,wall_seconds")
    assert (tmp_path / "m0.f4w.config.ini").exists()
    again = tmp_path / "again.f4w"
    assert run("train", "--data", root / "d.f4p", "--spec", cfg, "--out", again, "--bootstrap", 0, "--seed", 0) == 0
    assert again.read_bytes() == (tmp_path / "m0.f4w").read_bytes()

    members = f"{tmp_path / 'm1.f4w'},{tmp_path / 'm0.f4w'}"
    assert run("ensemble", "--kind", "stacking", "--members", members, "--train-meta", "--data", root / "d.f4p",
               "--spec", cfg, "--out", tmp_path / "st.txt") == 0
    text = (tmp_path / "st.txt").read_text()
    assert text.index("m1.f4w") < text.index("m0.f4w")
    assert run("ensemble", "--kind", "bagging", "--members", tmp_path / "m0.f4w", "--out", tmp_path / "one.txt") == 0

    for model, name in ((tmp_path / "st.txt", "st"), (tmp_path / "one.txt", "one"), ("oracle-stub", "oracle")):
        assert run("eval", "--model", model, "--data", root / "d.f4p", "--report", tmp_path / f"{name}.csv") == 0
    header = (tmp_path / "oracle.csv").read_text().splitlines()[0]
    assert header == ",".join(REPORT_COLUMNS)
    assert all(float(r["re"]) == 0.0 for r in read_report(tmp_path / "oracle.csv"))
    one = read_report(tmp_path / "one.csv")
    assert 0 < float(one[0]["re"]) < 1


def test_eval_refuses_training_models(pipeline, tmp_path):
    root, cfg = pipeline
    assert run("train", "--data", root / "d.f4p", "--spec", cfg, "--out", tmp_path / "m.f4w") == 0
    assert run("eval", "--model", tmp_path / "m.f4w", "--data", root / "d.f4p", "--split", "test",
               "--report", tmp_path / "ok.csv") == 0
    # the model saw the training split, so scoring it there is refused
    assert run("eval", "--model", tmp_path / "m.f4w", "--data", root / "d.f4p", "--split", "train",
               "--report", tmp_path / "bad.csv") == 1
    assert not (tmp_path / "bad.csv").exists()


def test_recover_native(pipeline, tmp_path):
    root, _ = pipeline
    assert run("eval", "--model", "oracle-stub", "--data", root / "ph", "--protocol", "recover-native",
               "--report", tmp_path / "rn.csv", "--slices") == 0
    rows = read_report(tmp_path / "rn.csv")
    assert rows and all(float(r["re"]) == 0.0 for r in rows)


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        run("--version")
    assert e.value.code == 0
    assert "F4DV v1" in capsys.readouterr().out


@pytest.mark.slow
def test_run_reproducible(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY_CFG)
    assert run("run", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("run", "--config", tmp_path / "a" / "config.ini", "--out", tmp_path / "b") == 0
    a, b = Path(tmp_path / "a"), Path(tmp_path / "b")
    for name in ("meta.f4w", "member0.f4w", "train.f4p", "unseen.f4p", "report_test.csv", "report_unseen.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "config.ini").read_text() == (b / "config.ini").read_text()
