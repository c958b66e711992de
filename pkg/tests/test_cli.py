import json
import subprocess
import sys

import pytest

from rankuap.cli import main
from rankuap.data import load_uap, read_manifest

SPEC = "seed = 3\nn_train_ids = 6\nn_test_ids = 4\nviews_per_id = 4\nheight = 8\nwidth = 4\n"
ATTACK = "attack.epochs = 2\nattack.n_train_images = 24\nattack.p_ids = 3\n"


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.cfg").write_text(SPEC)
    (root / "attack.cfg").write_text(ATTACK)
    assert _run("gen-data", root / "spec.cfg", root / "ds") == 0
    manifest = root / "ds" / "manifest.csv"
    for arch in ("linear", "mlp"):
        assert _run("train-embedder", arch, manifest, root / f"{arch}.model", "--epochs", 2) == 0
    assert _run("attack", root / "linear.model", manifest, root / "u.uap", "--cfg", root / "attack.cfg") == 0
    return root, manifest


def _subcommands(root, manifest, out):
    """Every subcommand, writing only under ``out``."""
    cfg = root / "attack.cfg"
    return [
        ("gen-data", ["gen-data", root / "spec.cfg", out / "ds"], [out / "ds"]),
        ("train-embedder", ["train-embedder", "conv", manifest, out / "c.model", "--epochs", 1],
         [out / "c.model"]),
        ("attack", ["attack", root / "linear.model", manifest, out / "u.uap", "--cfg", cfg],
         [out / "u.uap", out / "u.uap.log.jsonl"]),
        ("eval", ["eval", root / "linear.model", manifest, root / "u.uap", "--json", out / "r.json"],
         [out / "r.json"]),
        ("matrix", ["matrix", root / "linear.model", root / "mlp.model", manifest, "--cfg", cfg,
                    "--out", out / "m.csv", "--rdr-out", out / "r.csv"], [out / "m.csv", out / "r.csv"]),
        ("sweep", ["sweep", root / "linear.model", manifest, "--epsilons", "0,4", "--cfg", cfg,
                   "--targets", root / "mlp.model", "--out", out / "s.csv"], [out / "s.csv"]),
        ("energy", ["energy", manifest, root / "u.uap", "--out", out / "e.csv"], [out / "e.csv"]),
        ("export-uap-ppm", ["export-uap-ppm", root / "u.uap", out / "u.ppm"], [out / "u.ppm"]),
    ]


def _files(paths):
    out = {}
    for p in paths:
        for f in sorted([p] if p.is_file() else p.rglob("*")):
            if f.is_file():
                out[f.relative_to(p.parent)] = f.read_bytes()
    return out


def test_every_subcommand_is_deterministic(workspace, tmp_path):
    root, manifest = workspace
    runs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        out.mkdir()
        produced = {}
        for name, argv, paths in _subcommands(root, manifest, out):
            assert _run(*argv) == 0, name
            produced[name] = _files(paths)
            assert produced[name], name
        runs.append(produced)
    for name in runs[0]:
        assert runs[0][name] == runs[1][name], name


def test_stdout_outputs_are_deterministic(workspace, capsys):
    root, manifest = workspace
    texts = []
    for _ in range(2):
        assert _run("energy", manifest, root / "u.uap") == 0
        assert _run("eval", root / "linear.model", manifest, root / "u.uap") == 0
        texts.append(capsys.readouterr().out)
    assert texts[0] == texts[1]


def test_gen_data_layout(workspace):
    root, manifest = workspace
    items = read_manifest(manifest)
    assert len(items) == 10 * 4
    assert {it.split for it in items} == {"train", "query", "gallery"}


def test_attack_outputs(workspace):
    root, _ = workspace
    u = load_uap(root / "u.uap")
    assert u.values.shape == (3, 8, 4) and u.epsilon == 10
    log = [json.loads(line) for line in (root / "u.uap.log.jsonl").read_text().splitlines()]
    assert [rec["epoch"] for rec in log] == [0, 1]


def test_eval_summary(workspace, capsys):
    root, manifest = workspace
    assert _run("eval", root / "linear.model", manifest, root / "u.uap") == 0
    summary = json.loads(capsys.readouterr().out)
    assert set(summary) == {"map_before", "map_after", "rank1_before", "rank1_after", "mdr", "rdr"}


def test_matrix_and_sweep_csv(workspace, tmp_path):
    root, manifest = workspace
    cfg = root / "attack.cfg"
    assert _run("matrix", root / "linear.model", root / "mlp.model", manifest, "--cfg", cfg,
                "--out", tmp_path / "m.csv") == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "source,linear,mlp" and len(lines) == 3
    assert _run("sweep", root / "linear.model", manifest, "--epsilons", "0,4", "--cfg", cfg,
                "--out", tmp_path / "s.csv") == 0
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "epsilon,mdr_whitebox,mdr_crossmodel"
    assert lines[1] == "0,0.000000,"


def test_flag_overrides_config(workspace, tmp_path):
    root, manifest = workspace
    assert _run("attack", root / "linear.model", manifest, tmp_path / "u.uap", "--cfg", root / "attack.cfg",
                "--epsilon", 3, "--gamma", "inf", "--lambda", 0) == 0
    u = load_uap(tmp_path / "u.uap")
    assert u.epsilon == 3 and abs(u.values).max() <= 3


@pytest.mark.parametrize("argv", [
    [],
    ["no-such-command"],
    ["train-embedder", "resnet", "m.csv", "x.model"],
    ["attack", "a.model"],
    ["sweep", "a.model", "m.csv", "--epsilons", "4,2"],
    ["attack", "a.model", "m.csv", "u.uap", "--gamma", "3"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_bad_config_exits_1(workspace, tmp_path):
    root, manifest = workspace
    (tmp_path / "bad.cfg").write_text("attack.lamda = 3\n")
    assert _run("attack", root / "linear.model", manifest, tmp_path / "u.uap", "--cfg", tmp_path / "bad.cfg") == 1
    assert not (tmp_path / "u.uap").exists()


def test_runtime_errors_exit_2(workspace, tmp_path):
    root, manifest = workspace
    assert _run("eval", tmp_path / "missing.model", manifest, root / "u.uap") == 2
    (tmp_path / "junk.uap").write_bytes(b"not a perturbation")
    assert _run("eval", root / "linear.model", manifest, tmp_path / "junk.uap") == 2
    assert _run("export-uap-ppm", tmp_path / "missing.uap", tmp_path / "x.ppm") == 2


def test_console_entry_point(workspace):
    root, _ = workspace
    proc = subprocess.run([sys.executable, "-m", "rankuap.cli", "export-uap-ppm", str(root / "u.uap"),
                           str(root / "again.ppm")], capture_output=True)
    assert proc.returncode == 0
    assert (root / "again.ppm").read_bytes().startswith(b"P6")
