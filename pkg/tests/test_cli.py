import json
import subprocess
import sys

import pytest

from higrpo.cli import main
from higrpo.meshsample import Mesh, Texture, read_ply, write_obj, write_ppm

TINY = ["--set", "side=3", "--set", "colors=3", "--set", "len_s=3", "--set", "len_v=3", "--set", "features=64",
        "--set", "eval_prompts=6", "--group-size", "3", "--prompts-per-iteration", "2"]


def test_train_eval_and_plot(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", *TINY, "--iterations", "2", "--out", str(out), "--eval", "--plot"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["iterations"] == 2
    assert (out / "training.png").stat().st_size > 0
    assert (out / "eval.json").exists()
    assert main(["eval", *TINY, "--checkpoint", str(out / "final.bin")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == summary["eval"]


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["train", *TINY, "--group-size", "1", "--out", str(tmp_path)]) == 2
    assert main(["train", *TINY, "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    assert main(["train", *TINY, "--clip-low", "1.5", "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.bin").write_bytes(b"nope")
    assert main(["eval", *TINY, "--checkpoint", str(tmp_path / "bad.bin")]) == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_exits_3(tmp_path):
    assert main(["train", *TINY, "--iterations", "6", "--lr", "1e307", "--out", str(tmp_path)]) == 3
    last = json.loads((tmp_path / "metrics.jsonl").read_text().splitlines()[-1])
    assert last["aborted"] is True


def test_ablate_and_scale_reports(tmp_path):
    grid = tmp_path / "g.txt"
    grid.write_text("base:\nno-kl: kl_enabled=false\n")
    assert main(["ablate", *TINY, "--iterations", "1", "--grid-file", str(grid), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "ablation_g.csv").read_text().count("\n") == 3
    assert (tmp_path / "ablation_g.png").stat().st_size > 0
    assert main(["scale", *TINY, "--iterations", "1", "--data-factors", "1,2", "--iteration-factors", "1,2",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "scaling.csv").read_text().count("\n") == 5
    assert (tmp_path / "scaling.png").stat().st_size > 0


def test_mesh_sample(tmp_path):
    tex = Texture(2, 2, bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255]))
    faces = [[0, 1, 2], [0, 2, 3]]
    mesh = Mesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 0], [1, 0], [1, 1], [0, 1]], faces, faces, tex)
    write_obj(mesh, tmp_path / "m.obj")
    write_ppm(tex, tmp_path / "t.ppm")
    ply = tmp_path / "p.ply"
    assert main(["mesh-sample", str(tmp_path / "m.obj"), str(tmp_path / "t.ppm"), "--density", "200",
                 "--out", str(ply)]) == 0
    assert len(read_ply(ply)) == 200
    assert main(["mesh-sample", str(tmp_path / "missing.obj"), str(tmp_path / "t.ppm")]) == 2
    (tmp_path / "bad.obj").write_text("v 0 0 0\nf 1 2 3\n")
    assert main(["mesh-sample", str(tmp_path / "bad.obj"), str(tmp_path / "t.ppm"), "--out", str(ply)]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "higrpo", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "mesh-sample" in proc.stdout
