import json

import numpy as np
import pytest

from tracefuse.cli import main
from tracefuse.forge.dataset import read_png


def test_gen_rejects_bad_mix(tmp_path, capsys):
    code = main(["gen", "--n", "4", "--mix", "splice=0.5,remove=0.4", "--out", str(tmp_path / "d")])
    assert code != 0
    assert "sum to 1" in capsys.readouterr().err


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--bogus"])
    assert exc.value.code != 0


def test_missing_data_dir(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "run")])
    assert code != 0 and "manifest" in capsys.readouterr().err


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("nonsense = 1\n")
    main(["gen", "--n", "4", "--seed", "1", "--out", str(tmp_path / "d")])
    code = main(["train", "--config", str(cfg), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r")])
    assert code != 0 and "unknown key" in capsys.readouterr().err


def test_pipeline(tmp_path, capsys, monkeypatch):
    d, run, ev = tmp_path / "data", tmp_path / "run", tmp_path / "eval"
    assert main(["gen", "--n", "8", "--seed", "3", "--out", str(d)]) == 0
    cfg = tmp_path / "c.txt"
    cfg.write_text("total_iters = 2\nwarmup_iters = 1\ntrace_depth = 1\ncontent_depth = 1\n")
    monkeypatch.setenv("FORGE_SEED", "5")
    assert main(["train", "--config", str(cfg), "--data", str(d), "--out", str(run)]) == 0
    assert "seed = 5" in (run / "config.txt").read_text()
    assert len((run / "losses.csv").read_text().splitlines()) == 3
    assert main(["eval", "--checkpoint", str(run / "model.tfck"), "--data", str(d), "--out", str(ev),
                 "--distortion", "NONE", "--distortion", "JPEG:50", "--masks"]) == 0
    rep = json.loads((ev / "metrics.json").read_text())
    assert [r["distortion"] for r in rep["results"]] == ["None", "JPEG (q=50)"]
    assert len(list((ev / "masks").glob("*.png"))) == 8
    assert main(["report", str(ev), "--out", str(tmp_path / "all.csv")]) == 0
    assert (tmp_path / "all.csv").read_text().startswith("run,distortion")


def test_distort_command(tmp_path):
    main(["gen", "--n", "4", "--seed", "1", "--out", str(tmp_path / "d")])
    src = tmp_path / "d" / "images" / "00000.png"
    assert main(["distort", "--image", str(src), "--spec", "RESIZE:0.25", "--out", str(tmp_path / "o.png")]) == 0
    assert read_png(tmp_path / "o.png").shape == (3, 16, 16)
    assert main(["distort", "--image", str(src), "--spec", "BLUR:3", "--out", str(tmp_path / "x.png")]) != 0
