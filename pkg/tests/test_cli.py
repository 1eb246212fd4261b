import hashlib
import json
import shutil
import subprocess

import numpy as np
import pytest

from distreward.cli import main
from distreward.diversity import vendi_score
from distreward.gauss_stats import accumulate_stats, frechet_distance
from distreward.io import write_embeddings, write_stats
from distreward.toy_diffusion import DenoiserModel, save_checkpoint

from conftest import CONFIGS


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_fad_fixtures(capsys, data_dir):
    a, b, c = (data_dir / f"fixture_{k}.txt" for k in "abc")
    assert run(capsys, "fad", "--gen", a, "--ref", b)[1] == "1.000000\n"
    assert run(capsys, "fad", "--gen", a, "--ref", c)[1] == "1.000000\n"
    assert run(capsys, "fad", "--gen", a, "--ref", a)[1] == "0.000000\n"


def test_fad_matches_library(capsys, tmp_path, rng):
    g, r = rng.standard_normal((40, 4)), rng.standard_normal((60, 4)) + 0.3
    write_embeddings(tmp_path / "g.bin", g)
    write_embeddings(tmp_path / "r.txt", r)
    write_stats(tmp_path / "r.json", accumulate_stats(r))
    want = f"{frechet_distance(accumulate_stats(g), accumulate_stats(r)):.6f}\n"
    assert run(capsys, "fad", "--gen", tmp_path / "g.bin", "--ref", tmp_path / "r.txt")[1] == want
    assert run(capsys, "fad", "--gen", tmp_path / "g.bin", "--ref-stats", tmp_path / "r.json")[1] == want
    assert run(capsys, "vendi", "--input", tmp_path / "g.bin")[1] == f"{vendi_score(g):.6f}\n"


def test_malformed_input_exit_2(capsys, tmp_path, data_dir):
    bad = tmp_path / "bad.txt"
    bad.write_text("2 2\n1 2\n3\n")
    code, _, err = run(capsys, "fad", "--gen", bad, "--ref", data_dir / "fixture_a.txt")
    assert code == 2 and "line 3" in err and "record 2" in err
    assert run(capsys, "fad", "--gen", tmp_path / "missing.txt", "--ref", bad)[0] == 2


def test_stats_select_prune(capsys, tmp_path, rng):
    write_embeddings(tmp_path / "d1.txt", rng.standard_normal((8, 2)))
    write_embeddings(tmp_path / "d2.txt", rng.standard_normal((8, 2)) + 0.5)
    write_embeddings(tmp_path / "ref.txt", rng.standard_normal((100, 2)))
    assert run(capsys, "stats", "--input", tmp_path / "ref.txt", "--out", tmp_path / "ref.json")[0] == 0
    code, out, _ = run(capsys, "select", "--d1", tmp_path / "d1.txt", "--d2", tmp_path / "d2.txt",
                       "--ref-stats", tmp_path / "ref.json", "--out", tmp_path / "sel.json")
    sel = json.loads((tmp_path / "sel.json").read_text())
    assert code == 0 and sel["reward_pos"] >= max(sel["reward_d1"], sel["reward_d2"])
    code, _, _ = run(capsys, "select", "--d1", tmp_path / "d1.txt", "--d2", tmp_path / "d2.txt",
                     "--reward", "vendi", "--shards", 2, "--out", tmp_path / "sh.json")
    assert code == 0 and len(json.loads((tmp_path / "sh.json").read_text())["shards"]) == 2
    assert run(capsys, "select", "--d1", tmp_path / "d1.txt", "--d2", tmp_path / "d2.txt")[0] == 2
    code, out, _ = run(capsys, "prune", "--candidates", tmp_path / "d1.txt", "--size", 4,
                       "--ref", tmp_path / "ref.txt", "--out", tmp_path / "keep.txt")
    assert code == 0 and len((tmp_path / "keep.txt").read_text().split()) == 4


def test_persong_fad(capsys, tmp_path, rng):
    write_embeddings(tmp_path / "f.txt", rng.standard_normal((10, 2)))
    write_embeddings(tmp_path / "ref.txt", rng.standard_normal((50, 2)))
    code, out, _ = run(capsys, "persong-fad", "--frames", tmp_path / "f.txt", "--ref", tmp_path / "ref.txt")
    assert code == 0 and out.startswith(str(tmp_path / "f.txt") + "\t")


def test_report_wins(capsys):
    code, out, _ = run(capsys, "report", "--wins", 253, "--trials", 420)
    assert code == 0
    assert "clopper_pearson_lower=0.561" in out and "posterior_prob_win=0.99998" in out
    assert run(capsys, "report", "--wins", 5, "--trials", 3)[0] == 2


def test_bad_config_key_exit_2(capsys, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[train]\nbogus = 1\n")
    code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "run")
    assert code == 2 and "train.bogus" in err


def _tiny_config(tmp_path, iterations):
    text = (CONFIGS / "smoke.toml").read_text()
    text = text.replace("iterations = 20", f"iterations = {iterations}")
    text += "steps = 10\nhook_prompts = 8\n"
    text = text.replace("[model]\npretrain_steps = 300", "[model]\npretrain_steps = 300\nwidth = 32")
    text = text.replace("[train]\n", "[train]\nbatch_size = 16\ndemo_steps = 10\n")
    p = tmp_path / f"c{iterations}.toml"
    p.write_text(text)
    return p


def test_train_zero_iterations(capsys, tmp_path):
    code, _, _ = run(capsys, "train", "--config", _tiny_config(tmp_path, 0), "--out", tmp_path / "run")
    assert code == 0
    assert [p.name for p in (tmp_path / "run" / "checkpoints").iterdir()] == ["baseline.json"]


def test_train_eval_deterministic(capsys, tmp_path, data_dir):
    cfg = _tiny_config(tmp_path, 4)
    hashes = []
    for k in range(2):
        assert run(capsys, "train", "--config", cfg, "--out", tmp_path / f"run{k}")[0] == 0
        hashes.append(hashlib.sha256((tmp_path / f"run{k}" / "report.json").read_bytes()).hexdigest())
    assert hashes[0] == hashes[1]
    rep = json.loads((tmp_path / "run0" / "report.json").read_text())
    assert {"config", "summary", "checkpoints", "reward_series", "eval_series", "final_eval"} <= set(rep)
    ev = rep["final_eval"]
    assert {"schema", "version", "n_prompts", "metrics", "target_win_rate", "input_hashes", "seeds"} <= set(ev)

    ckpt = tmp_path / "run0" / "checkpoints"
    args = ["eval", "--model", ckpt / "final.json", "--baseline", ckpt / "baseline.json",
            "--prompts", data_dir / "prompts.tsv", "--rewards", cfg]
    outs = [run(capsys, *args, "--out", tmp_path / f"e{k}.json")[0] for k in range(2)]
    assert outs == [0, 0]
    assert (tmp_path / "e0.json").read_bytes() == (tmp_path / "e1.json").read_bytes()

    run(capsys, "eval", "--model", ckpt / "baseline.json", "--baseline", ckpt / "baseline.json",
        "--prompts", data_dir / "prompts.tsv", "--rewards", cfg, "--out", tmp_path / "same.json")
    same = json.loads((tmp_path / "same.json").read_text())
    assert all(m["win_rate"] == 0.5 for m in same["metrics"].values())

    code, out, _ = run(capsys, "report", "--run", tmp_path / "run0", "--csv", tmp_path / "t.csv")
    assert code == 0 and "dataset_fad" in out and (tmp_path / "t.csv").exists()


def test_checkpoint_version_mismatch_exit_2(capsys, tmp_path, data_dir):
    m = DenoiserModel.init(2, 2, width=4, seed=0)
    save_checkpoint(m, tmp_path / "ok.json")
    d = json.loads((tmp_path / "ok.json").read_text())
    d["version"] = 99
    (tmp_path / "bad.json").write_text(json.dumps(d))
    code, _, err = run(capsys, "eval", "--model", tmp_path / "bad.json", "--baseline", tmp_path / "ok.json",
                       "--prompts", data_dir / "prompts.tsv", "--rewards", CONFIGS / "smoke.toml")
    assert code == 2 and "version" in err


def test_pretrain_command(capsys, tmp_path):
    code, out, _ = run(capsys, "pretrain", "--out", tmp_path / "m.json", "--steps", 5)
    assert code == 0 and (tmp_path / "m.json").exists()


@pytest.mark.skipif(shutil.which("distreward") is None, reason="console script not installed")
def test_console_script(data_dir):
    res = subprocess.run(["distreward", "fad", "--gen", str(data_dir / "fixture_a.txt"),
                          "--ref", str(data_dir / "fixture_b.txt")], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout == "1.000000\n"
