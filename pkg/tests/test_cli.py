import json

import numpy as np
import pytest

from fcp.cli import _variant_list, main
from fcp.fileio import load_mask_pgm, save_feature_map, save_mask_pgm
from fcp.harness import RunConfig, load_checkpoint, sample_episode

TINY_TEXT = """\
# tiny run for CLI tests
channels = 8
height = 12
width = 12
min_fg = 4
n_tokens = 3
hidden = 4
total_steps = 2
batch = 1
eval_episodes = 3
log_every = 0
"""


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_TEXT)
    return path


@pytest.fixture
def checkpoint(tmp_path, config_path, capsys):
    out = tmp_path / "tiny.ckpt"
    assert main(["train", "--config", str(config_path), "--out", str(out), "--log-every", "1"]) == 0
    capsys.readouterr()
    return out


def test_train_writes_log_and_checkpoint(tmp_path, config_path, capsys):
    out = tmp_path / "s3.ckpt"
    assert main(["train", "--config", str(config_path), "--seed", "3", "--steps", "3", "--out", str(out), "--log-every", "1"]) == 0
    rows = json_lines(capsys.readouterr().out)
    assert [r["step"] for r in rows if r["event"] == "step"] == [0, 1, 2]
    assert rows[-1] == {"event": "checkpoint", "path": str(out), "steps": 3, "seed": 3}
    _, cfg = load_checkpoint(out)
    assert (cfg.seed, cfg.total_steps, cfg.channels) == (3, 3, 8)


def test_eval_emits_episodes_summary_and_masks(tmp_path, checkpoint, capsys):
    masks = tmp_path / "masks"
    assert main(["eval", "--checkpoint", str(checkpoint), "--episodes", "2", "--masks", str(masks)]) == 0
    rows = json_lines(capsys.readouterr().out)
    assert [r["event"] for r in rows] == ["episode", "episode", "summary"]
    assert rows[-1]["episodes"] == 2 and 0.0 <= rows[-1]["miou"] <= 1.0
    pred = load_mask_pgm(masks / "episode00001_pred.pgm")
    assert pred.shape == (12, 12) and set(np.unique(pred)) <= {0, 1}


def test_pseudomask_compare_sampled_and_file_modes(tmp_path, checkpoint, capsys):
    assert main(["pseudomask-compare", "--checkpoint", str(checkpoint), "--episodes", "2"]) == 0
    summary = json_lines(capsys.readouterr().out)[-1]
    assert summary["episodes"] == 2 and {"conventional", "attention"} <= set(summary)

    cfg = RunConfig(channels=8, height=12, width=12, min_fg=4)
    ep = sample_episode(cfg.dataset(), "novel", np.random.default_rng(0), min_fg=4)
    files = {}
    for role, (g, f, m) in (("support", ep.support[0]), ("query", ep.query)):
        for kind, arr in (("sam", g), ("backbone", f)):
            files[f"{role}-{kind}"] = tmp_path / f"{role}_{kind}.fcpf"
            save_feature_map(files[f"{role}-{kind}"], arr)
        files[f"{role}-mask"] = tmp_path / f"{role}.pgm"
        save_mask_pgm(files[f"{role}-mask"], m)
    argv = ["pseudomask-compare", "--checkpoint", str(checkpoint), "--out", str(tmp_path / "pm")]
    for name, path in files.items():
        argv += [f"--{name}", str(path)]
    assert main(argv) == 0
    rows = json_lines(capsys.readouterr().out)
    assert rows[-1]["episodes"] == 1 and "iou" in rows[0]["conventional"]
    assert (tmp_path / "pm" / "episode00000_attention.pgm").exists()


def test_ablation_csv(tmp_path, config_path):
    out = tmp_path / "abl.csv"
    assert main(["ablation", "--config", str(config_path), "--variants", "a,f", "--seeds", "0", "--episodes", "2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("a,0,") and lines[2].startswith("f,0,")


def test_variant_groups_expand():
    assert _variant_list("components") == ["a", "e", "f"]
    assert _variant_list("steps,prompt") == ["T2", "T3", "T4", "T6", "prompt"]


def test_errors_exit_with_status_two(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("steps = 1\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    assert main(["ablation", "--config", str(bad), "--variants", "f"]) == 2
    assert "fcp: error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--bogus"])


def test_gradcheck_reports_and_fails_on_loose_errors(monkeypatch, capsys):
    # the full pipeline sweep is exercised by the gradient suite; keep this fast
    monkeypatch.setattr("fcp.cli.pipeline_checks", lambda tol: {})
    assert main(["gradcheck"]) == 0
    rows = json_lines(capsys.readouterr().out)
    assert rows[-1] == {"check": "summary", "failed": 0}
    assert all(r["passed"] for r in rows[:-1]) and len(rows) > 20
    assert main(["gradcheck", "--tol", "1e-30"]) == 1
