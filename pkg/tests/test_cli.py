import csv
import math

import numpy as np
import pytest

from precipgan import cli
from precipgan import data as dp
from precipgan import evaluation as ev
from precipgan import networks as nw

SMALL = """# tiny settings for fast tests
size=16
val_fraction=0.2
test_fraction=0.2
"""

NET = """gen_channels=2,2
gen_kernel_sizes=3,3,3
critic_widths=4,8
batch_size=4
epochs=1
"""


@pytest.fixture
def corpus(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text(SMALL)
    out = tmp_path / "corpus"
    assert cli.main(["synth", "--config", str(cfg), "--n", "10", "--seed", "1", "--out", str(out)]) == 0
    return out


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# synth ---------------------------------------------------------------------------


def test_synth_deterministic(tmp_path, corpus, capsys):
    cfg = tmp_path / "synth.cfg"
    again = tmp_path / "again"
    assert cli.main(["synth", "--config", str(cfg), "--n", "10", "--seed", "1", "--out", str(again)]) == 0
    assert tree_bytes(corpus) == tree_bytes(again)
    assert "train=6 validation=2 test=2" in capsys.readouterr().out


def test_synth_empty(tmp_path):
    out = tmp_path / "empty"
    assert cli.main(["synth", "--n", "0", "--out", str(out)]) == 0
    assert dp.read_manifest(out / "manifest.csv") == []
    assert "n_fields=0" in (out / "resolved_config.txt").read_text()


def test_synth_fields_pass_filter(corpus):
    for name, split, art in dp.read_manifest(corpus / "manifest.csv"):
        f = dp.read_field(corpus / split / "hr" / name)
        assert dp.sample_filter(f) and not art
        lr = dp.read_field(corpus / split / "lr_x4" / name)
        np.testing.assert_array_equal(lr.grid, dp.downsample(f, 4).grid)


def test_synth_artifacts(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text(SMALL + "artifact_fraction=0.5\nartifact_size=4\n")
    out = tmp_path / "c"
    assert cli.main(["synth", "--config", str(cfg), "--n", "10", "--out", str(out)]) == 0
    rows = dp.read_manifest(out / "manifest.csv")
    flagged = [r for r in rows if r[2]]
    assert len(flagged) == 1 and flagged[0][1] == "test"


def test_synth_config_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key=1\n")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    cfg.write_text("size=abc\n")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    cfg.write_text("artifact_split=nowhere\n")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["synth", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "x")]) == 2
    assert "error:" in capsys.readouterr().err


# train / infer -------------------------------------------------------------------------


def test_train_modes_isolated_and_infer(tmp_path, corpus):
    cfg = tmp_path / "net.cfg"
    cfg.write_text(NET)
    runs = tmp_path / "runs"
    for mode in ("srcnn", "wgan"):
        assert cli.main(["train", "--config", str(cfg), "--corpus", str(corpus), "--mode", mode, "--out", str(runs)]) == 0
    assert sorted(p.name for p in runs.iterdir()) == ["srcnn_x4", "wgan_x4"]
    assert (runs / "srcnn_x4" / "best.ckpt").exists()
    text = (runs / "wgan_x4" / "resolved_config.txt").read_text()
    assert "train.alpha=10.0" in text and "critic.widths=4,8" in text

    ck = runs / "wgan_x4" / "epoch_0001.ckpt"
    outs = []
    for name in ("a", "b"):
        o = tmp_path / name
        assert cli.main(["infer", "--checkpoint", str(ck), "--lr-dir", str(corpus / "test" / "lr_x4"), "--out", str(o)]) == 0
        outs.append(tree_bytes(o))
    assert outs[0] == outs[1]
    f = dp.read_field(tmp_path / "a" / "f000008.pfld")
    assert f.grid.shape == (16, 16) and f.pixel_km == 1.0


def test_train_scale8(tmp_path, corpus):
    cfg = tmp_path / "net.cfg"
    cfg.write_text(NET)
    runs = tmp_path / "runs"
    assert cli.main(["train", "--config", str(cfg), "--corpus", str(corpus), "--scale", "8", "--out", str(runs)]) == 0
    g = nw.load_network(runs / "srcnn_x8" / "epoch_0001.ckpt", "generator")
    assert g.config.scale_factor == 8


def test_train_resume_identical(tmp_path, corpus):
    cfg = tmp_path / "net.cfg"
    cfg.write_text(NET.replace("epochs=1", "epochs=2"))
    full = tmp_path / "full"
    part = tmp_path / "part"
    base = ["train", "--config", str(cfg), "--corpus", str(corpus)]
    assert cli.main(base + ["--out", str(full)]) == 0
    assert cli.main(base + ["--epochs", "1", "--out", str(part)]) == 0
    assert cli.main(base + ["--out", str(part)]) == 0
    a = (full / "srcnn_x4" / "loss_history.csv").read_bytes()
    b = (part / "srcnn_x4" / "loss_history.csv").read_bytes()
    assert a == b


def test_infer_zero_network(tmp_path):
    g = nw.build_generator(nw.GeneratorConfig(channels=[2, 2], kernel_sizes=[3, 3, 3]), 0)
    for t in g.values():
        t.data[...] = 0
    nw.save_network(g, tmp_path / "zero.ckpt")
    lr = tmp_path / "lr"
    lr.mkdir()
    dp.write_field(lr / "z.pfld", dp.PrecipField(np.zeros((4, 4)), pixel_km=4.0))
    assert cli.main(["infer", "--checkpoint", str(tmp_path / "zero.ckpt"), "--lr-dir", str(lr), "--out", str(tmp_path / "o")]) == 0
    out = dp.read_field(tmp_path / "o" / "z.pfld")
    assert out.grid.shape == (16, 16) and np.all(out.grid == 0)


def test_infer_errors(tmp_path, corpus):
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    args = ["infer", "--checkpoint", str(tmp_path / "junk.ckpt"), "--lr-dir", str(corpus / "test" / "lr_x4"), "--out", str(tmp_path / "o")]
    assert cli.main(args) == 5


# evaluate / rank ---------------------------------------------------------------------------


def test_evaluate_self_and_aggregates(tmp_path, corpus):
    hr = corpus / "train" / "hr"
    out = tmp_path / "ev"
    assert cli.main(["evaluate", "--truth", str(hr), "--pred", f"HR={hr}", "--pred", f"LR={corpus / 'train' / 'lr_x4'}", "--out", str(out)]) == 0
    reports, aggs = ev.read_report_csv(out / "report.csv")
    assert np.all(reports["HR"].column("rmse") == 0)
    c = reports["HR"].column("csi10")
    assert np.all(c[np.isfinite(c)] == 1.0)
    assert np.all(np.isnan(reports["HR"].column("critic_score")))
    for m, rep in reports.items():
        for col in ("rmse", "csi10", "csi15"):
            v = rep.column(col)
            v = v[np.isfinite(v)]
            expect = v.mean() if v.size else math.nan
            assert aggs[m][col] == pytest.approx(expect, rel=1e-12, nan_ok=True)
    assert (out / "spectrum_HR.csv").exists() and (out / "spectrum_LR.csv").exists()


def test_evaluate_id_mismatch(tmp_path, corpus):
    args = ["evaluate", "--truth", str(corpus / "train" / "hr"), "--pred", f"X={corpus / 'test' / 'hr'}", "--out", str(tmp_path / "e")]
    assert cli.main(args) == 6


def _ranked_report(tmp_path, corpus):
    crit = nw.build_critic(nw.CriticConfig(input_size=16, widths=[4, 8]), 0)
    nw.save_network(crit, tmp_path / "critic.ckpt")
    hr = corpus / "train" / "hr"
    out = tmp_path / "ev"
    args = ["evaluate", "--truth", str(hr), "--pred", f"WGAN={corpus / 'train' / 'lr_x4'}", "--critic", str(tmp_path / "critic.ckpt"), "--out", str(out)]
    assert cli.main(args) == 0
    assert (out / "critic_scores.csv").exists()
    return out / "report.csv"


def test_rank_k3_matches_oracle(tmp_path, corpus, capsys):
    report = _ranked_report(tmp_path, corpus)
    capsys.readouterr()
    assert cli.main(["rank", "--report", str(report), "--k", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6
    reports, _ = ev.read_report_csv(report)
    neg, pos, _ = ev.rank_by_critic_difference(reports["WGAN"], 3)
    assert [ln.split()[2] for ln in lines] == [r["id"] for r in neg + pos]
    with open(report.with_name("ranking.csv")) as f:
        assert len(list(csv.reader(f))) == 7


def test_rank_k0(tmp_path, corpus, capsys):
    report = _ranked_report(tmp_path, corpus)
    capsys.readouterr()
    assert cli.main(["rank", "--report", str(report), "--k", "0"]) == 0
    assert capsys.readouterr().out == ""


def test_rank_bad_report(tmp_path):
    (tmp_path / "r.csv").write_text("garbage\n")
    assert cli.main(["rank", "--report", str(tmp_path / "r.csv")]) == 2
    assert cli.main(["rank", "--report", str(tmp_path / "missing.csv")]) == 3
