import csv
import io

import numpy as np
import pytest

from jointdiff import cli
from jointdiff import datagen as dg

TINY = """
n_train = 6
n_val = 4
diff.T = 10
diff.steps = 4
diff.batch = 4
diff.width = 8
diff.depth = 1
sample.n = 10
sr.steps = 2
sr.width = 8
seg.width = 4
seg.epochs = 1
seg.steps_per_epoch = 2
seg.batch = 4
sweep.R = 0,1
sweep.seeds = 2
ablate.R = 1
sfid.grid = 2
"""


def _run(tmp, cmd, *sets, out="run"):
    cfg = tmp / "c.txt"
    if not cfg.exists():
        cfg.write_text(TINY)
    return cli.main([cmd, "--config", str(cfg), "--set", f"out_dir={tmp / out}", *[a for s in sets for a in ("--set", s)]])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    for cmd in ("gen-data", "train-diff", "sample", "ratio-sweep"):
        assert _run(tmp, cmd) == 0, cmd
    return tmp


def test_sample_writes_valid_pairs(pipeline):
    syn = dg.load_corpus(pipeline / "run" / "synth" / "samples.satp")
    assert len(syn) == 10 and syn.shape == (32, 32)
    assert syn.masks().max() < 6
    assert syn.images().min() >= 0 and syn.images().max() <= 1


def test_sweep_row_arithmetic(pipeline):
    rows = list(csv.DictReader(io.StringIO((pipeline / "run" / "results" / "sweep.csv").read_text())))
    runs = [r for r in rows if r["kind"] == "run"]
    agg = [r for r in rows if r["kind"] == "mean"]
    assert len(runs) == 4 and len(agg) == 2
    for a in agg:
        vals = [float(r["miou"]) for r in runs if r["R"] == a["R"]]
        m, se = cli.mean_se(vals)
        assert float(a["miou"]) == pytest.approx(m, abs=1e-6)
        assert float(a["se"]) == pytest.approx(se, abs=1e-6)
    assert (pipeline / "run" / "reports" / "sweep.svg").exists()


def test_same_config_twice_identical_bytes(pipeline):
    for cmd in ("gen-data", "train-diff", "sample", "ratio-sweep"):
        assert _run(pipeline, cmd, out="again") == 0
    for rel in ("data/train.satp", "synth/samples.satp", "results/sweep.csv", "reports/sweep.svg", "models/g.satw", "logs/g_loss.csv"):
        a, b = pipeline / "run" / rel, pipeline / "again" / rel
        if rel.endswith("loss.csv"):  # wall_ms column is timing, compare the rest
            strip = lambda p: [ln.rsplit(",", 1)[0] for ln in p.read_text().splitlines()]
            assert strip(a) == strip(b)
        else:
            assert a.read_bytes() == b.read_bytes(), rel


def test_inputs_not_mutated_and_manifest(pipeline):
    train = pipeline / "run" / "data" / "train.satp"
    before = train.read_bytes()
    assert _run(pipeline, "train-seg") == 0
    assert train.read_bytes() == before
    text = (pipeline / "run" / "manifests" / "train-seg.txt").read_text()
    assert "input_hash = " in text and "artifact = " in text and "wall_s.train-seg" in text
    assert "seg_width = 4" in text


def test_missing_artifact_names_producer(tmp_path, capsys):
    assert _run(tmp_path, "sample") == 3
    assert "train-diff" in capsys.readouterr().err
    assert _run(tmp_path, "report") == 3
    assert "ratio-sweep" in capsys.readouterr().err


@pytest.mark.parametrize("bad", ["bogus = 1", "sweep.R = 0,6", "n_train = many", "diff.encoding = gray", "no equals sign"])
def test_config_errors_exit_2(tmp_path, bad):
    (tmp_path / "c.txt").write_text(TINY + bad + "\n")
    assert _run(tmp_path, "gen-data") == 2


def test_missing_scene_spec_is_config_error(tmp_path):
    assert _run(tmp_path, "gen-data", f"scene_spec={tmp_path / 'nope.txt'}") == 2


def test_config_parser():
    cfg = cli.ExperimentConfig.parse("seed = 4  # master\nsweep.R = 0, 2\ndiff.ema = none\n", ["aug.balance=false"])
    assert cfg.seed == 4 and cfg.sweep_R == (0, 2) and cfg.diff_ema is None and cfg.aug_balance is False
    back = cli.ExperimentConfig.parse(cfg.to_text())
    assert back == cfg
    with pytest.raises(cli.ConfigError, match="config:2"):
        cli.ExperimentConfig.parse("seed = 1\nsed = 2\n")


def test_stage_seeds_derive_from_master():
    assert cli.derive_seed(0, "data") == cli.derive_seed(0, "data")
    assert cli.derive_seed(0, "data") != cli.derive_seed(1, "data")
    assert cli.derive_seed(0, "data") != cli.derive_seed(0, "segmenter")


def test_numeric_failure_exit_4(tmp_path, monkeypatch):
    assert _run(tmp_path, "gen-data") == 0

    def boom(*a, **k):
        raise FloatingPointError("diffusion loss non-finite at step 0")

    monkeypatch.setattr(cli.df, "train_diffusion", boom)
    assert _run(tmp_path, "train-diff") == 4


# ---------------------------------------------------------------- report rendering


def _sweep_csv(path, rows):
    path.write_text(",".join(cli.SWEEP_HEADER) + "\n" + "".join(r + "\n" for r in rows))
    return path


def test_render_empty_and_single_point(tmp_path):
    empty = cli.sweep_svg(cli.read_sweep_csv(_sweep_csv(tmp_path / "e.csv", [])))
    assert "<line" in empty and "<circle" not in empty and "<polyline" not in empty
    one = cli.sweep_svg(cli.read_sweep_csv(_sweep_csv(tmp_path / "o.csv", ["mean,diffusion,1,,3,0.5,0.6,0.01"])))
    assert one.count("<circle") == 2  # marker plus legend swatch
    assert "<polyline" not in one


def test_render_deterministic_and_lines(tmp_path):
    p = _sweep_csv(tmp_path / "s.csv", ["mean,diffusion,0,,2,0.4,0.5,0.02", "mean,diffusion,2,,2,0.45,0.5,0.01", "mean,cutout,1,,2,0.41,0.5,0.0"])
    a = cli.render_report([p], tmp_path / "a")
    b = cli.render_report([p], tmp_path / "b")
    assert [x.read_bytes() for x in a] == [x.read_bytes() for x in b]
    svg = a[0].read_text()
    assert svg.count("<polyline") == 1
    assert "| cutout | 1 | 2 | 0.4100 |" in a[1].read_text()


@pytest.mark.parametrize("rows,line", [(["run,diffusion,x,0,1,0.4,0.5,"], 2), (["mean,diffusion,0,,2,0.4,0.5,0.1", "mean,diffusion,1"], 3), (["what,diffusion,0,,2,0.4,0.5,0.1"], 2)])
def test_malformed_csv_reports_line(tmp_path, rows, line):
    with pytest.raises(cli.ConfigError, match=f"s.csv:{line}"):
        cli.read_sweep_csv(_sweep_csv(tmp_path / "s.csv", rows))
    (tmp_path / "h.csv").write_text("a,b\n")
    with pytest.raises(cli.ConfigError, match="h.csv:1"):
        cli.read_sweep_csv(tmp_path / "h.csv")


def test_ablation_table_covers_grid():
    rows = [[e, p, str(r), "1", "0.5", "0.5", ""] for e, p in cli.ABLATION_GRID for r in (1, 3)]
    t = cli.ablation_table(rows)
    assert t.count("\n") == 5 and "R=3 mIoU" in t and "| onehot | eps | 0.5000 | 0.5000 |" in t


def test_mean_se():
    m, se = cli.mean_se([1.0, 2.0, 3.0])
    assert m == 2.0 and se == pytest.approx(np.std([1, 2, 3], ddof=1) / np.sqrt(3))
    assert cli.mean_se([0.7]) == (0.7, 0.0)
