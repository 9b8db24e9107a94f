"""Command-line driver: every pipeline stage as a subcommand over one experiment directory.

    jointdiff <subcommand> [--config FILE] [--set key=value ...]

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 numeric failure (non-finite loss or metric).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import augment as au
from . import codec, datagen as dg, diffusion as df, metrics as mt, segment as sg
from . import ndcore as nd
from .denoiser import DenoiserConfig

log = logging.getLogger("jointdiff")

SUBCOMMANDS = (
    "gen-data", "train-diff", "sample", "train-sr", "superres", "build-augset",
    "train-seg", "eval", "ratio-sweep", "ablate", "report",
)
ABLATION_GRID = (("onehot", "eps"), ("bin", "x0"), ("bin", "eps"))
SWEEP_HEADER = ["kind", "plan", "R", "seed", "n", "miou", "f1", "se"]
ABLATION_HEADER = ["encoding", "predict", "R", "n", "miou", "f1", "se"]


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------- configuration


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _names(v: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in v.split(",") if x.strip())


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "none") else int(v)


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none") else float(v)


# field annotations are strings under postponed evaluation
_PARSERS = {
    "int": int, "float": float, "str": str, "bool": _bool,
    "tuple[int, ...]": _ints, "tuple[str, ...]": _names,
    "int | None": _opt_int, "float | None": _opt_float,
}


@dataclass
class ExperimentConfig:
    out_dir: str = "run"
    scene_spec: str = ""  # key=value SceneSpec file; empty means the built-in default
    seed: int = 0
    num_classes: int = 6
    n_train: int = 50
    n_val: int = 200
    # diffusion
    diff_T: int = 200
    diff_schedule: str = "scaled"  # "scaled": endpoints stretched by 1000/T; "linear": fixed 1e-4..2e-2
    diff_steps: int = 3000
    diff_batch: int = 16
    diff_lr: float = 5e-4
    diff_width: int = 32
    diff_depth: int = 2
    diff_ema: float | None = None
    diff_predict: str = "x0"
    diff_encoding: str = "bin"
    diff_clip: bool = True
    diff_sigma: str = "beta"
    sample_n: int = 100
    sample_batch: int = 100
    # super-resolution
    sr_steps: int = 2000
    sr_width: int = 32
    sr_input: str = ""  # SATP of low-resolution pairs; default: the training set downsampled
    # segmenter
    seg_width: int = 16
    seg_epochs: int = 20
    seg_batch: int = 16
    seg_lr: float = 2e-3
    seg_steps_per_epoch: int | None = 25
    # augmentation set / sweeps
    aug_R: int = 1
    aug_balance: bool = True
    sweep_R: tuple[int, ...] = (0, 1, 2)
    sweep_seeds: int = 5
    sweep_baselines: tuple[str, ...] = ()
    baseline_R: int = 1
    ablate_R: tuple[int, ...] = (1, 3)
    ablate_seeds: int = 1
    eval_features: bool = True
    sfid_grid: int = 8

    def __post_init__(self):
        errs = []
        if not set(self.sweep_R) <= set(range(6)):
            errs.append(f"sweep_R must be a subset of 0..5, got {self.sweep_R}")
        if not set(self.ablate_R) <= set(range(6)):
            errs.append(f"ablate_R must be a subset of 0..5, got {self.ablate_R}")
        if self.aug_R < 0 or self.baseline_R < 0:
            errs.append("ratios must be non-negative")
        if self.diff_predict not in df.PREDICTION_MODES:
            errs.append(f"diff_predict must be one of {df.PREDICTION_MODES}")
        if self.diff_encoding not in codec.ENCODINGS:
            errs.append(f"diff_encoding must be one of {codec.ENCODINGS}")
        if self.diff_schedule not in ("scaled", "linear"):
            errs.append("diff_schedule must be 'scaled' or 'linear'")
        if self.diff_sigma not in df.SIGMA_MODES:
            errs.append(f"diff_sigma must be one of {df.SIGMA_MODES}")
        bad = set(self.sweep_baselines) - set(au.BASELINES)
        if bad:
            errs.append(f"unknown baselines {sorted(bad)}; choose from {au.BASELINES}")
        for name in ("n_train", "n_val", "diff_T", "sample_n", "sweep_seeds", "ablate_seeds"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if errs:
            raise ConfigError("; ".join(errs))

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def parse(cls, text: str, overrides: list[str] = (), source: str = "config") -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        lines = [(f"{source}:{i}", ln) for i, ln in enumerate(text.splitlines(), 1)]
        lines += [("--set", o) for o in overrides]
        for where, raw in lines:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{where}: expected key = value, got {raw.strip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace(".", "_").replace("-", "_")
            if key not in types:
                raise ConfigError(f"{where}: unknown key {key!r}")
            parser = _PARSERS[types[key]]
            try:
                values[key] = parser(val)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}: bad value for {key}: {val!r} ({exc})") from exc
        try:
            return cls(**values)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif v is None:
                v = "none"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    # ---- derived configs

    def scene(self) -> dg.SceneSpec:
        if not self.scene_spec:
            return dg.SceneSpec()
        path = Path(self.scene_spec)
        if not path.exists():
            raise ConfigError(f"scene_spec file {path} does not exist")
        try:
            return dg.SceneSpec.from_text(path.read_text())
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def denoiser(self, channels: int, conditional: bool = False) -> DenoiserConfig:
        width = self.sr_width if conditional else self.diff_width
        return DenoiserConfig(in_channels=channels, base_width=width, depth=self.diff_depth, conditional=conditional, channel_mults=(1,) * (self.diff_depth + 1))

    def train_config(self, steps: int | None = None, seed_offset: int = 0) -> df.TrainConfig:
        return df.TrainConfig(
            batch_size=self.diff_batch,
            steps=self.diff_steps if steps is None else steps,
            lr=self.diff_lr,
            seed=derive_seed(self.seed, "diffusion", seed_offset),
            ema_decay=self.diff_ema,
            log_every=max(1, min(50, self.diff_steps)),
        )

    def schedule(self) -> df.NoiseSchedule:
        if self.diff_schedule == "scaled":
            return df.scaled_linear_schedule(self.diff_T)
        return df.linear_schedule(self.diff_T)

    def sampler(self, predict: str | None = None) -> df.SamplerConfig:
        return df.SamplerConfig(predict or self.diff_predict, self.diff_clip, self.diff_sigma)

    def seg_config(self, seed_index: int) -> sg.SegConfig:
        return sg.SegConfig(
            num_classes=self.num_classes,
            base_width=self.seg_width,
            epochs=self.seg_epochs,
            batch_size=self.seg_batch,
            lr=self.seg_lr,
            seed=derive_seed(self.seed, "segmenter", seed_index),
            steps_per_epoch=self.seg_steps_per_epoch,
        )


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    return int(nd.Rng(master).generator(f"seed.{stage}", index).integers(0, 2**31 - 1))


# ---------------------------------------------------------------- run context


@dataclass
class Run:
    cfg: ExperimentConfig
    command: str
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    stages: dict[str, float] = field(default_factory=dict)

    @property
    def root(self) -> Path:
        return Path(self.cfg.out_dir)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, rel: str, producer: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise MissingArtifact(f"missing {p}; run `jointdiff {producer}` first")
        self.inputs.append(p)
        return p

    def wrote(self, p: Path) -> Path:
        self.outputs.append(Path(p))
        return Path(p)

    def stage(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.stages[name] = run.stages.get(name, 0.0) + time.perf_counter() - self.t

        return _Timer()

    def write_manifest(self) -> Path:
        h = hashlib.sha256(self.cfg.to_text().encode())
        for p in sorted(set(self.inputs)):
            for f in sorted(p.rglob("*")) if p.is_dir() else [p]:
                if f.is_file():
                    h.update(f.name.encode())
                    h.update(f.read_bytes())
        lines = [
            f"command = {self.command}",
            f"finished = {time.strftime('%Y-%m-%dT%H:%M:%S')}",
            f"input_hash = {h.hexdigest()}",
        ]
        lines += [f"input = {p}" for p in sorted(set(self.inputs))]
        lines += [f"artifact = {p}" for p in self.outputs]
        lines += [f"wall_s.{k} = {v:.3f}" for k, v in self.stages.items()]
        lines.append("")
        lines.append("# config")
        lines.append(self.cfg.to_text())
        path = self.path("manifests", f"{self.command}.txt")
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines))
        os.replace(tmp, path)
        return path


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _joint(corpus: dg.Corpus, encoding: str) -> np.ndarray:
    return np.stack([codec.pack_joint(p, corpus.num_classes, encoding) for p in corpus])


def _unpack_all(samples: np.ndarray, k: int, encoding: str) -> dg.Corpus:
    return dg.Corpus([codec.unpack_joint(s, k, encoding) for s in samples], k)


def _check_finite(rows: list[dict], what: str) -> None:
    for r in rows:
        if not np.isfinite(r["miou"]):
            raise FloatingPointError(f"{what}: non-finite mIoU at epoch {r['epoch']}")


# ---------------------------------------------------------------- stages


def cmd_gen_data(run: Run) -> None:
    cfg = run.cfg
    spec = cfg.scene()
    if spec.num_classes != cfg.num_classes:
        raise ConfigError(f"scene spec has K={spec.num_classes} but num_classes = {cfg.num_classes}")
    with run.stage("generate"):
        # one corpus, split, so train and val come from the same stream family
        full = dg.gen_corpus(spec, cfg.n_train + cfg.n_val, derive_seed(cfg.seed, "data"))
    dg.save_corpus(full[: cfg.n_train], run.wrote(run.path("data", "train.satp")))
    dg.save_corpus(full[cfg.n_train :], run.wrote(run.path("data", "val.satp")))
    _write_text_atomic(run.wrote(run.path("data", "scene.txt")), spec.to_text())


def _train_generator(run: Run, corpus: dg.Corpus, encoding: str, predict: str, seed_offset: int = 0) -> df.DiffusionModel:
    cfg = run.cfg
    data = _joint(corpus, encoding)
    with run.stage(f"train-diff[{encoding},{predict}]"):
        return df.train_diffusion(
            data, cfg.denoiser(data.shape[-1]), cfg.train_config(seed_offset=seed_offset),
            cfg.sampler(predict), cfg.schedule(), corpus.num_classes, encoding,
        )


def cmd_train_diff(run: Run) -> None:
    cfg = run.cfg
    train = dg.load_corpus(run.need("data/train.satp", "gen-data"))
    model = _train_generator(run, train, cfg.diff_encoding, cfg.diff_predict)
    model.save(run.wrote(run.path("models", "g.satw")))
    df.write_loss_csv(run.wrote(run.path("logs", "g_loss.csv")), model.loss_log)


def _sample(run: Run, model: df.DiffusionModel, n: int, shape, stream: str = "sample") -> dg.Corpus:
    cfg = run.cfg
    with run.stage(f"sample[{stream}]"):
        s = df.sample_joint(model, n, shape, nd.Rng(derive_seed(cfg.seed, stream)), cfg.sampler(model.prediction_mode), cfg.sample_batch)
    return _unpack_all(s, model.num_classes, model.encoding)


def cmd_sample(run: Run) -> None:
    cfg = run.cfg
    model = df.DiffusionModel.load(run.need("models/g.satw", "train-diff"))
    train = dg.load_corpus(run.need("data/train.satp", "gen-data"))
    syn = _sample(run, model, cfg.sample_n, train.shape)
    dg.save_corpus(syn, run.wrote(run.path("synth", "samples.satp")))


def cmd_train_sr(run: Run) -> None:
    cfg = run.cfg
    train = dg.load_corpus(run.need("data/train.satp", "gen-data"))
    high = _joint(train, cfg.diff_encoding)
    low = _joint(dg.downsample_corpus(train), cfg.diff_encoding)
    denoiser = cfg.denoiser(high.shape[-1], conditional=True)
    with run.stage("train-sr"):
        model = df.train_diffusion(
            high, denoiser, cfg.train_config(steps=cfg.sr_steps, seed_offset=1), cfg.sampler(),
            cfg.schedule(), train.num_classes, cfg.diff_encoding, condition=low,
        )
    model.save(run.wrote(run.path("models", "g_sr.satw")))
    df.write_loss_csv(run.wrote(run.path("logs", "g_sr_loss.csv")), model.loss_log)


def cmd_superres(run: Run) -> None:
    cfg = run.cfg
    model = df.DiffusionModel.load(run.need("models/g_sr.satw", "train-sr"))
    if cfg.sr_input:
        src = Path(cfg.sr_input)
        if not src.exists():
            raise MissingArtifact(f"sr_input {src} does not exist; produce it with `jointdiff sample`")
        run.inputs.append(src)
        low = dg.load_corpus(src)
    else:
        low = dg.downsample_corpus(dg.load_corpus(run.need("data/train.satp", "gen-data")))
    with run.stage("superres"):
        out = df.sample_superres(model, _joint(low, model.encoding), nd.Rng(derive_seed(cfg.seed, "superres")), cfg.sampler(model.prediction_mode), cfg.sample_batch)
    dg.save_corpus(_unpack_all(out, model.num_classes, model.encoding), run.wrote(run.path("synth", "superres.satp")))


def cmd_build_augset(run: Run) -> None:
    cfg = run.cfg
    train = dg.load_corpus(run.need("data/train.satp", "gen-data"))
    syn = dg.load_corpus(run.need("synth/samples.satp", "sample")) if cfg.aug_R else None
    try:
        ts = au.build_training_set(train, syn, au.ResamplePlan(cfg.aug_R, cfg.aug_balance, derive_seed(cfg.seed, "augset")))
    except ValueError as exc:
        raise MissingArtifact(f"{exc}; run `jointdiff sample` with sample_n >= {cfg.aug_R * len(train)}") from exc
    au.save_training_set(ts, run.path("augset", "manifest.txt").parent)
    run.wrote(run.root / "augset")


def cmd_train_seg(run: Run) -> None:
    cfg = run.cfg
    val = dg.load_corpus(run.need("data/val.satp", "gen-data"))
    if (run.root / "augset" / "manifest.txt").exists():
        train = au.load_training_set(run.need("augset", "build-augset"))
    else:
        train = dg.load_corpus(run.need("data/train.satp", "gen-data"))
    with run.stage("train-seg"):
        model, rows = sg.train_segmenter(train, val, cfg.seg_config(0))
    _check_finite(rows, "train-seg")
    model.save(run.wrote(run.path("models", "seg.satw")))
    sg.write_log_csv(run.wrote(run.path("logs", "seg_log.csv")), rows, cfg.num_classes)


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    model = sg.Segmenter.load(run.need("models/seg.satw", "train-seg"))
    val = dg.load_corpus(run.need("data/val.satp", "gen-data"))
    train = dg.load_corpus(run.need("data/train.satp", "gen-data"))
    with run.stage("evaluate"):
        report = sg.evaluate(model, val)
    syn_path = run.root / "synth" / "samples.satp"
    ref_freq = mt.class_frequency(train, cfg.num_classes)
    report.class_freq = ref_freq.tolist()
    notes = []
    if syn_path.exists():
        run.inputs.append(syn_path)
        syn = dg.load_corpus(syn_path)
        report.tvd = mt.tvd(ref_freq, mt.class_frequency(syn, cfg.num_classes))
        if cfg.eval_features:
            with run.stage("features"):
                fr = sg.extract_features(model, val.images())
                fs = sg.extract_features(model, syn.images())
            for name, fn in (
                ("fid", lambda: mt.fid(fr["pooled"], fs["pooled"])),
                ("sfid", lambda: mt.sfid(fr["decoder"], fs["decoder"], cfg.sfid_grid)),
            ):
                try:
                    setattr(report, name, fn())
                except ValueError as exc:
                    notes.append(f"{name} skipped: {exc}")
            report.inception_score = mt.inception_score(fs["probs"])
    for v in (report.fid, report.sfid, report.inception_score, report.tvd):
        if v is not None and not np.isfinite(v):
            raise FloatingPointError("evaluation produced a non-finite score")
    _write_text_atomic(run.wrote(run.path("reports", "eval.csv")), report.to_csv())
    payload = json.loads(report.to_json())
    payload["notes"] = notes
    _write_text_atomic(run.wrote(run.path("reports", "eval.json")), json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- sweeps


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, np.float64)
    if len(v) == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _seg_score(run: Run, ts, val: dg.Corpus, seed_index: int, label: str) -> tuple[float, float]:
    with run.stage(f"train-seg[{label}]"):
        model, rows = sg.train_segmenter(ts, val, run.cfg.seg_config(seed_index))
    _check_finite(rows, label)
    best = sg.best_row(rows)
    log.info("%s seed %d: best val mIoU %.4f (epoch %d)", label, seed_index, best["miou"], best["epoch"])
    return best["miou"], best["f1"]


def sweep_rows(run: Run, train: dg.Corpus, val: dg.Corpus, pools: dict[str, dg.Corpus], grid: dict[str, tuple[int, ...]]) -> list[list[str]]:
    """Per (plan, R, seed) result rows followed by one mean/SE row per (plan, R)."""
    cfg = run.cfg
    results: list[list] = []
    agg: list[list] = []
    for plan, ratios in grid.items():
        for r in ratios:
            scores = []
            for s in range(cfg.sweep_seeds):
                ts = au.build_training_set(train, pools.get(plan), au.ResamplePlan(r, cfg.aug_balance, derive_seed(cfg.seed, "order", s)))
                miou, f1 = _seg_score(run, ts, val, s, f"{plan} R={r}")
                scores.append((miou, f1))
                results.append(["run", plan, r, s, 1, miou, f1, None])
            m, se = mean_se([x[0] for x in scores])
            agg.append(["mean", plan, r, "", len(scores), m, mean_se([x[1] for x in scores])[0], se])
    return [[_fmt(v) for v in row] for row in results + agg]


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _write_text_atomic(path, buf.getvalue())


def cmd_ratio_sweep(run: Run) -> None:
    cfg = run.cfg
    train = dg.load_corpus(run.need("data/train.satp", "gen-data"))
    val = dg.load_corpus(run.need("data/val.satp", "gen-data"))
    need = max(cfg.sweep_R) * len(train)
    pools: dict[str, dg.Corpus] = {}
    if need:
        syn = dg.load_corpus(run.need("synth/samples.satp", "sample"))
        if len(syn) < need:
            raise MissingArtifact(f"synth/samples.satp holds {len(syn)} pairs, R={max(cfg.sweep_R)} needs {need}; rerun `jointdiff sample` with sample_n >= {need}")
        pools["diffusion"] = syn
    grid = {"diffusion": cfg.sweep_R}
    for b in cfg.sweep_baselines:
        with run.stage(f"pool[{b}]"):
            pools[b] = au.build_baseline_pool(train, b, cfg.baseline_R * len(train), derive_seed(cfg.seed, b))
        grid[b] = (cfg.baseline_R,)
    rows = sweep_rows(run, train, val, pools, grid)
    _write_csv(run.wrote(run.path("results", "sweep.csv")), SWEEP_HEADER, rows)
    render_report([run.root / "results" / "sweep.csv"], run.root / "reports", run)


def cmd_ablate(run: Run) -> None:
    cfg = run.cfg
    train = dg.load_corpus(run.need("data/train.satp", "gen-data"))
    val = dg.load_corpus(run.need("data/val.satp", "gen-data"))
    rows = []
    for gi, (encoding, predict) in enumerate(ABLATION_GRID):
        model = _train_generator(run, train, encoding, predict, seed_offset=10 + gi)
        pool = _sample(run, model, max(cfg.ablate_R) * len(train), train.shape, stream=f"ablate.{encoding}.{predict}")
        for r in cfg.ablate_R:
            scores = []
            for s in range(cfg.ablate_seeds):
                ts = au.build_training_set(train, pool, au.ResamplePlan(r, cfg.aug_balance, derive_seed(cfg.seed, "order", s)))
                scores.append(_seg_score(run, ts, val, s, f"ablate {encoding}/{predict} R={r}"))
            m, se = mean_se([x[0] for x in scores])
            rows.append([encoding, predict, r, len(scores), m, mean_se([x[1] for x in scores])[0], se])
    rows = [[_fmt(v) for v in row] for row in rows]
    _write_csv(run.wrote(run.path("results", "ablation.csv")), ABLATION_HEADER, rows)
    _write_text_atomic(run.wrote(run.path("reports", "ablation.md")), ablation_table(rows))


def ablation_table(rows: list[list[str]]) -> str:
    ratios = sorted({int(r[2]) for r in rows})
    head = "| encoding | predict | " + " | ".join(f"R={r} mIoU" for r in ratios) + " |"
    lines = [head, "|" + "---|" * (2 + len(ratios))]
    for enc, pred in ABLATION_GRID:
        cells = []
        for r in ratios:
            hit = [x for x in rows if x[0] == enc and x[1] == pred and int(x[2]) == r]
            cells.append(f"{float(hit[0][4]):.4f}" if hit and hit[0][4] else "-")
        lines.append(f"| {enc} | {pred} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- reporting


def read_sweep_csv(path) -> list[dict]:
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != SWEEP_HEADER:
        raise ConfigError(f"{path}:1: expected header {','.join(SWEEP_HEADER)}")
    out = []
    for i, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(SWEEP_HEADER):
            raise ConfigError(f"{path}:{i}: expected {len(SWEEP_HEADER)} fields, got {len(row)}")
        rec = dict(zip(SWEEP_HEADER, row))
        try:
            if rec["kind"] not in ("run", "mean"):
                raise ValueError(f"unknown row kind {rec['kind']!r}")
            rec["R"] = int(rec["R"])
            rec["miou"] = float(rec["miou"])
            rec["se"] = float(rec["se"]) if rec["se"] else 0.0
        except ValueError as exc:
            raise ConfigError(f"{path}:{i}: {exc}") from exc
        out.append(rec)
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def sweep_svg(records: list[dict], title: str = "val mIoU vs R") -> str:
    """Mean mIoU per R with SE error bars, one series per plan; fixed layout."""
    W, H, L, R_, T, B = 480, 320, 60, 110, 30, 45
    pw, ph = W - L - R_, H - T - B
    means = [r for r in records if r["kind"] == "mean"]
    xs = [r["R"] for r in means] or [0, 1]
    lo_y = min([r["miou"] - r["se"] for r in means], default=0.0)
    hi_y = max([r["miou"] + r["se"] for r in means], default=1.0)
    if hi_y - lo_y < 1e-6:
        lo_y, hi_y = lo_y - 0.05, hi_y + 0.05
    pad = 0.08 * (hi_y - lo_y)
    lo_y, hi_y = lo_y - pad, hi_y + pad
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1

    def sx(x):
        return L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return T + (hi_y - y) / (hi_y - lo_y) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">{title}</text>',
        f'<line x1="{L}" y1="{T + ph}" x2="{L + pw}" y2="{T + ph}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{T + ph}" stroke="black"/>',
        f'<text x="{L + pw / 2:.1f}" y="{H - 8}" text-anchor="middle" font-family="sans-serif" font-size="12">R</text>',
        f'<text x="14" y="{T + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {T + ph / 2:.1f})">mIoU</text>',
    ]
    for x in range(int(math.ceil(x0)), int(math.floor(x1)) + 1):
        out.append(f'<line x1="{sx(x):.1f}" y1="{T + ph}" x2="{sx(x):.1f}" y2="{T + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(x):.1f}" y="{T + ph + 17}" text-anchor="middle" font-family="sans-serif" font-size="11">{x}</text>')
    for i in range(5):
        y = lo_y + (hi_y - lo_y) * i / 4
        out.append(f'<line x1="{L - 4}" y1="{sy(y):.1f}" x2="{L}" y2="{sy(y):.1f}" stroke="black"/>')
        out.append(f'<text x="{L - 7}" y="{sy(y) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{y:.3f}</text>')
    plans = sorted({r["plan"] for r in means}, key=lambda p: (p != "diffusion", p))
    for pi, plan in enumerate(plans):
        color = _PALETTE[pi % len(_PALETTE)]
        pts = sorted((r for r in means if r["plan"] == plan), key=lambda r: r["R"])
        if len(pts) > 1:
            path = " ".join(f"{sx(r['R']):.1f},{sy(r['miou']):.1f}" for r in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for r in pts:
            cx, cy = sx(r["R"]), sy(r["miou"])
            if r["se"] > 0:
                ya, yb = sy(r["miou"] - r["se"]), sy(r["miou"] + r["se"])
                out.append(f'<line x1="{cx:.1f}" y1="{ya:.1f}" x2="{cx:.1f}" y2="{yb:.1f}" stroke="{color}"/>')
                out.append(f'<line x1="{cx - 4:.1f}" y1="{ya:.1f}" x2="{cx + 4:.1f}" y2="{ya:.1f}" stroke="{color}"/>')
                out.append(f'<line x1="{cx - 4:.1f}" y1="{yb:.1f}" x2="{cx + 4:.1f}" y2="{yb:.1f}" stroke="{color}"/>')
            out.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="3.5" fill="{color}"/>')
        ly = T + 14 + 16 * pi
        out.append(f'<circle cx="{L + pw + 14}" cy="{ly - 4}" r="3.5" fill="{color}"/>')
        out.append(f'<text x="{L + pw + 22}" y="{ly}" font-family="sans-serif" font-size="11">{plan}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def summary_table(records: list[dict]) -> str:
    means = [r for r in records if r["kind"] == "mean"]
    lines = ["| plan | R | seeds | mIoU | SE |", "|---|---|---|---|---|"]
    for r in sorted(means, key=lambda r: (r["plan"] != "diffusion", r["plan"], r["R"])):
        lines.append(f"| {r['plan']} | {r['R']} | {r['n']} | {r['miou']:.4f} | {r['se']:.4f} |")
    return "\n".join(lines) + "\n"


def render_report(csv_paths, out_dir, run: Run | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in csv_paths:
        recs = read_sweep_csv(p)
        stem = Path(p).stem
        svg = out_dir / f"{stem}.svg"
        _write_text_atomic(svg, sweep_svg(recs))
        table = out_dir / f"{stem}_summary.md"
        _write_text_atomic(table, summary_table(recs))
        written += [svg, table]
    if run is not None:
        for w in written:
            run.wrote(w)
    return written


def cmd_report(run: Run) -> None:
    results = run.root / "results"
    paths = sorted(results.glob("sweep*.csv")) if results.exists() else []
    if not paths:
        raise MissingArtifact(f"no sweep CSV under {results}; run `jointdiff ratio-sweep` first")
    run.inputs += paths
    render_report(paths, run.root / "reports", run)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-diff": cmd_train_diff,
    "sample": cmd_sample,
    "train-sr": cmd_train_sr,
    "superres": cmd_superres,
    "build-augset": cmd_build_augset,
    "train-seg": cmd_train_seg,
    "eval": cmd_eval,
    "ratio-sweep": cmd_ratio_sweep,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jointdiff", description="Joint image/mask diffusion for segmentation augmentation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        text, source = "", "config"
        if args.config:
            cpath = Path(args.config)
            if not cpath.exists():
                raise ConfigError(f"config file {cpath} does not exist")
            text, source = cpath.read_text(), str(cpath)
        cfg = ExperimentConfig.parse(text, args.set, source)
        run = Run(cfg, args.command)
        COMMANDS[args.command](run)
        run.write_manifest()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
