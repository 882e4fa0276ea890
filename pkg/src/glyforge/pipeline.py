"""Stage functions wiring the library into an on-disk pipeline.

Every stage reads its predecessors' files, writes into its own directory and
leaves a resolved-config snapshot (``config.txt``) and input hashes
(``manifest.tsv``) next to its outputs. Stage order:
synth, population, extract, match, train, forecast, evaluate, report.
"""

import logging
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import baselines as bl
from . import evaluation as ev
from . import neural as nn
from .iob import read_events, write_events
from .matching import MatchingConfig, match_segments
from .population import generate_population, load_population, save_population
from .segments import RawPatientRecord, build_tensors, extract_segments, read_cgm, \
    split_patients, write_cgm
from .store import (MATCHES_FILE, PREDICTIONS_FILE, SEGMENTS_FILE, read_matches,
                    read_predictions, read_segments, require, write_manifest, write_matches,
                    write_predictions, write_segments)
from .synth import CohortSpec, generate_cohort

log = logging.getLogger(__name__)

STAGES = ("synth", "population", "extract", "match", "train", "forecast", "evaluate", "report")
TRAINABLE = ("seq2seq_ode", "seq2seq", "seq2seq_noiob", "recursive")
VARIANT_OF = {"seq2seq_ode": "full", "seq2seq": "minus_ode", "seq2seq_noiob": "minus_iob"}
FORECASTERS = ("naive", "digital_twin") + TRAINABLE


class ConfigError(ValueError):
    """Malformed configuration; exit status 2."""


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "glyforge-run"
    # seeds
    seed_cohort: int = 0
    seed_population: int = 0
    seed_split: int = 0
    seed_training: int = 0
    # cohort
    patients: int = 20
    days: float = 14.0
    meals_per_day: float = 3.0
    cgm_noise_sd: float = 3.0
    dropout_rate: float = 0.02
    # population and extraction
    population_size: int = 300
    stride: int = 5
    # training
    models: str = "seq2seq_ode,seq2seq,recursive"
    hidden: int = 64
    max_epochs: int = 100
    batch: int = 64
    patience: int = 15
    lr0: float = 1e-3
    dropout_p: float = 0.2
    recursive_hidden: int = 300
    recursive_max_epochs: int = 100
    recursive_max_train: int = 0
    # evaluation
    worst_k: int = 100
    threads: int = 1

    @property
    def model_list(self):
        return [m for m in self.models.split(",") if m]

    def validate(self):
        for m in self.model_list:
            if m not in TRAINABLE:
                raise ConfigError(f"unknown model {m!r}; choose from {', '.join(TRAINABLE)}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ConfigError(f"{f.name} must be non-negative")
        if self.stride <= 0 or self.stride % 5:
            raise ConfigError("stride must be a positive multiple of 5")
        if self.patients < 1 or self.population_size < 1 or self.threads < 1:
            raise ConfigError("patients, population_size and threads must be at least 1")
        return self

    def with_overrides(self, pairs):
        """Apply ``key=value`` strings (or a dict) with type coercion."""
        types = {f.name: f.type for f in fields(self)}
        items = pairs.items() if isinstance(pairs, dict) else (_split_pair(p) for p in pairs)
        changes = {}
        for key, value in items:
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            typ = {"int": int, "float": float, "str": str}.get(types[key], types[key])
            try:
                changes[key] = typ(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from exc
        return replace(self, **changes)

    def snapshot(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def training_config(self, epochs=None, dropout=None):
        return nn.TrainingConfig(lr0=self.lr0, batch=self.batch,
                                 max_epochs=epochs or self.max_epochs,
                                 patience=self.patience, lr_patience=min(5, self.patience),
                                 dropout_p=self.dropout_p if dropout is None else dropout,
                                 seed=self.seed_training)


def _split_pair(text):
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def load_config(path=None, overrides=(), base=None):
    cfg = base or RunConfig()
    if env := os.environ.get("GLYFORGE_DATA_DIR"):
        cfg = replace(cfg, data_dir=env)
    if path:
        pairs = []
        try:
            with open(path) as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    try:
                        pairs.append(_split_pair(line))
                    except ConfigError as exc:
                        raise ConfigError(f"{path}:{lineno}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cfg.with_overrides(dict(pairs))
    return cfg.with_overrides(list(overrides)).validate()


def _stage_dir(cfg, stage, sub=None):
    path = os.path.join(cfg.data_dir, stage, sub) if sub else os.path.join(cfg.data_dir, stage)
    os.makedirs(path, exist_ok=True)
    return path


def _finish(cfg, out_dir, inputs):
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.snapshot())
    write_manifest(out_dir, inputs)


# ------------------------------------------------------------------ stages

def run_synth(cfg, out_dir=None):
    out = out_dir or _stage_dir(cfg, "synth")
    os.makedirs(out, exist_ok=True)
    spec = CohortSpec(n_patients=cfg.patients, days=cfg.days, meals_per_day=cfg.meals_per_day,
                      cgm_noise_sd=cfg.cgm_noise_sd, dropout_rate=cfg.dropout_rate,
                      seed=cfg.seed_cohort)
    pop = generate_population(cfg.seed_population, cfg.population_size)
    cohort = generate_cohort(spec, pop)
    write_cgm(os.path.join(out, "cgm.tsv"), cohort.records)
    write_events(os.path.join(out, "insulin.tsv"),
                 {r.patient_id: r.insulin_events for r in cohort.records})
    with open(os.path.join(out, "ground_truth.tsv"), "w") as fh:
        fh.write(f"# population seed={cfg.seed_population} size={cfg.population_size}\n")
        fh.write("patient_id\ttwin_id\n")
        for pid, twin in cohort.ground_truth.items():
            fh.write(f"{pid}\t{twin}\n")
    _finish(cfg, out, [])
    return out


def run_population(cfg, out_file=None):
    out_file = out_file or os.path.join(_stage_dir(cfg, "population"), "population.tsv")
    os.makedirs(os.path.dirname(os.path.abspath(out_file)), exist_ok=True)
    save_population(generate_population(cfg.seed_population, cfg.population_size), out_file)
    _finish(cfg, os.path.dirname(os.path.abspath(out_file)), [])
    return out_file


def load_records(cgm_path, insulin_path):
    cgm = read_cgm(require(cgm_path, "synth"))
    events = read_events(require(insulin_path, "synth"))
    return [RawPatientRecord(pid, t, g, events.get(pid, [])) for pid, (t, g) in sorted(cgm.items())]


def run_extract(cfg, cgm_path=None, insulin_path=None, out_dir=None):
    synth_dir = os.path.join(cfg.data_dir, "synth")
    cgm_path = cgm_path or os.path.join(synth_dir, "cgm.tsv")
    insulin_path = insulin_path or os.path.join(synth_dir, "insulin.tsv")
    out = out_dir or _stage_dir(cfg, "extract")
    os.makedirs(out, exist_ok=True)
    records = load_records(cgm_path, insulin_path)
    splits = split_patients([r.patient_id for r in records], cfg.seed_split)
    segments = []
    with open(os.path.join(out, "rejections.tsv"), "w") as fh:
        fh.write("segment_id\tcriteria\n")
        for rec in records:
            accepted, rejected = extract_segments(rec, stride=cfg.stride, return_rejections=True)
            segments += accepted
            for seg, rej in rejected:
                crit = ",".join(str(c) for c in sorted(rej.criteria))
                fh.write(f"{seg.segment_id}\t{crit}\n")
    write_segments(os.path.join(out, SEGMENTS_FILE), segments, splits)
    with open(os.path.join(out, "split.tsv"), "w") as fh:
        fh.write("patient_id\tsplit\n")
        for pid in sorted(splits):
            fh.write(f"{pid}\t{splits[pid]}\n")
    _finish(cfg, out, [cgm_path, insulin_path])
    log.info("extracted %d segments", len(segments))
    return out


def run_match(cfg, segments_dir=None, population_file=None, out_dir=None, progress=None):
    segments_dir = segments_dir or os.path.join(cfg.data_dir, "extract")
    population_file = population_file or os.path.join(cfg.data_dir, "population", "population.tsv")
    seg_file = require(os.path.join(segments_dir, SEGMENTS_FILE), "extract")
    pop = load_population(require(population_file, "population"))
    out = out_dir or _stage_dir(cfg, "match")
    os.makedirs(out, exist_ok=True)
    segments, _ = read_segments(seg_file)
    results = match_segments(segments, pop, MatchingConfig(), progress)
    matched = [r for r in results if r is not None]
    write_matches(os.path.join(out, MATCHES_FILE), matched)
    with open(os.path.join(out, "index.tsv"), "w") as fh:
        fh.write("segment_id\ttwin_id\trmse\n")
        for r in matched:
            fh.write(f"{r.segment_id}\t{r.twin_id}\t{r.rmse:.17g}\n")
    with open(os.path.join(out, "failures.tsv"), "w") as fh:
        fh.write("segment_id\tcriterion\n")
        for seg, r in zip(segments, results):
            if r is None:
                fh.write(f"{seg.segment_id}\t6\n")
    _finish(cfg, out, [seg_file, population_file])
    return out


def _load_matched(segments_dir, matches_dir):
    seg_file = require(os.path.join(segments_dir, SEGMENTS_FILE), "extract")
    match_file = require(os.path.join(matches_dir, MATCHES_FILE), "match")
    segments, splits = read_segments(seg_file)
    matches = read_matches(match_file)
    rows = [(s, sp, matches[s.segment_id]) for s, sp in zip(segments, splits)
            if s.segment_id in matches]
    return rows, [seg_file, match_file]


def _tensors(rows, variant=None):
    enc, dec, y = zip(*(build_tensors(s, m) for s, _, m in rows))
    enc, dec, y = np.stack(enc), np.stack(dec), np.stack(y)
    if variant is not None:
        enc, dec = variant.select(enc, dec)
    return enc, dec, y


def run_train(cfg, model, segments_dir=None, matches_dir=None, out_dir=None, progress=None):
    if model not in TRAINABLE:
        raise ConfigError(f"unknown model {model!r}")
    segments_dir = segments_dir or os.path.join(cfg.data_dir, "extract")
    matches_dir = matches_dir or os.path.join(cfg.data_dir, "match")
    out = out_dir or _stage_dir(cfg, "train", model)
    os.makedirs(out, exist_ok=True)
    rows, inputs = _load_matched(segments_dir, matches_dir)
    train = [r for r in rows if r[1] == "train"]
    val = [r for r in rows if r[1] == "validation"]
    if not train or not val:
        raise ValueError("training needs segments in both the train and validation splits")
    if model == "recursive":
        rc = bl.RecursiveConfig(hidden=cfg.recursive_hidden, max_train_segments=cfg.recursive_max_train,
                                training=cfg.training_config(cfg.recursive_max_epochs, dropout=0.0))
        fitted, history = bl.train_recursive([r[0] for r in train], [r[0] for r in val], rc, progress)
        bl.save_recursive(fitted, os.path.join(out, "checkpoint.txt"))
    else:
        variant = bl.seq2seq_variant(VARIANT_OF[model], cfg.hidden)
        spec = nn.ModelSpec(variant.model.encoder_dim, variant.model.decoder_dim, cfg.hidden, model)
        fitted, history = nn.train(spec, _tensors(train, variant), _tensors(val, variant),
                                   cfg.training_config(), progress)
        nn.save_checkpoint(fitted, os.path.join(out, "checkpoint.txt"))
    nn.write_training_log(os.path.join(out, "training_log.jsonl"), history)
    _finish(cfg, out, inputs)
    return out


def forecast(model_name, rows, checkpoint=None, population=None):
    """Predictions ``(N, 48)`` in mg/dL for ``(segment, split, match)`` rows."""
    if model_name == "naive":
        return np.stack([bl.naive_forecast(s) for s, _, _ in rows])
    if model_name == "digital_twin":
        return np.stack([bl.digital_twin_forecast(s, m, population[m.twin_id]) for s, _, m in rows])
    if model_name == "recursive":
        return bl.predict_recursive(bl.load_recursive(checkpoint), [r[0] for r in rows])
    model = nn.load_checkpoint(checkpoint)
    variant = bl.seq2seq_variant(VARIANT_OF[model.spec.name], model.spec.hidden)
    enc, dec, _ = _tensors(rows, variant)
    return model.predict_mgdl(enc, dec)


def run_forecast(cfg, model, checkpoint=None, segments_dir=None, matches_dir=None,
                 population_file=None, out_dir=None, split="test"):
    """``model`` is a forecaster name; trainable ones read ``checkpoint``."""
    if model not in FORECASTERS:
        raise ConfigError(f"unknown forecaster {model!r}")
    segments_dir = segments_dir or os.path.join(cfg.data_dir, "extract")
    matches_dir = matches_dir or os.path.join(cfg.data_dir, "match")
    out = out_dir or _stage_dir(cfg, "forecast", model)
    os.makedirs(out, exist_ok=True)
    rows, inputs = _load_matched(segments_dir, matches_dir)
    rows = [r for r in rows if split is None or r[1] == split]
    population = None
    if model in TRAINABLE:
        checkpoint = checkpoint or os.path.join(cfg.data_dir, "train", model, "checkpoint.txt")
        inputs.append(require(checkpoint, f"train --model {model}"))
    if model == "digital_twin":
        population_file = population_file or os.path.join(cfg.data_dir, "population", "population.tsv")
        population = load_population(require(population_file, "population"))
        inputs.append(population_file)
    preds = forecast(model, rows, checkpoint, population) if rows else np.zeros((0, 48))
    ok = np.all(np.isfinite(preds), axis=1) if len(rows) else np.zeros(0, bool)
    ids = [r[0].segment_id for r in rows]
    write_predictions(os.path.join(out, PREDICTIONS_FILE), [i for i, k in zip(ids, ok) if k],
                      preds[ok])
    with open(os.path.join(out, "failures.tsv"), "w") as fh:
        fh.write("segment_id\n")
        for i, k in zip(ids, ok):
            if not k:
                fh.write(i + "\n")
    _finish(cfg, out, inputs)
    return out


def run_evaluate(cfg, prediction_dirs=None, actuals_dir=None, out_dir=None, worst_k=None):
    if prediction_dirs is None:
        prediction_dirs = [os.path.join(cfg.data_dir, "forecast", m)
                           for m in ("naive", "digital_twin") + tuple(cfg.model_list)]
    actuals_dir = actuals_dir or os.path.join(cfg.data_dir, "extract")
    out = out_dir or _stage_dir(cfg, "evaluate")
    os.makedirs(out, exist_ok=True)
    seg_file = require(os.path.join(actuals_dir, SEGMENTS_FILE), "extract")
    actual = {s.segment_id: s.future_cgm for s in read_segments(seg_file)[0]}
    preds, inputs = {}, [seg_file]
    for d in prediction_dirs:
        path = require(os.path.join(d, PREDICTIONS_FILE), "forecast")
        preds[os.path.basename(os.path.normpath(d))] = read_predictions(path)
        inputs.append(path)
    shared = ev.shared_test_intersection({m: p.keys() for m, p in preds.items()})
    missing = [i for i in shared if i not in actual]
    if missing:
        raise ValueError(f"{len(missing)} predicted segments have no actuals, e.g. {missing[0]}")
    A = np.stack([actual[i] for i in shared])
    P = {m: np.stack([p[i] for i in shared]) for m, p in preds.items()}
    metrics = {m: ev.compute_metrics(P[m], A) for m in P}
    errors = {m: P[m] - A for m in P}
    k = cfg.worst_k if worst_k is None else worst_k
    worst = [ev.worst_case(errors, shared, mode, k) for mode in ("independent", "shared")]
    ev.write_metrics_table(os.path.join(out, "metrics.tsv"), metrics)
    with open(os.path.join(out, "shared_segments.tsv"), "w") as fh:
        fh.write("segment_id\n" + "".join(i + "\n" for i in shared))
    ev.emit_report(metrics, out, worst, len(shared))
    _finish(cfg, out, inputs)
    return out


def run_report(cfg, evaluate_dir=None, out_dir=None):
    evaluate_dir = evaluate_dir or os.path.join(cfg.data_dir, "evaluate")
    table = require(os.path.join(evaluate_dir, "metrics.tsv"), "evaluate")
    out = out_dir or _stage_dir(cfg, "report")
    os.makedirs(out, exist_ok=True)
    metrics = ev.read_metrics_table(table)
    shared = os.path.join(evaluate_dir, "shared_segments.tsv")
    count = None
    if os.path.exists(shared):
        with open(shared) as fh:
            count = sum(1 for _ in fh) - 1
    ev.emit_report(metrics, out, shared_count=count)
    _finish(cfg, out, [table])
    return out


def run_pipeline(cfg, stages=STAGES, progress=None):
    """Run the requested stages in dependency order. Returns the data dir."""
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s) {', '.join(unknown)}")
    for stage in STAGES:
        if stage not in stages:
            continue
        log.info("stage %s", stage)
        if progress:
            progress(stage)
        if stage == "synth":
            run_synth(cfg)
        elif stage == "population":
            run_population(cfg)
        elif stage == "extract":
            run_extract(cfg)
        elif stage == "match":
            run_match(cfg)
        elif stage == "train":
            for m in cfg.model_list:
                run_train(cfg, m)
        elif stage == "forecast":
            for m in ("naive", "digital_twin") + tuple(cfg.model_list):
                run_forecast(cfg, m)
        elif stage == "evaluate":
            run_evaluate(cfg)
        elif stage == "report":
            run_report(cfg)
    return cfg.data_dir
