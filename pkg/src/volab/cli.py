"""Deterministic command-line front end tying the pipeline together:
phantom dataset generation, cross-validated training, mechanistic analysis
(effective receptive fields, attention distances, CKA), and report emission.

Every command is a pure function of (args, config files, dataset bytes,
seed); rerunning with identical inputs produces byte-identical outputs.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
The env var VOLAB_THREADS caps worker threads for --parallel-folds.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import (
    attention_distance_stats,
    cka_matrix,
    erf_map,
    read_activation_dump,
    write_activation_dump,
)
from .labels import (
    MANIFEST_HEADER,
    CohortRecord,
    DataError,
    GmmModel,
    RiskBin,
    read_manifest,
    write_manifest,
)
from .metrics import (
    auroc,
    bootstrap_ci,
    brier_and_reliability,
    regression_metrics,
    stratified_sens_spec,
)
from .models import ModelConfig, build_model, desk_config, paper_config
from .tensor import NumericError, ShapeError
from .training import (
    HISTORY_HEADER,
    TrainConfig,
    cross_validate,
    make_input,
    run_fold,
    samples_from_records,
)
from .volume import PhantomSpec, generate_phantom, read_volume, write_volume

SEED_STREAMS = ("data", "init", "augment", "bootstrap")

PREDICTIONS_HEADER = ["patient_id", "eye_id", "p_kc", "pred", "fold"]
TABLE2_HEADER = ["model", "dim", "params", "mse", "mae", "r2", "pearson",
                 "brier", "auroc"]
TABLE3_HEADER = ["model", "dim", "bin", "sensitivity", "specificity",
                 "count", "balanced_accuracy"]
TABLE4_HEADER = ["model", "dim", "stage1", "stage2", "stage3", "stage4",
                 "et_ratio"]
TABLE5_HEADER = ["model", "dim", "bin", "mean", "sd", "median", "pct_gt20",
                 "max"]
RELIABILITY_HEADER = ["model", "dim", "bin", "mean_pred", "pos_fraction",
                      "count"]
METRIC_KEYS = ("mse", "mae", "r2", "pearson", "brier", "auroc")

RESOLVED_CONFIG = "resolved_config.json"
POOLED_PREDICTIONS = "pooled_predictions.csv"

_BIN_ORDER = [b.value for b in RiskBin]

_SCHEMA_HELP = f"""file schemas (stable, golden-file tested):
  manifest csv      {','.join(MANIFEST_HEADER)}
  history csv       {','.join(HISTORY_HEADER)}
  predictions csv   {','.join(PREDICTIONS_HEADER)}
  table2.csv        {','.join(TABLE2_HEADER)}  (+ <metric>_lo/_hi with --ci)
  table3.csv        {','.join(TABLE3_HEADER)}
  reliability.csv   {','.join(RELIABILITY_HEADER)}
  erf_table.csv     {','.join(TABLE4_HEADER)}
  attn_table.csv    {','.join(TABLE5_HEADER)}
  cka_matrix.csv    id,<stage...>  (symmetric, unit diagonal)
"""


class UsageError(Exception):
    """Bad invocation or malformed configuration: exit code 1."""


def derive_seed(master, stream):
    """Named sub-stream of the master seed (data, init, augment,
    bootstrap): toggling one stage never perturbs the randomness of
    another."""
    ss = np.random.SeedSequence([int(master)] + [ord(c) for c in stream])
    return int(ss.generate_state(1)[0])


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows):
    """CSV with repr-rounded floats and LF newlines: byte-stable."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def write_json(path, payload):
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True))
        fh.write("\n")


def _read_json(path, kind):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise DataError(f"cannot read {kind} {path}: {err}") from err
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise UsageError(f"{kind} {path} is not valid JSON: {err}") from err
    if not isinstance(payload, dict):
        raise UsageError(f"{kind} {path} must hold a JSON object")
    return payload


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """One training experiment: dataset + model + train + analysis blocks,
    an output directory, and the mandatory master seed."""

    seed: int
    out_dir: str
    dataset: dict
    model: dict
    train: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    n_folds: int = 5
    target: str = "pkc"
    name: str = ""


_ANALYSIS_KEYS = {"k", "stages", "erf_inputs", "attn_inputs", "cka_inputs",
                  "threshold", "bootstrap_n"}


def load_experiment(path):
    raw = _read_json(path, "config")
    allowed = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise UsageError(f"config {path}: unknown keys {sorted(unknown)}")
    for key in ("seed", "out_dir", "dataset", "model"):
        if key not in raw:
            raise UsageError(f"config {path}: missing required key {key!r}")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise UsageError(f"config {path}: seed must be an integer")
    cfg = ExperimentConfig(**raw)
    if not isinstance(cfg.dataset, dict) or not isinstance(cfg.model, dict):
        raise UsageError(f"config {path}: dataset/model must be objects")
    if cfg.target not in ("pkc", "binary"):
        raise UsageError(f"config {path}: target must be pkc or binary")
    if not isinstance(cfg.n_folds, int) or cfg.n_folds < 3:
        raise UsageError(f"config {path}: n_folds must be an integer >= 3 "
                         f"(test, validation, and train need disjoint "
                         f"folds)")
    bad = set(cfg.analysis) - _ANALYSIS_KEYS
    if bad:
        raise UsageError(f"config {path}: unknown analysis keys "
                         f"{sorted(bad)}")
    return cfg


def model_from_block(block):
    """Model block: {"preset": name[, "scale": desk|paper]} or inline
    ModelConfig fields. Returns (config, default report name)."""
    if not isinstance(block, dict) or not block:
        raise UsageError("model block must be a non-empty object")
    block = dict(block)
    preset = block.pop("preset", None)
    if preset is not None:
        scale = block.pop("scale", "desk")
        if block:
            raise UsageError(f"preset model block has extra keys "
                             f"{sorted(block)}")
        if scale not in ("desk", "paper"):
            raise UsageError(f"model scale must be desk or paper, "
                             f"got {scale!r}")
        try:
            cfg = (desk_config if scale == "desk" else paper_config)(preset)
        except KeyError as err:
            raise UsageError(str(err)) from err
        return cfg, preset
    try:
        cfg = ModelConfig(**block)
    except (TypeError, ShapeError) as err:
        raise UsageError(f"bad model block: {err}") from err
    return cfg, f"{cfg.family}{cfg.input_dims}d"


def train_config_from_block(block, seed):
    if not isinstance(block, dict):
        raise UsageError("train block must be an object")
    merged = dict(block)
    merged["seed"] = seed
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad train block: {err}") from err


def _rebase(path, base):
    return path if os.path.isabs(path) else os.path.join(base, path)


# ---------------------------------------------------------------------------
# phantom dataset generation


def generate_phantom_dataset(out_dir, n, shape, seed, amplitude=(0.0, 1.0),
                             sparsity=0.2, noise=0.05, gmm=None):
    """n phantom volumes + manifest under out_dir. Per-record seeds derive
    from (seed, index), so the i-th volume does not depend on n. Anomaly
    amplitudes are drawn uniformly from the configured range; a wide range
    makes the soft labels span all three risk bins."""
    if n < 1:
        raise UsageError(f"need at least one volume, got n={n}")
    lo, hi = float(amplitude[0]), float(amplitude[1])
    if not lo <= hi:
        raise UsageError(f"amplitude range {amplitude} is inverted")
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        amp = float(rng.uniform(lo, hi))
        spec = PhantomSpec(shape=tuple(shape), anomaly_amplitude=amp,
                           anomaly_sparsity=sparsity, noise_sigma=noise,
                           **({} if gmm is None else {"label_gmm": gmm}))
        vol, p_kc, _ = generate_phantom(spec, rng)
        fname = f"vol_{i:04d}.volb"
        write_volume(os.path.join(out_dir, fname), vol)
        # two consecutive volumes share a patient so the patient-grouped
        # cross-validation split has real grouping work to do
        records.append(CohortRecord(
            patient_id=f"P{i // 2:04d}", eye_id="OD" if i % 2 == 0 else "OS",
            volume_path=fname, p_kc=p_kc))
    write_manifest(os.path.join(out_dir, "manifest.csv"), records)
    return records


def _parse_shape(text):
    try:
        shape = tuple(int(p) for p in text.split(","))
    except ValueError as err:
        raise UsageError(f"bad shape {text!r}: {err}") from err
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise UsageError(f"shape must be three positive ints, got {text!r}")
    return shape


def cmd_phantom(args):
    shape = _parse_shape(args.shape)
    gmm = GmmModel.from_json(args.gmm) if args.gmm else None
    records = generate_phantom_dataset(
        args.out, args.n, shape, args.seed,
        amplitude=(args.amp_lo, args.amp_hi), sparsity=args.sparsity,
        noise=args.noise, gmm=gmm)
    counts = {b: 0 for b in _BIN_ORDER}
    for r in records:
        counts[r.bin.value] += 1
    print(f"wrote {len(records)} volumes + manifest.csv to {args.out} "
          f"(bins: " + ", ".join(f"{b}={counts[b]}" for b in _BIN_ORDER)
          + ")")
    return 0


# ---------------------------------------------------------------------------
# training


def resolve_dataset(cfg, base, out_dir):
    """Returns (records, volume root, manifest path). A phantom block
    regenerates the dataset under out_dir/data from the data sub-stream;
    regeneration is deterministic, so reruns rewrite identical bytes."""
    ds = cfg.dataset
    if "manifest" in ds:
        man = _rebase(ds["manifest"], base)
        return read_manifest(man), os.path.dirname(man), man
    if "phantom" in ds:
        block = dict(ds["phantom"])
        n = block.pop("n", None)
        shape = tuple(block.pop("shape", (32, 32, 32)))
        amplitude = tuple(block.pop("amplitude", (0.0, 1.0)))
        sparsity = block.pop("sparsity", 0.2)
        noise = block.pop("noise", 0.05)
        if block:
            raise UsageError(f"unknown phantom dataset keys "
                             f"{sorted(block)}")
        if not isinstance(n, int) or n < 1:
            raise UsageError("phantom dataset block needs a positive "
                             "integer 'n'")
        root = os.path.join(out_dir, "data")
        records = generate_phantom_dataset(
            root, n, shape, derive_seed(cfg.seed, "data"),
            amplitude=amplitude, sparsity=sparsity, noise=noise)
        return records, root, os.path.join(root, "manifest.csv")
    raise UsageError("dataset block needs a 'manifest' path or a "
                     "'phantom' spec")


def resolve_workers(requested):
    workers = max(1, int(requested))
    cap = os.environ.get("VOLAB_THREADS")
    if cap is not None:
        try:
            cap = int(cap)
        except ValueError as err:
            raise UsageError(f"VOLAB_THREADS must be an integer, "
                             f"got {cap!r}") from err
        if cap < 1:
            raise UsageError(f"VOLAB_THREADS must be >= 1, got {cap}")
        workers = min(workers, cap)
    return workers


def _prediction_rows(records, indices, preds, fold_of):
    rows = []
    for j, i in enumerate(indices):
        r = records[i]
        k = fold_of if isinstance(fold_of, int) else int(fold_of[i])
        rows.append([r.patient_id, r.eye_id, float(r.p_kc),
                     float(preds[j]), k])
    return rows


def _write_fold(out_dir, k, result, model, records, test_idx, preds):
    model.save(os.path.join(out_dir, f"fold{k}.ckpt"),
               epoch=result.best_epoch, val_mse=result.best_val_mse)
    write_csv(os.path.join(out_dir, f"fold{k}_history.csv"),
              HISTORY_HEADER, result.history)
    write_csv(os.path.join(out_dir, f"fold{k}_predictions.csv"),
              PREDICTIONS_HEADER,
              _prediction_rows(records, test_idx, preds, k))


def cmd_train(args):
    cfg = load_experiment(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    model_cfg, default_name = model_from_block(cfg.model)
    name = cfg.name or default_name
    train_cfg = train_config_from_block(cfg.train,
                                        derive_seed(cfg.seed, "init"))
    out_dir = _rebase(cfg.out_dir, base)
    os.makedirs(out_dir, exist_ok=True)
    records, root, manifest = resolve_dataset(cfg, base, out_dir)
    samples = samples_from_records(records, model_cfg, target=cfg.target,
                                   root=root)
    write_json(os.path.join(out_dir, RESOLVED_CONFIG), {
        "name": name, "seed": cfg.seed, "n_folds": cfg.n_folds,
        "target": cfg.target, "model": asdict(model_cfg),
        "train": asdict(train_cfg), "analysis": cfg.analysis,
        "manifest": os.path.relpath(manifest, out_dir),
    })
    if args.fold is not None:
        if not 0 <= args.fold < cfg.n_folds:
            raise UsageError(f"--fold {args.fold} outside "
                             f"0..{cfg.n_folds - 1}")
        res, model, test_idx, preds = run_fold(
            records, samples, model_cfg, train_cfg, cfg.n_folds, args.fold)
        _write_fold(out_dir, args.fold, res, model, records, test_idx,
                    preds)
        print(f"{name} fold {args.fold}: best epoch {res.best_epoch}, "
              f"val mse {res.best_val_mse:.6f} -> {out_dir}")
        return 0
    workers = resolve_workers(args.parallel_folds)
    cv = cross_validate(records, samples, model_cfg, train_cfg,
                        n_folds=cfg.n_folds, n_workers=workers)
    for k in range(cfg.n_folds):
        test_idx = [int(i) for i in np.nonzero(cv.fold_of_record == k)[0]]
        preds = [float(cv.pooled_pred[i]) for i in test_idx]
        _write_fold(out_dir, k, cv.folds[k], cv.models[k], records,
                    test_idx, preds)
        print(f"{name} fold {k}: best epoch {cv.folds[k].best_epoch}, "
              f"val mse {cv.folds[k].best_val_mse:.6f}")
    write_csv(os.path.join(out_dir, POOLED_PREDICTIONS),
              PREDICTIONS_HEADER,
              _prediction_rows(records, range(len(records)), cv.pooled_pred,
                               cv.fold_of_record))
    print(f"{name}: {cfg.n_folds} folds -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# analysis


def _load_run_model(ckpt_path):
    """Rebuild the architecture from the resolved config beside the
    checkpoint, then load the weights. Returns (model, run config)."""
    run_dir = os.path.dirname(os.path.abspath(ckpt_path))
    sidecar = os.path.join(run_dir, RESOLVED_CONFIG)
    if not os.path.isfile(sidecar):
        raise DataError(f"no {RESOLVED_CONFIG} beside checkpoint "
                        f"{ckpt_path}; analyze needs the training run "
                        f"directory")
    run_cfg = _read_json(sidecar, "resolved config")
    model_cfg = ModelConfig(**run_cfg["model"])
    model = build_model(model_cfg, seed=0)
    model.load(ckpt_path)
    return model, run_cfg


def _analysis_records(args, run_cfg, ckpt_path):
    man = args.manifest
    if man is None:
        run_dir = os.path.dirname(os.path.abspath(ckpt_path))
        man = _rebase(run_cfg["manifest"], run_dir)
    records = read_manifest(man)
    return records, os.path.dirname(man)


def _analysis_setting(args, run_cfg, key, fallback):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return run_cfg.get("analysis", {}).get(key, fallback)


def _table_stages(model):
    """Stage taps reported in the four stage columns: the patch embedding
    is not a stage, and models with more than four taps report four evenly
    spaced ones."""
    names = model.stage_names()
    if names and names[0] == "patch_embed":
        names = names[1:]
    if len(names) > 4:
        idx = np.round(np.linspace(0, len(names) - 1, 4)).astype(int)
        names = [names[i] for i in sorted(set(int(i) for i in idx))]
    return names


def _analyze_erf(args, model, run_cfg, records, root, out_dir):
    n = int(_analysis_setting(args, run_cfg, "erf_inputs", 2))
    threshold = float(_analysis_setting(args, run_cfg, "threshold", 0.01))
    stages = args.stages.split(",") if args.stages else _table_stages(model)
    known = model.stage_names() + ["output"]
    for s in stages:
        if s not in known:
            raise UsageError(f"unknown stage {s!r}; choose from {known}")
    if not 1 <= len(stages) <= 4:
        raise UsageError("erf reports between one and four stage columns")
    if n < 1 or n > len(records):
        raise UsageError(f"erf_inputs {n} outside 1..{len(records)}")
    xs = [make_input(_load_volume(records[i], root), model.config)
          for i in range(n)]
    radii, ratios = {s: [] for s in stages}, []
    mean_maps = {s: None for s in stages}
    for x in xs:
        for s in stages:
            m = erf_map(model, x, tap=s, threshold=threshold)
            radii[s].append(m.erf_radius)
            mean_maps[s] = (m.normalized if mean_maps[s] is None
                            else mean_maps[s] + m.normalized)
            if s == stages[-1] and m.et_ratio is not None:
                ratios.append(m.et_ratio)
    row = [run_cfg["name"], model.config.input_dims]
    for i in range(4):
        row.append(float(np.mean(radii[stages[i]]))
                   if i < len(stages) else None)
    row.append(float(np.mean(ratios)) if ratios else None)
    write_csv(os.path.join(out_dir, "erf_table.csv"), TABLE4_HEADER, [row])
    for s in stages:
        np.save(os.path.join(out_dir, f"erf_map_{s}.npy"),
                mean_maps[s] / float(n))
    print(f"erf: {len(stages)} stages over {n} inputs -> "
          f"{os.path.join(out_dir, 'erf_table.csv')}")
    return 0


def _load_volume(record, root):
    return read_volume(_rebase(record.volume_path, root))


def _analyze_attn(args, model, run_cfg, records, root, out_dir):
    n = int(_analysis_setting(args, run_cfg, "attn_inputs", 6))
    k = int(_analysis_setting(args, run_cfg, "k", 5))
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if n < 1:
        raise UsageError(f"attn_inputs must be >= 1, got {n}")
    per_bin = math.ceil(n / 3)
    chosen = []
    for b in _BIN_ORDER:
        hits = [i for i, r in enumerate(records) if r.bin.value == b]
        chosen.extend(hits[:per_bin])
    if not chosen:
        raise DataError("manifest has no records to analyze")
    labeled = []
    for i in sorted(chosen):
        x = make_input(_load_volume(records[i], root), model.config)
        result = model.forward(x[None], record_attention=True)
        labeled.append((records[i].p_kc, result.attention))
    stats = attention_distance_stats(labeled, k=k)
    rows = []
    for b in _BIN_ORDER:
        if b not in stats:
            continue
        st = stats[b]
        rows.append([run_cfg["name"], model.config.input_dims, b,
                     st["mean"], st["sd"], st["median"], st["pct_gt20"],
                     st["max"]])
    write_csv(os.path.join(out_dir, "attn_table.csv"), TABLE5_HEADER, rows)
    print(f"attn: {len(labeled)} inputs, k={k}, {len(rows)} bins -> "
          f"{os.path.join(out_dir, 'attn_table.csv')}")
    return 0


def _analyze_cka(args, ckpts, out_dir):
    first_model, first_cfg = _load_run_model(ckpts[0])
    records, root = _analysis_records(args, first_cfg, ckpts[0])
    n = int(_analysis_setting(args, first_cfg, "cka_inputs", 8))
    if n < 2 or n > len(records):
        raise UsageError(f"cka_inputs {n} outside 2..{len(records)}")
    loaded = [(first_model, first_cfg)]
    for p in ckpts[1:]:
        loaded.append(_load_run_model(p))
    same_arch = all(cfg["model"] == first_cfg["model"] and
                    cfg["name"] == first_cfg["name"]
                    for _, cfg in loaded)
    dump_paths = []
    for idx, ((model, run_cfg), ckpt) in enumerate(zip(loaded, ckpts)):
        x = np.stack(
            [make_input(_load_volume(records[i], root), model.config)
             for i in range(n)], axis=0)
        result = model.forward(x, record_stages=True)
        prefix = "" if same_arch else f"{idx}:{run_cfg['name']}:"
        layers = {f"{prefix}{tap.name}":
                  np.asarray(tap.data.data, dtype=np.float64).reshape(n, -1)
                  for tap in result.stages}
        stem = os.path.splitext(os.path.basename(ckpt))[0]
        path = os.path.join(out_dir, f"cka_{idx:02d}_{stem}.admp")
        write_activation_dump(path, run_cfg["name"], layers)
        dump_paths.append(path)
    # recompute from the dumps on disk so the CSV matches the exported
    # activations exactly
    dumps = [read_activation_dump(p)[1] for p in dump_paths]
    if same_arch:
        ids, mat = cka_matrix(dumps)
    else:
        joint = {}
        for d in dumps:
            joint.update(d)
        ids, mat = cka_matrix([joint])
    rows = [[ids[i]] + [float(v) for v in mat[i]] for i in range(len(ids))]
    write_csv(os.path.join(out_dir, "cka_matrix.csv"), ["id"] + ids, rows)
    print(f"cka: {len(ckpts)} checkpoints, {len(ids)} taps, {n} inputs -> "
          f"{os.path.join(out_dir, 'cka_matrix.csv')}")
    return 0


def cmd_analyze(args):
    ckpts = args.checkpoint
    out_dir = args.out or os.path.dirname(os.path.abspath(ckpts[0]))
    os.makedirs(out_dir, exist_ok=True)
    if args.instrument == "cka":
        return _analyze_cka(args, ckpts, out_dir)
    if len(ckpts) != 1:
        raise UsageError(f"--instrument {args.instrument} takes exactly "
                         f"one checkpoint")
    model, run_cfg = _load_run_model(ckpts[0])
    records, root = _analysis_records(args, run_cfg, ckpts[0])
    if args.instrument == "erf":
        return _analyze_erf(args, model, run_cfg, records, root, out_dir)
    return _analyze_attn(args, model, run_cfg, records, root, out_dir)


# ---------------------------------------------------------------------------
# reports


def read_predictions(path):
    """Pooled predictions CSV -> (pred, target, folds) float/int arrays."""
    preds, targets, folds = [], [], []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != PREDICTIONS_HEADER:
                raise DataError(f"{path}: bad predictions header {header}")
            for row in reader:
                targets.append(float(row[2]))
                preds.append(float(row[3]))
                folds.append(int(row[4]))
    except (ValueError, IndexError) as err:
        raise DataError(f"{path}: malformed predictions row: {err}") \
            from err
    return (np.asarray(preds), np.asarray(targets),
            np.asarray(folds, dtype=np.int64))


def evaluate_pooled(pred, target):
    """All Table-2 metrics from a pooled prediction set."""
    out = dict(regression_metrics(pred, target))
    brier, reliability = brier_and_reliability(pred, target)
    out["brier"] = brier
    out["auroc"] = auroc(pred, target)
    return out, reliability


def _metric_fn(key):
    if key in ("mse", "mae", "r2", "pearson"):
        def fn(p, t, key=key):
            value = regression_metrics(p, t)[key]
            if value is None:
                raise DataError(f"{key} undefined on this resample")
            return value
        return fn
    if key == "brier":
        return lambda p, t: brier_and_reliability(p, t)[0]
    return auroc


def _find_runs(runs_dir):
    if not os.path.isdir(runs_dir):
        raise DataError(f"run directory {runs_dir} does not exist")
    if os.path.isfile(os.path.join(runs_dir, POOLED_PREDICTIONS)):
        return [runs_dir]
    runs = [os.path.join(runs_dir, d) for d in sorted(os.listdir(runs_dir))
            if os.path.isfile(os.path.join(runs_dir, d,
                                           POOLED_PREDICTIONS))]
    if not runs:
        raise DataError(f"no completed runs (with {POOLED_PREDICTIONS}) "
                        f"under {runs_dir}")
    return runs


def cmd_report(args):
    runs = _find_runs(args.runs)
    header2 = list(TABLE2_HEADER)
    if args.ci:
        if args.bootstrap_n < 100:
            raise UsageError(f"--bootstrap-n must be >= 100, "
                             f"got {args.bootstrap_n}")
        for key in METRIC_KEYS:
            header2 += [f"{key}_lo", f"{key}_hi"]
    rows2, rows3, rows_rel = [], [], []
    for run in runs:
        run_cfg = _read_json(os.path.join(run, RESOLVED_CONFIG),
                             "resolved config")
        pred, target, _ = read_predictions(
            os.path.join(run, POOLED_PREDICTIONS))
        model_cfg = ModelConfig(**run_cfg["model"])
        name, dim = run_cfg["name"], model_cfg.input_dims
        params = build_model(model_cfg, seed=0).param_count()
        metrics, reliability = evaluate_pooled(pred, target)
        row = [name, dim, params] + [metrics[k] for k in METRIC_KEYS]
        if args.ci:
            for key in METRIC_KEYS:
                lo, hi = bootstrap_ci(
                    _metric_fn(key), pred, target, n=args.bootstrap_n,
                    seed=derive_seed(run_cfg["seed"], f"bootstrap:{key}"))
                row += [lo, hi]
        rows2.append(row)
        bins, balanced = stratified_sens_spec(pred, target)
        for b in _BIN_ORDER:
            if b not in bins:
                continue
            entry = bins[b]
            rows3.append([name, dim, b, entry["sensitivity"],
                          entry["specificity"], entry["count"], balanced])
        for j, (mean_pred, pos_fraction, count) in enumerate(reliability):
            rows_rel.append([name, dim, j + 1, mean_pred, pos_fraction,
                            count])
    out_dir = args.out or args.runs
    os.makedirs(out_dir, exist_ok=True)
    if args.format == "csv":
        write_csv(os.path.join(out_dir, "table2.csv"), header2, rows2)
        write_csv(os.path.join(out_dir, "table3.csv"), TABLE3_HEADER, rows3)
        write_csv(os.path.join(out_dir, "reliability.csv"),
                  RELIABILITY_HEADER, rows_rel)
        print(f"report: {len(rows2)} runs -> "
              f"{os.path.join(out_dir, 'table2.csv')}, table3.csv, "
              f"reliability.csv")
    else:
        payload = {
            "table2": [dict(zip(header2, r)) for r in rows2],
            "table3": [dict(zip(TABLE3_HEADER, r)) for r in rows3],
            "reliability": [dict(zip(RELIABILITY_HEADER, r))
                            for r in rows_rel],
        }
        write_json(os.path.join(out_dir, "report.json"), payload)
        print(f"report: {len(rows2)} runs -> "
              f"{os.path.join(out_dir, 'report.json')}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(
        prog="volab",
        description=__doc__,
        epilog=_SCHEMA_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    parser.set_defaults(func=None)

    p = sub.add_parser(
        "phantom", help="generate a synthetic phantom dataset",
        description="Write n phantom volumes (VOLB) plus a manifest CSV. "
                    "Reruns with the same arguments are byte-identical.",
        epilog=_SCHEMA_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--n", type=int, required=True,
                   help="number of volumes")
    p.add_argument("--shape", default="32,32,32",
                   help="volume shape as D,H,W (default 32,32,32)")
    p.add_argument("--seed", type=int, required=True,
                   help="master seed for the dataset stream")
    p.add_argument("--gmm", default=None,
                   help="optional labeling mixture JSON (default built-in)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--amp-lo", type=float, default=0.0,
                   help="anomaly amplitude range low end (default 0)")
    p.add_argument("--amp-hi", type=float, default=1.0,
                   help="anomaly amplitude range high end (default 1)")
    p.add_argument("--sparsity", type=float, default=0.2,
                   help="anomaly voxel fraction (default 0.2)")
    p.add_argument("--noise", type=float, default=0.05,
                   help="sensor noise sigma (default 0.05)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser(
        "train", help="train patient-grouped cross-validation folds",
        description="Train from an experiment config JSON: per-fold "
                    "checkpoint + history CSV, and pooled out-of-fold "
                    "predictions when all folds run. The mandatory master "
                    "seed fans out to named sub-streams "
                    f"({', '.join(SEED_STREAMS)}).",
        epilog=_SCHEMA_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True,
                   help="experiment config JSON path")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--fold", type=int, default=None,
                       help="train a single fold index")
    group.add_argument("--all-folds", action="store_true",
                       help="train every fold (default)")
    p.add_argument("--parallel-folds", type=int, default=1, metavar="N",
                   help="train up to N independent folds concurrently "
                        "(capped by VOLAB_THREADS)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "analyze", help="run a mechanistic instrument on checkpoints",
        description="erf: Table-4-schema stage radii + raw mean maps "
                    "(.npy). attn: Table-5-schema per-risk-bin attention "
                    "distance stats (attention-bearing families only). "
                    "cka: activation dumps (ADMP) per checkpoint plus a "
                    "symmetric fold-averaged CKA matrix CSV.",
        epilog=_SCHEMA_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--checkpoint", nargs="+", required=True,
                   help="checkpoint path(s); cka accepts several")
    p.add_argument("--instrument", required=True,
                   choices=("erf", "attn", "cka"))
    p.add_argument("--stages", default=None,
                   help="comma-separated stage taps (erf; default: the "
                        "model's table stages)")
    p.add_argument("--k", type=int, default=None,
                   help="top-k attended tokens per query (attn; default 5)")
    p.add_argument("--manifest", default=None,
                   help="manifest of analysis inputs (default: the "
                        "training manifest recorded in the run)")
    p.add_argument("--erf-inputs", dest="erf_inputs", type=int,
                   default=None, help="inputs averaged per ERF map")
    p.add_argument("--attn-inputs", dest="attn_inputs", type=int,
                   default=None, help="inputs sampled across risk bins")
    p.add_argument("--cka-inputs", dest="cka_inputs", type=int,
                   default=None, help="inputs per activation dump")
    p.add_argument("--threshold", type=float, default=None,
                   help="ERF mask threshold (default 0.01)")
    p.add_argument("--out", default=None,
                   help="output directory (default: beside checkpoint)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser(
        "report", help="aggregate runs into performance tables",
        description="One Table-2-schema row per run plus Table-3-schema "
                    "stratified rows and a reliability table, recomputed "
                    "from each run's pooled predictions. --format json "
                    "emits the same values as a single report.json.",
        epilog=_SCHEMA_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--runs", required=True,
                   help="directory of run directories (or a single run)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--ci", action="store_true",
                   help="append bootstrap confidence-interval columns")
    p.add_argument("--bootstrap-n", dest="bootstrap_n", type=int,
                   default=1000,
                   help="bootstrap resamples for --ci (default 1000)")
    p.add_argument("--out", default=None,
                   help="output directory (default: --runs)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.func is None:
            raise UsageError("no command given (see volab --help)")
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (DataError, ShapeError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
