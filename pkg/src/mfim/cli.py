"""Command-line entry point: simulate, train, evaluate, ensemble, gradcheck.

Configuration comes from an optional ``key=value`` file (``--config``) with
command-line flags taking precedence.  Every command that writes to ``--out``
also writes the fully resolved configuration there as ``config.txt``.

Exit codes: 0 success, 1 configuration error, 2 I/O or input-data error,
3 numeric divergence or failed gradient check.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import data_model, estimator, evaluation, simulator
from .errors import (
    CompatibilityError,
    ConfigError,
    CoverageError,
    NumericError,
    ParseError,
    TrainingError,
    ValidationError,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

SIM_KEYS = set(simulator.SimConfig.keys())
TRAIN_KEYS = {f.name for f in fields(estimator.TrainConfig)} - {"features"}
FEATURE_KEYS = {"use_position", "use_mtype", "use_serph", "use_slipoff"}
PATH_KEYS = {"corpus", "annotations", "checkpoint", "scores", "spec", "report", "out"}
OTHER_KEYS = {"preset", "per_query", "grid_step", "search", "h", "coords", "check_batch"}
KNOWN_KEYS = SIM_KEYS | TRAIN_KEYS | FEATURE_KEYS | PATH_KEYS | OTHER_KEYS

log = logging.getLogger("mfim")


def read_kv_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def resolve_config(args) -> dict:
    """Merge the config file with flags (flags win) and reject unknown keys."""
    raw = read_kv_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    for key, value in vars(args).items():
        if key in ("config", "set", "command", "func", "verbose") or value is None:
            continue
        raw[key] = str(value)
    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def build_sim_config(raw: dict) -> simulator.SimConfig:
    return simulator.sim_config_from_dict({k: v for k, v in raw.items() if k in SIM_KEYS})


def build_train_config(raw: dict) -> estimator.TrainConfig:
    base = dict(estimator.PRESETS[raw["preset"]]) if raw.get("preset") else {}
    if raw.get("preset") and raw["preset"] not in estimator.PRESETS:
        raise ConfigError(f"unknown preset {raw['preset']!r}")
    feats = base.pop("features", estimator.FeatureSet())
    flags = {k: getattr(feats, k) for k in FEATURE_KEYS}
    for k in FEATURE_KEYS & set(raw):
        flags[k] = _bool(raw[k])
    kwargs = dict(base)
    conv = {f.name: f.type for f in fields(estimator.TrainConfig)}
    for k in TRAIN_KEYS & set(raw):
        v = raw[k]
        try:
            if conv[k] in ("int", int):
                kwargs[k] = int(v)
            elif conv[k] in ("float", float):
                kwargs[k] = float(v)
            elif conv[k] in ("bool", bool):
                kwargs[k] = _bool(v)
            else:
                kwargs[k] = v
        except ValueError:
            raise ConfigError(f"bad value {v!r} for {k}") from None
    return estimator.TrainConfig(features=estimator.FeatureSet(**flags), **kwargs)


def resolved_lines(raw: dict, extra: dict | None = None):
    merged = dict(raw)
    if extra:
        merged.update({k: str(v) for k, v in extra.items()})
    return [f"{k}={merged[k]}\n" for k in sorted(merged)]


def _out_dir(raw) -> str:
    out = raw.get("out", ".")
    os.makedirs(out, exist_ok=True)
    return out


def _write(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def _need(raw, key):
    if not raw.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return raw[key]


def _train_config_extra(cfg: estimator.TrainConfig) -> dict:
    extra = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "features"}
    for k in FEATURE_KEYS:
        extra[k] = int(getattr(cfg.features, k))
    return extra


def cmd_simulate(raw: dict) -> int:
    cfg = build_sim_config(raw)
    out = _out_dir(raw)
    sessions, truth, annotations = simulator.gen_corpus(cfg)
    _write(os.path.join(out, "sessions.tsv"), data_model.write_session_log(sessions, cfg.header))
    _write(os.path.join(out, "annotations.tsv"), data_model.write_annotations(annotations))
    _write(os.path.join(out, "ground_truth.tsv"), truth.lines())
    clicks = sum(int(d.click) for s in sessions for d in s.docs)
    manifest = [
        f"seed\t{cfg.seed}\n",
        f"queries\t{len(sessions)}\n",
        f"documents\t{sum(s.n for s in sessions)}\n",
        f"clicks\t{clicks}\n",
        f"annotated_queries\t{len({a.query_id for a in annotations})}\n",
        f"annotations\t{len(annotations)}\n",
    ]
    _write(os.path.join(out, "manifest.txt"), manifest)
    extra = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for k in ("obs_profile", "perception_table"):
        if extra[k] is not None:
            extra[k] = ",".join(repr(float(v)) for v in extra[k])
    _write(os.path.join(out, "config.txt"), resolved_lines(raw, extra))
    print(f"wrote {len(sessions)} sessions ({clicks} clicks) to {out}")
    return EXIT_OK


def _load_corpus(raw):
    return data_model.read_session_log(_need(raw, "corpus"))


def cmd_train(raw: dict) -> int:
    cfg = build_train_config(raw)
    header, sessions = _load_corpus(raw)
    annotations = data_model.read_annotations(raw["annotations"]) if raw.get("annotations") else None
    out = _out_dir(raw)
    model, trace = estimator.train(sessions, cfg, annotations, header)
    estimator.save_checkpoint(model, os.path.join(out, "model.ckpt"))
    _write(os.path.join(out, "trace.tsv"), trace.lines())
    _write(os.path.join(out, "config.txt"), resolved_lines(raw, _train_config_extra(cfg)))
    last = trace.train_loss[-1] if len(trace) else float("nan")
    print(f"trained {cfg.epochs} epochs, final loss {last:.6f}; checkpoint {os.path.join(out, 'model.ckpt')}")
    return EXIT_OK


def _read_scores(path) -> dict:
    scores = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                raise ParseError("expected query_id, doc_id, score", lineno)
            try:
                scores.setdefault(parts[0], {})[parts[1]] = float(parts[2])
            except ValueError:
                raise ParseError(f"bad score {parts[2]!r}", lineno, 3) from None
    return scores


def _annotated_arrays(raw, annotations):
    header, sessions = _load_corpus(raw)
    wanted = {a.query_id for a in annotations}
    return data_model.CorpusArrays.from_sessions([s for s in sessions if s.query_id in wanted], header.dims)


def _emit_report(raw, report, name="report.tsv"):
    per_query = _bool(raw.get("per_query", False))
    text = report.to_tsv(per_query)
    out = _out_dir(raw)
    _write(os.path.join(out, name), [text])
    sys.stdout.write(text)


def cmd_evaluate(raw: dict) -> int:
    annotations = data_model.read_annotations(_need(raw, "annotations"))
    if raw.get("scores"):
        scores = _read_scores(raw["scores"])
    else:
        model = estimator.load_checkpoint(_need(raw, "checkpoint"))
        arrays = _annotated_arrays(raw, annotations)
        scores = evaluation.scores_by_query(arrays, estimator.predict_relevance(model, arrays.features))
    report = evaluation.evaluate(scores, annotations)
    _emit_report(raw, report)
    _write(os.path.join(_out_dir(raw), "config.txt"), resolved_lines(raw))
    return EXIT_OK


def cmd_ensemble(raw: dict) -> int:
    with open(_need(raw, "spec"), encoding="utf-8") as fh:
        spec = evaluation.EnsembleSpec.parse(fh)
    annotations = data_model.read_annotations(_need(raw, "annotations"))
    arrays = _annotated_arrays(raw, annotations)
    models = evaluation.load_members(spec)
    if _bool(raw.get("search", False)):
        member_scores = [estimator.predict_relevance(m, arrays.features) for m in models]
        weights, best = evaluation.grid_search_weights(
            member_scores, arrays, annotations, step=float(raw.get("grid_step", 0.1)))
        spec = evaluation.EnsembleSpec([(p, w) for (p, _), w in zip(spec.members, weights)])
        print(f"grid-searched weights {weights} -> validation DCG@10 {best!r}")
    combined = evaluation.ensemble_scores(spec, arrays.features, models)
    report = evaluation.evaluate(evaluation.scores_by_query(arrays, combined), annotations)
    _write(os.path.join(_out_dir(raw), "ensemble.tsv"), spec.lines())
    _emit_report(raw, report)
    _write(os.path.join(_out_dir(raw), "config.txt"), resolved_lines(raw))
    return EXIT_OK


def cmd_gradcheck(raw: dict) -> int:
    """Check both click losses through a freshly initialized model."""
    cfg = build_train_config(raw)
    h = float(raw.get("h", 1e-5))
    coords = int(raw.get("coords", 64))
    size = int(raw.get("check_batch", 8))
    sim = simulator.SimConfig(num_queries=64, seed=cfg.seed)
    sessions, _, _ = simulator.gen_corpus(sim)
    model = estimator.MfimModel.init(cfg, sim.header)
    worst = 0.0
    lines = []
    modes = ("pointwise_eq2", "group_eq3") if "loss_mode" not in raw else (cfg.loss_mode,)
    for mode in modes:
        arrays, rows, starts, clicked = estimator.gradient_check_batch(
            sessions, sim.header, mode, cfg.group, size, cfg.seed)
        res = estimator.model_gradcheck(model, arrays, rows, starts, clicked, mode, h, coords, cfg.seed)
        worst = max(worst, res.max_rel_error)
        lines.append(f"{mode}\tmax_rel_error={res.max_rel_error:.3e}\tcoords={res.checked}\n")
    status = "PASS" if worst <= 1e-4 else "FAIL"
    lines.append(f"{status}\tmax_rel_error={worst:.3e}\ttolerance=1e-04\n")
    sys.stdout.writelines(lines)
    if raw.get("out"):
        _write(os.path.join(_out_dir(raw), "gradcheck.txt"), lines)
        _write(os.path.join(_out_dir(raw), "config.txt"), resolved_lines(raw, _train_config_extra(cfg)))
    return EXIT_OK if worst <= 1e-4 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    def training(p):
        p.add_argument("--preset", choices=sorted(estimator.PRESETS))
        p.add_argument("--layers", type=int)
        p.add_argument("--group", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--hidden", type=int)
        p.add_argument("--loss-mode", dest="loss_mode", choices=estimator.LOSS_MODES)

    p = sub.add_parser("simulate", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--queries", dest="num_queries", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a session log")
    common(p)
    training(p)
    p.add_argument("--corpus")
    p.add_argument("--annotations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="DCG report for a checkpoint or a score file")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--scores", help="TSV of query_id, doc_id, score")
    p.add_argument("--corpus")
    p.add_argument("--annotations")
    p.add_argument("--per-query", dest="per_query", action="store_const", const="1")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="weighted sum of several checkpoints")
    common(p)
    p.add_argument("--spec", help="file of path<TAB>weight lines")
    p.add_argument("--corpus")
    p.add_argument("--annotations")
    p.add_argument("--search", action="store_const", const="1", help="grid-search weights on the simplex")
    p.add_argument("--grid-step", dest="grid_step", type=float)
    p.add_argument("--per-query", dest="per_query", action="store_const", const="1")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("gradcheck", help="finite-difference check of the model gradient")
    common(p)
    training(p)
    p.add_argument("--h", type=float)
    p.add_argument("--coords", type=int)
    p.add_argument("--check-batch", dest="check_batch", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        raw = resolve_config(args)
        return args.func(raw)
    except (ConfigError, CompatibilityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, ValidationError, CoverageError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
