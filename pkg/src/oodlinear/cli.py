"""Command-line surface.

Subcommands: synth, score, calibrate, stream, eval, run, diagnose.
Every subcommand accepts --config FILE (flat key = value lines); flags
given on the command line override config values.  Exit codes: 0 on
success, 1 on usage errors (help text included), 2 on data errors
(unreadable/invalid files, impossible requests).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from oodlinear import calibrate, io, metrics, pipeline, scorers
from oodlinear.errors import (
    ConfigurationError,
    FormatError,
    InsufficientDataError,
    ShapeError,
    UndefinedMetricError,
)

_DATA_ERRORS = (
    ConfigurationError,
    FormatError,
    InsufficientDataError,
    ShapeError,
    UndefinedMetricError,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    ValueError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 with help, not argparse's default 2
        raise UsageError(f"{message}\n\n{self.format_help()}")


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {value!r}")


def parse_scorer_token(token: str) -> scorers.ScorerConfig:
    """msp | energy:T=2 | odin:T=1000:eps=0.0024 and so on."""
    parts = token.split(":")
    kind = parts[0]
    temperature = None
    epsilon = 0.0
    for part in parts[1:]:
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigurationError(f"bad scorer option {part!r} in {token!r}")
        if key in ("T", "t", "temperature"):
            temperature = float(value)
        elif key in ("eps", "epsilon"):
            epsilon = float(value)
        else:
            raise ConfigurationError(f"unknown scorer option {key!r} in {token!r}")
    return scorers.ScorerConfig(kind=kind, temperature=temperature, epsilon=epsilon)


def parse_method_token(token: str) -> pipeline.MethodSpec:
    """none | dlr | rlr:lambda=1e-5:p=80 | online:b=128 | online:b=all."""
    parts = token.split(":")
    kind = parts[0]
    lam, percentile, batch = 1e-5, 80.0, None
    for part in parts[1:]:
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigurationError(f"bad method option {part!r} in {token!r}")
        if key in ("lambda", "lam"):
            lam = float(value)
        elif key in ("p", "percentile"):
            percentile = float(value)
        elif key in ("b", "batch", "batch_size"):
            batch = None if value == "all" else int(value)
        else:
            raise ConfigurationError(f"unknown method option {key!r} in {token!r}")
    if kind == "rlr":
        return pipeline.MethodSpec(kind="rlr", rlr=calibrate.RlrConfig(lam=lam, percentile=percentile))
    if kind == "online":
        return pipeline.MethodSpec(kind="online", batch_size=batch)
    return pipeline.MethodSpec(kind=kind)


def _split_list(value: str) -> list[str]:
    # list-valued keys accept either spaces or commas as separators
    return value.replace(",", " ").split()


def plan_from_config(cfg: dict[str, str]) -> pipeline.ExperimentPlan:
    """Build an ExperimentPlan from flat config keys."""

    def get(key: str, default: str) -> str:
        return cfg.get(key, default)

    kind = get("dataset", "synthetic")
    if kind == "synthetic":
        dataset = pipeline.SyntheticSpec(
            name=get("name", "synthetic"),
            dim=int(get("dim", "16")),
            n_classes=int(get("classes", "4")),
            in_count=int(get("in_count", "2500")),
            out_count=int(get("out_count", "2500")),
            separation=float(get("separation", "3.0")),
            ood_kinds=tuple(_split_list(get("ood", "midspace"))),
            noise_sigma=float(get("noise_sigma", "1.0")),
            logit_source=get("logit_source", "linear"),
            logit_scale=float(get("logit_scale", "1.0")),
            logit_noise=float(get("logit_noise", "0.0")),
        )
    elif kind == "import":
        if "in_path" not in cfg:
            raise ConfigurationError("import dataset needs in_path")
        out_paths = []
        for token in get("out_paths", "").split():
            tag, sep, path = token.partition(":")
            if not sep:
                raise ConfigurationError(f"out_paths entries look like tag:path, got {token!r}")
            out_paths.append((tag, path))
        dataset = pipeline.ImportSpec(
            in_path=cfg["in_path"], out_paths=tuple(out_paths), name=cfg.get("name")
        )
    else:
        raise ConfigurationError(f"dataset must be 'synthetic' or 'import', got {kind!r}")

    total_raw = get("total", "none").lower()
    pca_raw = get("pca_dim", "none").lower()
    return pipeline.ExperimentPlan(
        dataset=dataset,
        scorers=tuple(parse_scorer_token(t) for t in _split_list(get("scorers", "msp"))),
        methods=tuple(parse_method_token(t) for t in _split_list(get("methods", "none dlr"))),
        prep=calibrate.PrepSpec(
            unit_normalize=_parse_bool(get("unit_norm", "false")),
            pca_dim=None if pca_raw in ("none", "") else int(pca_raw),
            add_bias=_parse_bool(get("bias", "true")),
        ),
        in_rate=float(get("in_rate", "0.5")),
        total=None if total_raw in ("none", "all", "") else int(total_raw),
        repeats=int(get("repeats", "1")),
        seed=int(get("seed", "0")),
    )


def _load_merged(args: argparse.Namespace, keys: dict[str, tuple]) -> dict:
    """CLI value if given, else config-file value, else the default."""
    config = io.load_config(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key, (cast, default) in keys.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            out[key] = cli_value
        elif key in config:
            out[key] = cast(config[key])
        else:
            out[key] = default
    return out


def _prep_spec(options: dict) -> calibrate.PrepSpec:
    return calibrate.PrepSpec(
        unit_normalize=options["unit_norm"],
        pca_dim=options["pca_dim"],
        add_bias=options["bias"],
    )


def _cmd_synth(args) -> int:
    options = _load_merged(
        args,
        {
            "dim": (int, 16),
            "classes": (int, 4),
            "in_count": (int, 2500),
            "out_count": (int, 2500),
            "separation": (float, 3.0),
            "ood": (str, "midspace"),
            "noise_sigma": (float, 1.0),
            "logit_source": (str, "linear"),
            "logit_scale": (float, 1.0),
            "logit_noise": (float, 0.0),
            "in_rate": (float, 0.5),
            "total": (str, "none"),
            "seed": (int, 0),
        },
    )
    spec = pipeline.SyntheticSpec(
        dim=options["dim"],
        n_classes=options["classes"],
        in_count=options["in_count"],
        out_count=options["out_count"],
        separation=options["separation"],
        ood_kinds=tuple(str(options["ood"]).split()),
        noise_sigma=options["noise_sigma"],
        logit_source=options["logit_source"],
        logit_scale=options["logit_scale"],
        logit_noise=options["logit_noise"],
    )
    total = None if str(options["total"]).lower() in ("none", "all") else int(options["total"])
    plan = pipeline.ExperimentPlan(
        dataset=spec,
        scorers=(scorers.ScorerConfig("msp"),),
        methods=(pipeline.MethodSpec("none"),),
        in_rate=options["in_rate"],
        total=total,
        seed=options["seed"],
    )
    pools = pipeline.build_pools(plan)
    records = pipeline.draw_mixed_set(pools, plan, options["seed"])
    io.write_container(args.out, io.records_to_sections(records))
    print(f"wrote {len(records)} records to {args.out}")
    if args.model_out:
        io.save_mlp(args.model_out, pools.model)
        print(f"wrote logit model to {args.model_out}")
    return 0


def _cmd_score(args) -> int:
    options = _load_merged(
        args,
        {"scorer": (str, "msp"), "temperature": (float, None), "epsilon": (float, 0.0)},
    )
    cfg = scorers.ScorerConfig(
        kind=options["scorer"], temperature=options["temperature"], epsilon=options["epsilon"]
    )
    sections = io.read_container(args.input)
    records = io.sections_to_records(sections)
    model = io.load_mlp(args.model) if args.model else None
    values = scorers.score_batch(records, cfg, model)
    sections["scores"] = np.asarray(values, dtype="<f8")
    io.write_container(args.out, sections)
    print(f"scored {len(records)} records with {pipeline.scorer_name(cfg)} -> {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    options = _load_merged(
        args,
        {
            "method": (str, "dlr"),
            "lam": (float, 1e-5),
            "percentile": (float, 80.0),
            "pca_dim": (int, None),
            "unit_norm": (_parse_bool, False),
            "bias": (_parse_bool, True),
        },
    )
    sections = io.read_container(args.input)
    if "scores" not in sections:
        raise ConfigurationError("container has no 'scores' section; run the score command first")
    features = np.asarray(sections["features"], dtype=np.float64)
    base = np.asarray(sections["scores"], dtype=np.float64)
    prep = _prep_spec(options)
    if options["method"] == "dlr":
        model = calibrate.fit_dlr(features, base, prep)
    elif options["method"] == "rlr":
        cfg = calibrate.RlrConfig(lam=options["lam"], percentile=options["percentile"])
        model, report = calibrate.fit_rlr(features, base, prep, cfg)
        if not report.lasso_converged:
            print("warning: residual solve hit the sweep cap; using the best iterate", file=sys.stderr)
    else:
        raise ConfigurationError(f"method must be dlr or rlr, got {options['method']!r}")
    sections["scores_calibrated"] = calibrate.predict(model, features).astype("<f8")
    io.write_container(args.out, sections)
    print(f"calibrated {features.shape[0]} scores with {options['method']} -> {args.out}")
    if args.save_model:
        io.save_regression_model(args.save_model, model)
        print(f"wrote regression model to {args.save_model}")
    return 0


def _cmd_stream(args) -> int:
    options = _load_merged(
        args,
        {
            "batch_size": (str, "all"),
            "seed": (int, 0),
            "pca_dim": (int, None),
            "unit_norm": (_parse_bool, False),
            "bias": (_parse_bool, True),
        },
    )
    sections = io.read_container(args.input)
    if "scores" not in sections:
        raise ConfigurationError("container has no 'scores' section; run the score command first")
    features = np.asarray(sections["features"], dtype=np.float64)
    base = np.asarray(sections["scores"], dtype=np.float64)
    n = features.shape[0]
    fitted = calibrate.preprocess_fit(features, _prep_spec(options))
    z = fitted.transform(features)
    state = io.load_online_state(args.resume) if args.resume else calibrate.online_init(z.shape[1])
    batch = n if str(options["batch_size"]).lower() == "all" else int(options["batch_size"])
    if batch < 1:
        raise ConfigurationError(f"batch_size must be at least 1, got {batch}")
    order = np.random.default_rng(options["seed"]).permutation(n)
    calibrated = np.zeros(n)
    for start in range(0, n, batch):
        idx = order[start : start + batch]
        state, out = calibrate.online_update(state, z[idx], base[idx])
        calibrated[idx] = out  # scatter back to the container's record order
    sections["scores_calibrated"] = calibrated.astype("<f8")
    io.write_container(args.out, sections)
    print(f"streamed {n} records in batches of {batch} -> {args.out}")
    if args.checkpoint:
        io.save_online_state(args.checkpoint, state)
        print(f"wrote online state ({state.samples_seen} samples seen) to {args.checkpoint}")
    return 0


def _infer_names(path: str, sections) -> tuple[str, str]:
    stem = os.path.splitext(os.path.basename(path))[0]
    try:
        n = np.asarray(sections["features"]).shape[0]
        labels = np.asarray(sections.get("labels", np.zeros(n, dtype="u1")))
        tags = io.decode_tags(sections["source_tags"], n) if "source_tags" in sections else []
        out_tags = sorted({t for t, flag in zip(tags, labels) if flag == 1})
        return stem, "+".join(out_tags) if out_tags else "out"
    except FormatError:
        return stem, "out"


def _cmd_eval(args) -> int:
    options = _load_merged(args, {"section": (str, "scores"), "tpr": (float, 0.95)})
    sections = io.read_container(args.input)
    name = options["section"]
    if name not in sections:
        raise ConfigurationError(f"container has no {name!r} section")
    if "labels" not in sections:
        raise ConfigurationError("container has no 'labels' section; cannot evaluate")
    values = np.asarray(sections[name], dtype=np.float64)
    labels = np.asarray(sections["labels"])
    report = metrics.evaluate(values, labels, options["tpr"])
    in_name, ood_name = _infer_names(args.input, sections)
    row = pipeline.CellAggregate(
        in_dataset=in_name,
        ood_dataset=ood_name,
        scorer=name,
        method="file",
        repeats=1,
        fpr95_mean=report.fpr95,
        fpr95_std=0.0,
        auroc_mean=report.auroc,
        auroc_std=0.0,
        aupr_mean=report.aupr,
        aupr_std=0.0,
    )
    text = io.render_results_table([row])
    sys.stdout.write(text)
    if args.out:
        io.atomic_write_bytes(args.out, text.encode("utf-8"))
    if args.json_out:
        io.atomic_write_bytes(args.json_out, io.render_results_json([row]).encode("utf-8"))
    return 0


def _cmd_run(args) -> int:
    cfg = io.load_config(args.plan)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set entries look like key=value, got {item!r}")
        cfg[key.strip()] = value.strip()
    plan = plan_from_config(cfg)
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    result = pipeline.run(plan)
    text = io.render_results_table(result.aggregates)
    sys.stdout.write(text)
    if args.out:
        io.atomic_write_bytes(args.out, text.encode("utf-8"))
    if args.json_out:
        io.atomic_write_bytes(args.json_out, io.render_results_json(result.aggregates).encode("utf-8"))
    return 0


def _cmd_diagnose(args) -> int:
    options = _load_merged(args, {"section": (str, "scores")})
    sections = io.read_container(args.input)
    name = options["section"]
    if name not in sections:
        raise ConfigurationError(f"container has no {name!r} section")
    features = np.asarray(sections["features"], dtype=np.float64)
    values = np.asarray(sections[name], dtype=np.float64)
    labels = np.asarray(sections["labels"]) if "labels" in sections else None
    report = pipeline.diagnose_linearity(features, values, labels)
    plane = ", ".join(f"{v:.6f}" for v in report.plane)
    print(f"r_squared = {report.r_squared:.6f}")
    print(f"plane = [{plane}]")
    if report.probe_accuracy is not None:
        print(f"probe_accuracy = {report.probe_accuracy:.6f}")
    if args.out:
        io.atomic_write_bytes(args.out, report.table_text().encode("utf-8"))
        print(f"wrote plot data to {args.out}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--seed", type=int, default=None, help="RNG seed")


def build_parser() -> _Parser:
    parser = _Parser(prog="oodlinear", description="OOD scoring with test-time linear calibration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled container")
    _add_common(p)
    p.add_argument("--out", required=True, help="output container path")
    p.add_argument("--model-out", default=None, help="also save the logit model checkpoint here")
    for flag, typ in [
        ("--dim", int), ("--classes", int), ("--in-count", int), ("--out-count", int),
        ("--separation", float), ("--noise-sigma", float), ("--logit-scale", float),
        ("--logit-noise", float), ("--in-rate", float),
    ]:
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--ood", default=None, help="space-separated kinds: midspace uniform01 gaussian_half")
    p.add_argument("--logit-source", choices=["linear", "mlp"], default=None)
    p.add_argument("--total", default=None, help="mixed-set size, or 'all'")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("score", help="add a 'scores' section to a container")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True, help="input container")
    p.add_argument("--out", required=True, help="output container (copy with scores)")
    p.add_argument("--scorer", choices=list(scorers.SCORER_KINDS), default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--model", default=None, help="model checkpoint for gradient-based scoring")
    p.set_defaults(handler=_cmd_score)

    p = sub.add_parser("calibrate", help="fit the linear calibration and add scores_calibrated")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["dlr", "rlr"], default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="residual solve penalty")
    p.add_argument("--percentile", type=float, default=None, help="kept-sample percentage")
    p.add_argument("--pca-dim", type=int, default=None)
    p.add_argument("--unit-norm", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--bias", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--save-model", default=None, help="write the fitted regression model here")
    p.set_defaults(handler=_cmd_calibrate)

    p = sub.add_parser("stream", help="online calibration over a shuffled batch stream")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", dest="batch_size", default=None, help="integer or 'all'")
    p.add_argument("--pca-dim", type=int, default=None)
    p.add_argument("--unit-norm", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--bias", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--checkpoint", default=None, help="write the final accumulator state here")
    p.add_argument("--resume", default=None, help="start from this accumulator state")
    p.set_defaults(handler=_cmd_stream)

    p = sub.add_parser("eval", help="metrics for a scored container")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--section", default=None, help="score section to evaluate (default scores)")
    p.add_argument("--tpr", type=float, default=None, help="TPR target (default 0.95)")
    p.add_argument("--out", default=None, help="write the text table here")
    p.add_argument("--json-out", default=None, help="write the JSON table here")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("run", help="execute an experiment plan file")
    _add_common(p)
    p.add_argument("plan", help="plan file (flat key = value)")
    p.add_argument("--set", action="append", default=None, metavar="KEY=VALUE", help="override a plan key")
    p.add_argument("--out", default=None, help="write the text table here")
    p.add_argument("--json-out", default=None, help="write the JSON table here")
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("diagnose", help="2-D linear-separability diagnostic for a scored container")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--section", default=None)
    p.add_argument("--out", default=None, help="write plot-ready TSV here")
    p.set_defaults(handler=_cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help lands here
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
