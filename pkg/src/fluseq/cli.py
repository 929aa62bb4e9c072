"""Operator surface: ``fluseq {train,forecast,evaluate,gradcheck}``.

Configuration is one JSON document; command-line flags override config keys,
which override built-in defaults.  All outputs land under
``paths.output_dir``:

    checkpoints/<state>_<method>.ckpt          trained weights (+ scaler)
    checkpoints/<state>_<method>.history.csv   per-epoch train/val loss
    checkpoints/<state>_<method>.config.json   effective config snapshot
    checkpoints/<state>_<method>.train.log     epoch log
    forecasts/<state>_<method>.forecast.csv    origin week, horizon,
                                               prediction, attention weights
    reports/<state>.report.{csv,json,md}       per-state evaluation
    reports/report.{md,json}                   combined states x methods view

Exit codes: 0 success, 1 gradient-check failure, 2 data/config errors,
3 non-finite training loss, 4 output I/O errors, 5 checkpoint/architecture
mismatch.
"""

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from fluseq import data as data_mod
from fluseq import evaluate as eval_mod
from fluseq import model as model_mod
from fluseq import training as training_mod
from fluseq.errors import (
    CheckpointDimError,
    CheckpointError,
    ConfigError,
    DataError,
    DomainError,
    FluseqError,
    TrainingDivergedError,
)

EXIT_OK = 0
EXIT_GRADCHECK_FAIL = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
EXIT_IO = 4
EXIT_CHECKPOINT = 5

GRADCHECK_THRESHOLD = 1e-4


@dataclasses.dataclass
class Paths:
    ili_csv: str = ""
    trends_csv: str = ""
    checkpoint: str = ""
    output_dir: str = "out"


@dataclasses.dataclass
class RunConfig:
    state: str = ""
    states: list = dataclasses.field(default_factory=list)
    paths: Paths = dataclasses.field(default_factory=Paths)
    method: str = "seq2seq_attention"
    methods: list = dataclasses.field(default_factory=lambda: list(eval_mod.METHODS))
    train: training_mod.TrainConfig = dataclasses.field(
        default_factory=training_mod.TrainConfig
    )
    arch: model_mod.Architecture = dataclasses.field(
        default_factory=model_mod.Architecture
    )
    aggregation: str = "mean"
    split_ratio: float = 0.67
    impute: str = ""
    seasonal_period: int = 52
    ar_order: int = 10

    def state_list(self):
        if self.states:
            return list(self.states)
        if self.state:
            return [self.state]
        raise ConfigError("config needs 'state' (or 'states') for this command")


_SCALARS = {int: "int", float: "number", str: "string", bool: "bool"}


def _set_scalar(obj, field_name, value, qualified):
    current = getattr(obj, field_name)
    if isinstance(current, bool) or isinstance(value, bool):
        expected = bool
    elif isinstance(current, int) and not isinstance(value, float):
        expected = int
    elif isinstance(current, (int, float)):
        expected = float
    else:
        expected = type(current)
    if expected is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, expected):
        raise ConfigError(
            f"config key {qualified!r}: expected {_SCALARS.get(expected, expected)}, "
            f"got {type(value).__name__}"
        )
    setattr(obj, field_name, value)


def _apply_section(obj, raw, section):
    field_names = {f.name for f in dataclasses.fields(obj)}
    for key, value in raw.items():
        qualified = f"{section}.{key}" if section else key
        if key not in field_names:
            raise ConfigError(f"unknown config key {qualified!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {qualified!r}: expected object")
            _apply_section(current, value, qualified)
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"config key {qualified!r}: expected list")
            setattr(obj, key, list(value))
        elif isinstance(current, tuple):
            if not isinstance(value, list) or len(value) != len(current):
                raise ConfigError(
                    f"config key {qualified!r}: expected list of {len(current)} numbers"
                )
            setattr(obj, key, tuple(float(v) for v in value))
        else:
            _set_scalar(obj, key, value, qualified)


def load_config(path=None, overrides=None):
    """Build the effective RunConfig: defaults <- file <- flag overrides."""
    config = RunConfig()
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        _apply_section(config, raw, "")
    for dotted, value in (overrides or {}).items():
        obj = config
        *parents, leaf = dotted.split(".")
        for part in parents:
            obj = getattr(obj, part)
        if isinstance(getattr(obj, leaf), list):
            setattr(obj, leaf, value)
        else:
            _set_scalar(obj, leaf, value, dotted)
    config.arch.validate()
    config.train.validate()
    if config.aggregation not in eval_mod.AGGREGATIONS:
        raise ConfigError(
            f"config key 'aggregation': expected one of {eval_mod.AGGREGATIONS}"
        )
    if config.impute not in ("", "linear"):
        raise ConfigError("config key 'impute': expected \"linear\" or empty")
    for m in config.methods:
        if m != "all" and m not in eval_mod.METHODS:
            raise ConfigError(f"config key 'methods': unknown method {m!r}")
    if config.method not in eval_mod.NEURAL_METHODS:
        raise ConfigError(
            f"config key 'method': expected one of {eval_mod.NEURAL_METHODS}"
        )
    return config


def _out_dir(config):
    out = Path(config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out.resolve()


def _inside(base, candidate):
    try:
        candidate.resolve().relative_to(base)
    except ValueError:
        raise ConfigError(
            f"path {candidate} falls outside output_dir {base}; refusing to write"
        )
    return candidate


def _checkpoint_path(config, state, method, out_dir):
    if config.paths.checkpoint:
        return _inside(out_dir, Path(config.paths.checkpoint))
    folder = out_dir / "checkpoints"
    folder.mkdir(parents=True, exist_ok=True)
    return folder / f"{state}_{method}.ckpt"


def _data_path(template, state):
    if not template:
        raise ConfigError("config paths.ili_csv and paths.trends_csv are required")
    return template.replace("{state}", state)


def _load_state_series(config, state):
    ili_path = _data_path(config.paths.ili_csv, state)
    trends_path = _data_path(config.paths.trends_csv, state)
    allow_gaps = config.impute == "linear"
    try:
        ili = data_mod.load_ili_csv(ili_path, state=state, allow_gaps=allow_gaps)
    except OSError as exc:
        raise DataError(f"cannot read ILI CSV {ili_path}: {exc}") from exc
    try:
        trends = data_mod.load_trends_csv(
            trends_path, state=state, allow_gaps=allow_gaps
        )
    except OSError as exc:
        raise DataError(f"cannot read trends CSV {trends_path}: {exc}") from exc
    if allow_gaps:
        ili = data_mod.impute_linear(ili)
        trends = data_mod.impute_linear(trends)
    return ili, trends


def _prepare(config, state):
    ili, trends = _load_state_series(config, state)
    return data_mod.prepare_dataset(
        ili,
        trends,
        ratio=config.split_ratio,
        in_len=config.arch.in_len,
        out_len=config.arch.out_len,
    )


def _config_snapshot(config):
    payload = dataclasses.asdict(config)
    payload["train"]["adam_betas"] = list(payload["train"]["adam_betas"])
    return payload


def cmd_train(config):
    state = config.state_list()[0]
    out_dir = _out_dir(config)
    train_windows, _, scaler, _, _ = _prepare(config, state)
    rng = np.random.default_rng([config.train.seed, 0])
    params = model_mod.init_params(rng, config.arch, config.method)
    best, history = training_mod.train(params, train_windows, config.train)

    ckpt_path = _checkpoint_path(config, state, config.method, out_dir)
    snapshot = _config_snapshot(config)
    model_mod.checkpoint_save(
        ckpt_path, best, config.arch, scaler=scaler, config=snapshot
    )
    history.to_csv(ckpt_path.with_suffix(".history.csv"))
    ckpt_path.with_suffix(".config.json").write_text(
        json.dumps(snapshot, indent=2, sort_keys=True) + "\n"
    )
    log_lines = [
        f"state={state} method={config.method} windows={len(train_windows)}"
    ]
    for i, (tr, va) in enumerate(zip(history.train_loss, history.val_loss), start=1):
        va_text = "none" if va is None else f"{va:.6e}"
        log_lines.append(f"epoch {i}: train={tr:.6e} val={va_text}")
    log_lines.append(f"best epoch: {history.best_epoch}")
    ckpt_path.with_suffix(".train.log").write_text("\n".join(log_lines) + "\n")
    print(f"wrote {ckpt_path}")
    print(f"best epoch {history.best_epoch}, final train loss {history.train_loss[-1]:.6e}")
    return EXIT_OK


def cmd_forecast(config, weeks=None):
    state = config.state_list()[0]
    out_dir = _out_dir(config)
    ckpt_path = _checkpoint_path(config, state, config.method, out_dir)
    try:
        ckpt = model_mod.checkpoint_load(ckpt_path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {ckpt_path}: {exc}") from exc
    if ckpt.variant != config.method:
        raise CheckpointDimError(
            f"checkpoint holds {ckpt.variant!r}, config requests {config.method!r}"
        )
    horizon = weeks or ckpt.arch.out_len
    ili, trends = _load_state_series(config, state)
    features = data_mod.join_features(ili, trends)
    if len(features) < ckpt.arch.in_len:
        raise DataError(
            f"need at least {ckpt.arch.in_len} joined weeks, got {len(features)}"
        )
    scaler = ckpt.scaler
    if scaler is None:
        raise DataError(f"checkpoint {ckpt_path} carries no scaler; retrain")
    window = scaler.transform(features.values[-ckpt.arch.in_len :])
    if ckpt.variant == "simple_lstm":
        values = model_mod.simple_lstm_forecast(window, ckpt.params, horizon=horizon)
        maps = None
    else:
        result = model_mod.forecast(window, ckpt.params, horizon=horizon)
        values = result.values
        maps = result.attention_maps
    predictions = scaler.inverse_target(values)

    folder = out_dir / "forecasts"
    folder.mkdir(parents=True, exist_ok=True)
    csv_path = folder / f"{state}_{config.method}.forecast.csv"
    origin = data_mod.week_label(*features.weeks[-1])
    alpha_cols = [f"alpha_{j + 1}" for j in range(ckpt.arch.in_len)]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin_week", "horizon", "predicted_ili", *alpha_cols])
        for h in range(horizon):
            alphas = (
                [""] * ckpt.arch.in_len
                if maps is None
                else [repr(v) for v in maps[h]]
            )
            writer.writerow([origin, h + 1, repr(float(predictions[h])), *alphas])
    print(f"wrote {csv_path}")
    return EXIT_OK


def _neural_forecast_matrix(ckpt, test_region, horizon):
    scaler = ckpt.scaler
    scaled = data_mod.FeatureSeries(
        state=test_region.state,
        weeks=test_region.weeks,
        values=scaler.transform(test_region.values),
    )
    windows = data_mod.make_windows(scaled, in_len=ckpt.arch.in_len, out_len=horizon)
    preds = np.empty((len(windows), horizon))
    for m, sample in enumerate(windows):
        if ckpt.variant == "simple_lstm":
            values = model_mod.simple_lstm_forecast(
                sample.input, ckpt.params, horizon=horizon
            )
        else:
            values = model_mod.forecast(sample.input, ckpt.params, horizon=horizon).values
        preds[m] = scaler.inverse_target(values)
    return preds


def cmd_evaluate(config, methods=None):
    out_dir = _out_dir(config)
    methods = methods or config.methods
    if "all" in methods:
        methods = list(eval_mod.METHODS)
    for m in methods:
        if m not in eval_mod.METHODS:
            raise ConfigError(f"unknown method {m!r}")
    states = config.state_list()
    in_len, out_len = config.arch.in_len, config.arch.out_len
    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)

    all_reports = []
    for state in sorted(states):
        _, _, _, train_region, test_region = _prepare(config, state)
        full_ili = np.concatenate(
            [train_region.values[:, 0], test_region.values[:, 0]]
        )
        first_cut = len(train_region) + in_len
        n_windows = len(test_region) - in_len - out_len + 1
        truth = eval_mod.truth_matrix(full_ili, first_cut, n_windows, out_len)

        state_reports = []
        for method in methods:
            if method == "seasonal_naive":
                preds = eval_mod.rolling_forecasts(
                    full_ili,
                    first_cut,
                    n_windows,
                    out_len,
                    lambda hist: eval_mod.seasonal_naive_forecast(
                        hist, horizon=out_len, period=config.seasonal_period
                    ),
                )
            elif method == "ar_ls":
                fit = eval_mod.ar_ls_fit(
                    train_region.values[:, 0], order=config.ar_order
                )
                preds = eval_mod.rolling_forecasts(
                    full_ili,
                    first_cut,
                    n_windows,
                    out_len,
                    lambda hist: eval_mod.ar_ls_forecast(fit, hist, horizon=out_len),
                )
            else:
                ckpt_path = _checkpoint_path(config, state, method, out_dir)
                if not Path(ckpt_path).exists():
                    raise DataError(
                        f"no checkpoint for method {method!r} at {ckpt_path}; "
                        "train it first"
                    )
                ckpt = model_mod.checkpoint_load(ckpt_path)
                preds = _neural_forecast_matrix(ckpt, test_region, out_len)
            state_reports.append(
                eval_mod.per_horizon_evaluate(
                    preds, truth, state=state, method=method,
                    aggregation=config.aggregation,
                )
            )
        all_reports.extend(state_reports)
        with open(reports_dir / f"{state}.report.csv", "w", newline="") as fh:
            eval_mod.reports_to_csv(state_reports, fh)
        (reports_dir / f"{state}.report.json").write_text(
            eval_mod.reports_to_json(state_reports) + "\n"
        )
        (reports_dir / f"{state}.report.md").write_text(
            eval_mod.render_markdown(state_reports, methods=methods, states=[state])
        )

    (reports_dir / "report.md").write_text(
        eval_mod.render_markdown(all_reports, methods=methods, states=sorted(states))
    )
    (reports_dir / "report.json").write_text(
        eval_mod.reports_to_json(all_reports) + "\n"
    )
    print(f"wrote {reports_dir / 'report.md'}")
    return EXIT_OK


def cmd_gradcheck(config):
    rng = np.random.default_rng([config.train.seed, 0])
    params = model_mod.init_params(rng, config.arch, config.method)
    sample_rng = np.random.default_rng([config.train.seed, 9])
    # targets sit near the fresh model's outputs so the loss stays small;
    # central differences on a large loss would drown sub-1e-7 gradients in
    # float64 roundoff and make the relative-error readout meaningless
    sample = data_mod.WindowSample(
        input=sample_rng.uniform(0.0, 1.0, size=(config.arch.in_len, config.arch.feature_dim)),
        target=sample_rng.uniform(0.0, 0.15, size=config.arch.out_len),
        origin_week="",
    )
    max_rel, rows = training_mod.gradient_check(params, sample)
    print(f"checked {len(rows)} coordinates; max relative error {max_rel:.3e}")
    print("worst coordinates:")
    print(f"{'parameter':40s} {'index':>8s} {'tape':>13s} {'fd':>13s} {'rel':>10s}")
    for name, idx, gt, fd, rel in rows[:10]:
        print(f"{name:40s} {idx:8d} {gt:13.6e} {fd:13.6e} {rel:10.3e}")
    if max_rel < GRADCHECK_THRESHOLD:
        print(f"PASS (threshold {GRADCHECK_THRESHOLD})")
        return EXIT_OK
    print(f"FAIL (threshold {GRADCHECK_THRESHOLD})")
    return EXIT_GRADCHECK_FAIL


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fluseq",
        description="Train and evaluate weekly ILI forecasting models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "forecast", "evaluate", "gradcheck"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="JSON config file")
        cmd.add_argument("--seed", type=int, help="override train.seed")
        cmd.add_argument("--state", help="override the state label")
        if name == "evaluate":
            cmd.add_argument(
                "--methods", help="comma list of methods, or 'all'"
            )
            cmd.add_argument(
                "--aggregation", choices=eval_mod.AGGREGATIONS,
                help="aggregate mode for the report",
            )
        if name == "forecast":
            cmd.add_argument("--weeks", type=int, help="forecast horizon")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.state:
        overrides["state"] = args.state
        overrides["states"] = []
    if getattr(args, "aggregation", None):
        overrides["aggregation"] = args.aggregation
    try:
        config = load_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "forecast":
            return cmd_forecast(config, weeks=args.weeks)
        if args.command == "evaluate":
            methods = None
            if getattr(args, "methods", None):
                methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            return cmd_evaluate(config, methods=methods)
        return cmd_gradcheck(config)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FluseqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
