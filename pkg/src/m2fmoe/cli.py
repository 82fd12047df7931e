"""Command-line entry point.

Configuration is an INI file with sections ``[model]``, ``[train]``,
``[data]`` and ``[paths]``; any key can be overridden with
``--set section.key=value`` (or ``--set key=value`` when the key name is
unique).  Exit codes: 0 ok, 2 usage/config, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .bands import band_energy, build_masks, masks_from_beta, normalize_boundaries, to_fourier_indices
from .data import (gmm_fit, extreme_thresholds, load_csv, make_windows, oversample_starts,
                   prepare_splits, rolling_splits)
from .errors import ConfigError, DataError, LengthError, M2FMoEError, NumericError
from .fusion import first_diff
from .model import VARIANTS, AblationFlags, M2FMoE, ModelConfig
from .spectral import ScaleGrid, WaveletSpec, cwt, rfft
from .training import (TrainConfig, evaluate, load_model, routing_rows, save_model, train,
                       variant_flags, write_history, write_json, write_routing)

log = logging.getLogger("m2fmoe")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATA_DEFAULTS = {"test_fraction": 0.25, "val_count": 60, "stride": 1, "oversample": True,
                 "cap_fraction": 0.2, "gmm_components": 3}
PATH_DEFAULTS = {"data": "", "checkpoint": "", "output_dir": "."}
_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig) if f.name != "flags"}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
SCHEMA = {
    "model": set(_MODEL_FIELDS) | {"variant"},
    "train": set(_TRAIN_FIELDS),
    "data": set(DATA_DEFAULTS),
    "paths": set(PATH_DEFAULTS),
}


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict
    paths: dict
    variant: str = "full"


def _coerce(text: str, like):
    t = text.strip()
    if isinstance(like, bool):
        if t.lower() in ("1", "true", "yes", "on"):
            return True
        if t.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(t)
    if isinstance(like, float):
        return float(t)
    if isinstance(like, tuple):
        return tuple(int(v) for v in t.strip("[]()").replace(",", " ").split())
    return t


def _defaults() -> Dict[str, dict]:
    m = ModelConfig()
    return {
        "model": {**{k: getattr(m, k) for k in _MODEL_FIELDS}, "variant": "full"},
        "train": dataclasses.asdict(TrainConfig()),
        "data": dict(DATA_DEFAULTS),
        "paths": dict(PATH_DEFAULTS),
    }


def load_run_config(path: Optional[str], overrides: List[str], seed: Optional[int] = None) -> RunConfig:
    """Merge defaults, the INI file and ``--set`` overrides, rejecting unknown keys."""
    values = _defaults()
    raw: Dict[str, Dict[str, str]] = {s: {} for s in SCHEMA}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cp = configparser.ConfigParser()
        try:
            cp.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, val in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                raw[section][key] = val
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, name = key.split(".", 1)
        else:
            owners = [s for s, keys in SCHEMA.items() if key in keys]
            if len(owners) != 1:
                raise ConfigError(f"unknown config key {key}" if not owners else f"ambiguous key {key}")
            section, name = owners[0], key
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key}")
        raw[section][name] = val
    try:
        for section, items in raw.items():
            for k, v in items.items():
                values[section][k] = _coerce(v, values[section][k])
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    if seed is not None:
        values["train"]["seed"] = seed
    variant = values["model"].pop("variant")
    flags = variant_flags(variant)
    model = ModelConfig(**values["model"], flags=flags).validate()
    return RunConfig(model, TrainConfig(**values["train"]).validate(), values["data"], values["paths"], variant)


# ------------------------------------------------------------------ helpers


def _output_dir(args, rc: RunConfig) -> Path:
    out = Path(args.output_dir or rc.paths["output_dir"] or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_path(args, rc: RunConfig) -> str:
    path = getattr(args, "input", None) or rc.paths["data"]
    if not path:
        raise ConfigError("no data path given (use --input or paths.data)")
    if not Path(path).is_file():
        raise ConfigError(f"data file not found: {path}")
    return path


def _splits(rc: RunConfig, values):
    d = rc.data
    return prepare_splits(values, rc.model.t_in, rc.model.t_pred, test_fraction=d["test_fraction"],
                          val_count=d["val_count"], stride=d["stride"], oversampling=d["oversample"],
                          cap_fraction=d["cap_fraction"], gmm_components=d["gmm_components"],
                          seed=rc.train.seed)


def _routing_path(args, out: Path) -> Optional[Path]:
    if args.dump_routing is None:
        return None
    return Path(args.dump_routing) if args.dump_routing else out / "routing.csv"


def _train_and_report(args, rc: RunConfig, tag: str) -> dict:
    series = load_csv(_data_path(args, rc))
    splits = _splits(rc, series.values)
    model = M2FMoE(rc.model, seed=rc.train.seed)
    result = train(model, splits.train, splits.val, rc.train)
    out = _output_dir(args, rc)
    scores = evaluate(model, splits.test)
    scores.update({"variant": rc.variant, "best_epoch": result.best_epoch, "best_val": result.best_val,
                   "parameters": model.count_parameters(), "seed": rc.train.seed})
    write_history(out / f"history{tag}.csv", result.history)
    write_json(out / f"metrics{tag}.json", scores)
    save_model(out / f"model{tag}.m2fm", model, splits.norm)
    if splits.report is not None:
        write_json(out / f"oversample{tag}.json", splits.report.to_dict())
    rp = _routing_path(args, out)
    if rp is not None:
        write_routing(rp, routing_rows(model, splits.test))
    return scores


# ----------------------------------------------------------------- commands


def cmd_train(args, rc: RunConfig) -> int:
    scores = _train_and_report(args, rc, "")
    print(json.dumps(scores, sort_keys=True))
    return EXIT_OK


def cmd_ablation(args, rc: RunConfig) -> int:
    rc = dataclasses.replace(rc, model=dataclasses.replace(rc.model, flags=variant_flags(args.variant)).validate(),
                             variant=args.variant)
    tag = "_" + args.variant.replace("/", "_")
    scores = _train_and_report(args, rc, tag)
    print(json.dumps(scores, sort_keys=True))
    return EXIT_OK


def _checkpoint(args, rc: RunConfig) -> str:
    path = args.checkpoint or rc.paths["checkpoint"]
    if not path or not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path or '(none given)'}")
    return path


def cmd_predict(args, rc: RunConfig) -> int:
    model, norm = load_model(_checkpoint(args, rc))
    cfg = model.config
    if args.horizon is not None and args.horizon != cfg.t_pred:
        raise ConfigError(f"horizon {args.horizon} does not match checkpoint horizon {cfg.t_pred}")
    series = load_csv(_data_path(args, rc))
    if len(series) < cfg.t_in:
        raise LengthError(f"input has {len(series)} points, model needs {cfg.t_in}")
    x = series.values[-cfg.t_in:]
    z = norm.apply(x) if norm is not None else x
    pred = model.forward(z)[0].numpy()
    if norm is not None:
        pred = norm.invert(pred)
    lines = ["step," + ",".join(series.channels)]
    lines += [f"{i + 1}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(pred)]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args, rc: RunConfig) -> int:
    model, norm = load_model(_checkpoint(args, rc))
    cfg = model.config
    series = load_csv(_data_path(args, rc))
    z = norm.apply(series.values) if norm is not None else series.values
    windows = rolling_splits(z, cfg.t_in, cfg.t_pred, norm)
    scores = evaluate(model, windows, norm)
    scores["windows"] = len(windows)
    out = _output_dir(args, rc)
    write_json(out / "metrics_eval.json", scores)
    rp = _routing_path(args, out)
    if rp is not None:
        write_routing(rp, routing_rows(model, windows))
    print(json.dumps(scores, sort_keys=True))
    return EXIT_OK


def analyze_spectrum(values, experts: int = 3, logits=None, order: int = 7, scales: int = 16):
    """Band table and plot-ready curves for the differenced first channel."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[:, 0]
    if len(v) < 16:
        raise LengthError(f"spectrum analysis needs at least 16 points, got {len(v)}")
    dx = first_diff(v[:, None])[:, 0]
    n = len(dx)
    spec = WaveletSpec.cgau(order)
    grid = ScaleGrid.for_length(spec, n, scales)
    beta = normalize_boundaries(np.zeros(experts) if logits is None else logits).data
    masks = masks_from_beta(beta, n // 2 + 1, grid, spec)
    spectrum = rfft(dx)
    coeffs = cwt(dx, grid, spec)
    edges = np.concatenate([[0.0], beta, [1.0]])
    a = grid.array()
    bands = []
    for e in range(experts):
        sel = a[masks.wavelet[e] > 0]
        bands.append({
            "band_index": e, "f_lo": float(edges[e]), "f_hi": float(edges[e + 1]),
            "a_lo": float(sel.min()), "a_hi": float(sel.max()),
            "energy_dft": band_energy("fourier", spectrum, masks.fourier[e], n=n),
            "energy_cwt": band_energy("wavelet", coeffs, masks.wavelet[e], grid=grid),
        })
    freqs = np.arange(len(spectrum)) / max(len(spectrum) - 1, 1)
    scale_energy = (np.abs(coeffs) ** 2).sum(axis=-1)
    return bands, (freqs, np.abs(spectrum)), (a, grid.frequencies(spec), scale_energy)


def cmd_analyze_spectrum(args, rc: RunConfig) -> int:
    series = load_csv(_data_path(args, rc))
    logits = None
    if args.checkpoint:
        model, _ = load_model(args.checkpoint)
        logits = model.params["bands.logits"].data if "bands.logits" in model.params else None
    bands, (freqs, mag), (a, af, ae) = analyze_spectrum(series.values, rc.model.experts, logits,
                                                        rc.model.wavelet_order, rc.model.scales)
    out = _output_dir(args, rc)
    cols = ["band_index", "f_lo", "f_hi", "a_lo", "a_hi", "energy_dft", "energy_cwt"]
    rows = ["\t".join(cols)] + ["\t".join(repr(b[c]) for c in cols) for b in bands]
    (out / "bands.tsv").write_text("\n".join(rows) + "\n")
    (out / "spectrum.tsv").write_text("frequency\tmagnitude\n" + "".join(
        f"{f!r}\t{m!r}\n" for f, m in zip(freqs.tolist(), mag.tolist())))
    (out / "scales.tsv").write_text("scale\tfrequency\tenergy\n" + "".join(
        f"{s!r}\t{f!r}\t{e!r}\n" for s, f, e in zip(a.tolist(), af.tolist(), ae.tolist())))
    sys.stdout.write("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_oversample_report(args, rc: RunConfig) -> int:
    series = load_csv(_data_path(args, rc))
    d = rc.data
    values = series.values
    split = int(round(len(values) * (1 - d["test_fraction"])))
    gmm = gmm_fit(values[:split, 0], m=d["gmm_components"], seed=rc.train.seed)
    thresholds = extreme_thresholds(gmm)
    n_orig = len(make_windows(values[:split], rc.model.t_in, rc.model.t_pred, d["stride"])) - d["val_count"]
    _, report = oversample_starts(values[:, 0], thresholds, rc.model.t_in, rc.model.t_pred, max(n_orig, 0),
                                  d["cap_fraction"], seed=rc.train.seed, limit=split)
    obj = report.to_dict()
    out = _output_dir(args, rc)
    write_json(out / "oversample.json", obj)
    print(json.dumps(obj, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablation": cmd_ablation,
    "analyze-spectrum": cmd_analyze_spectrum,
    "oversample-report": cmd_oversample_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common_options(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = _Parser(add_help=False)
    common.add_argument("--config", default=d(None), help="INI configuration file")
    common.add_argument("--seed", type=int, default=d(None), help="override train.seed")
    common.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE", help="config override")
    common.add_argument("--output-dir", default=d(None), help="directory for written artifacts")
    common.add_argument("--dump-routing", nargs="?", const="", default=d(None), metavar="PATH",
                        help="write per-window routing weights as CSV")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="m2fmoe", description="Dual-view frequency mixture-of-experts forecaster",
                parents=[_common_options(False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[_common_options(True)])
        if name in ("train", "ablation", "evaluate", "predict", "analyze-spectrum", "oversample-report"):
            sp.add_argument("--input", help="input CSV (defaults to paths.data)")
        if name in ("predict", "evaluate", "analyze-spectrum"):
            sp.add_argument("--checkpoint", help="model checkpoint")
        if name == "predict":
            sp.add_argument("--horizon", type=int)
            sp.add_argument("--output", help="forecast CSV path (stdout when omitted)")
        if name == "ablation":
            sp.add_argument("--variant", required=True, help="one of: " + ", ".join(VARIANTS))
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        rc = load_run_config(args.config, args.set, args.seed)
        return COMMANDS[args.command](args, rc)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except M2FMoEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
