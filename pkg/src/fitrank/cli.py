"""``fit`` command-line entry point.

Every workflow reads one flat ``key = value`` file (``#`` starts a comment)
whose keys are the :class:`TrainConfig` fields plus the run keys in
:data:`RUN_DEFAULTS`.  Any key can also be given as a ``--key value`` flag,
which overrides the file.  Each run directory receives ``config.cfg`` (the
effective configuration), ``metrics.tsv`` (``key<TAB>value`` lines) and,
for training runs, ``epochs.tsv`` and ``model.fitc``.

Exit codes: 0 success, 1 user error (bad flag, bad config, missing input),
2 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import statistics
import sys
import time
import traceback
from pathlib import Path

from . import kernels
from .config import VARIANTS, TrainConfig, variant
from .data import (DataError, ExampleSet, build_examples, load_movielens, read_examples, split_and_batch,
                   synthetic_planted, write_examples)
from .model import CheckpointError, load_checkpoint
from .training import EvalReport, evaluate, rela_impr, train

log = logging.getLogger("fitrank")

COMMANDS = ("train", "eval", "precompute", "bench", "ablate")
ABLATION_VARIANTS = ("fit", "wo_mqm", "wo_lss", "summax", "flatten_fc")
BASELINE = "two_tower"

# keys that are not model hyper-parameters
RUN_DEFAULTS = {
    "dataset": "movielens",  # movielens | synthetic | cache
    "data_dir": "",  # empty -> $FIT_DATA_DIR
    "cache": "",  # example cache file (dataset=cache) or cache to write
    "max_len": 50,
    "prefixes_per_user": 1,
    "val_frac": 0.2,
    "test_frac": 0.1,
    "split_seed": 0,
    "synthetic_users": 32000,
    "synthetic_items": 5120,
    "synthetic_clusters": 1024,
    "synthetic_seq_len": 50,
    "synthetic_majority": 4,
    "synthetic_hard_negative_frac": 0.0,
    "synthetic_pairs_per_user": 1,
    "run_dir": "runs/latest",
    "name": "",
    "variant": "fit",
    "variants": ",".join(ABLATION_VARIANTS),
    "seeds": "",  # ablate: comma list; each seed sets both the model seed and split_seed
    "checkpoint": "",
    "store": "",
    "candidates": 2000,
    "repetitions": 7,
    "bench_seq_len": 50,
    "max_steps": 0,
}

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name not in ("extra",)}
_VOCAB = {"n_users", "n_items", "n_categories"}


class UserError(Exception):
    """Bad input from the command line or a config file (exit code 1)."""


class ReportError(ValueError):
    """A run directory without usable metrics (exit code 2)."""


# --------------------------------------------------------------------------
# configuration


def _coerce(key: str, raw, like):
    if isinstance(like, bool):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UserError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            text = str(raw).strip().strip("()[]")
            return tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError as exc:
        raise UserError(f"{key}: cannot parse {raw!r} ({exc})") from None
    return str(raw).strip()


def _defaults() -> dict:
    base = TrainConfig()
    out = {k: getattr(base, k) for k in _CONFIG_FIELDS}
    out.update(RUN_DEFAULTS)
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; unknown keys are an error."""
    defaults = _defaults()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise UserError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, defaults[key])
    return values


def render_config(values: dict) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def effective_config(config_path: str | None, overrides: dict) -> dict:
    values = _defaults()
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UserError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    defaults = _defaults()
    for key, raw in overrides.items():
        values[key] = _coerce(key, raw, defaults[key])
    if not values["data_dir"]:
        values["data_dir"] = os.environ.get("FIT_DATA_DIR", "")
    return values


def train_config(values: dict, ex: ExampleSet | None = None) -> TrainConfig:
    kw = {k: values[k] for k in _CONFIG_FIELDS}
    if ex is not None:
        kw.update(n_users=ex.n_users, n_items=ex.n_items, n_categories=ex.n_categories)
    try:
        return variant(TrainConfig(**kw), values["variant"])
    except ValueError as exc:
        raise UserError(str(exc)) from None


# --------------------------------------------------------------------------
# data


def load_examples(values: dict) -> ExampleSet:
    kind = values["dataset"]
    if kind == "synthetic":
        ex, _ = synthetic_planted(values["split_seed"], values["synthetic_users"], values["synthetic_items"],
                                  values["synthetic_clusters"], seq_len=values["synthetic_seq_len"],
                                  majority=values["synthetic_majority"],
                                  hard_negative_frac=values["synthetic_hard_negative_frac"],
                                  pairs_per_user=values["synthetic_pairs_per_user"])
        return ex
    if kind == "cache":
        if not values["cache"]:
            raise UserError("dataset = cache needs cache = <path>")
        return read_examples(values["cache"])
    if kind != "movielens":
        raise UserError(f"dataset must be movielens, synthetic or cache, got {kind!r}")
    if not values["data_dir"]:
        raise UserError("no dataset directory: set data_dir or FIT_DATA_DIR")
    root = Path(values["data_dir"])
    if not root.is_dir():
        raise UserError(f"dataset directory not found: {root}")
    ex = build_examples(load_movielens(root), values["max_len"], values["split_seed"],
                        values["prefixes_per_user"])
    if values["cache"]:
        write_examples(values["cache"], ex)
    return ex


def split(values: dict, ex: ExampleSet):
    return split_and_batch(ex, batch=values["batch_size"], val_frac=values["val_frac"],
                           rng_seed=values["split_seed"], test_frac=values["test_frac"])


# --------------------------------------------------------------------------
# metrics files


def write_metrics(path: Path, metrics: dict) -> None:
    with open(path, "w") as fh:
        for k, v in metrics.items():
            fh.write(f"{k}\t{v:.6f}\n" if isinstance(v, float) else f"{k}\t{v}\n")


def read_metrics(path: Path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected key<TAB>value")
        out[parts[0]] = parts[1]
    return out


def write_table(path: Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join("" if r[c] is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]))
                               for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def report_metrics(name: str, report: EvalReport, extra: dict | None = None) -> dict:
    m = {"model": name, "auc": report.auc, "logloss": report.logloss, "n_examples": report.n_examples}
    if report.qs is not None:
        m["qs_median"] = report.qs
    m.update(extra or {})
    return m


# --------------------------------------------------------------------------
# workflows


def run_train(values: dict, ex: ExampleSet | None = None, data=None) -> Path:
    run_dir = Path(values["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    ex = load_examples(values) if ex is None else ex
    data = split(values, ex) if data is None else data
    cfg = train_config(values, ex)
    (run_dir / "config.cfg").write_text(render_config(values))
    t0 = time.perf_counter()
    result = train(cfg, data, max_steps=values["max_steps"] or None)
    seconds = time.perf_counter() - t0
    name = values["name"] or values["variant"]
    result.model.save(run_dir / "model.fitc", meta={"name": name, "seed": cfg.seed})
    write_table(run_dir / "epochs.tsv", result.history_rows())
    (run_dir / "losses.tsv").write_text("step\tloss\n" + "".join(f"{i}\t{v:.7g}\n" for i, v in enumerate(result.losses)))
    report = evaluate(result.model, data.test)
    write_metrics(run_dir / "metrics.tsv", report_metrics(name, report, {
        "seed": cfg.seed, "best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc,
        "steps": result.steps, "train_seconds": seconds}))
    print(f"{name}\tauc {report.auc:.4f}\tlogloss {report.logloss:.4f}\t-> {run_dir}")
    return run_dir


def _checkpoint(values: dict) -> Path:
    path = Path(values["checkpoint"] or Path(values["run_dir"]) / "model.fitc")
    if not path.is_file():
        raise UserError(f"checkpoint not found: {path}")
    return path


def run_eval(values: dict) -> Path:
    run_dir = Path(values["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    model, meta = load_checkpoint(_checkpoint(values))
    ex = load_examples(values)
    cfg = model.config
    if (ex.n_users, ex.n_items, ex.n_categories) != (cfg.n_users, cfg.n_items, cfg.n_categories):
        raise UserError("dataset vocabulary does not match the checkpoint")
    report = evaluate(model, split(values, ex).test)
    name = values["name"] or meta.get("name", "model")
    write_metrics(run_dir / "eval_metrics.tsv", report_metrics(name, report))
    print(f"{name}\tauc {report.auc:.4f}\tlogloss {report.logloss:.4f}")
    return run_dir


def run_precompute(values: dict) -> Path:
    from .serving import catalog_of, precompute_store

    model, _ = load_checkpoint(_checkpoint(values))
    ex = load_examples(values)
    if len(ex.item_category) != model.config.n_items + 1:
        raise UserError("catalog size does not match the checkpoint")
    out = Path(values["store"] or Path(values["run_dir"]) / "items.fits")
    out.parent.mkdir(parents=True, exist_ok=True)
    items, cats = catalog_of(ex.item_category)
    precompute_store(model, items, cats, out)
    print(f"wrote {len(items)} items -> {out}")
    return out


def run_bench(values: dict) -> Path:
    from .serving import ItemStore, catalog_of, latency_bench, precompute_store

    run_dir = Path(values["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    if values["checkpoint"] or (run_dir / "model.fitc").is_file():
        model, _ = load_checkpoint(_checkpoint(values))
        item_category = load_examples(values).item_category
    else:
        # untrained model on a synthetic catalog: latency does not depend on the weights
        from .model import FITModel

        ex, _ = synthetic_planted(0, 8, values["synthetic_items"], values["synthetic_clusters"])
        model = FITModel(train_config(values, ex))
        item_category = ex.item_category
    store_path = Path(values["store"] or run_dir / "items.fits")
    if not store_path.is_file():
        precompute_store(model, *catalog_of(item_category), store_path)
    report = latency_bench(ItemStore(store_path), model, values["candidates"], values["repetitions"],
                           seq_len=values["bench_seq_len"], item_category=item_category)
    text = "\n".join(report.lines()) + "\n"
    (run_dir / "bench.tsv").write_text(text)
    sys.stdout.write(text)
    return run_dir


def _median_metrics(name: str, dirs: list[Path], seeds: list[int]) -> dict:
    per = [read_metrics(d / "metrics.tsv") for d in dirs]
    out = {"model": name}
    for key in ("auc", "logloss"):
        out[key] = float(statistics.median(float(m[key]) for m in per))
    out["seeds"] = ",".join(str(s) for s in seeds)
    out["per_seed_auc"] = ",".join(m["auc"] for m in per)
    return out


def run_ablate(values: dict) -> Path:
    """One training run per variant (plus the two-tower base) and a comparison table.

    With several ``seeds`` every variant is trained once per seed under
    ``<variant>/seed<k>`` and the variant directory holds the median metrics.
    """
    root = Path(values["run_dir"])
    root.mkdir(parents=True, exist_ok=True)
    names = [v.strip() for v in str(values["variants"]).split(",") if v.strip()]
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise UserError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    if BASELINE not in names:
        names.append(BASELINE)
    try:
        seeds = [int(x) for x in str(values["seeds"]).split(",") if x.strip()]
    except ValueError:
        raise UserError(f"seeds must be a comma-separated list of integers, got {values['seeds']!r}") from None
    dirs = []
    if not seeds:
        ex = load_examples(values)
        data = split(values, ex)
        for name in names:
            sub = dict(values, variant=name, name=name, run_dir=str(root / name))
            dirs.append(run_train(sub, ex, data))
    else:
        per_variant = {name: [] for name in names}
        for seed in seeds:
            seeded = dict(values, seed=seed, split_seed=seed)
            ex = load_examples(seeded)
            data = split(seeded, ex)
            for name in names:
                sub = dict(seeded, variant=name, name=name, run_dir=str(root / name / f"seed{seed}"))
                per_variant[name].append(run_train(sub, ex, data))
        for name in names:
            write_metrics(root / name / "metrics.tsv", _median_metrics(name, per_variant[name], seeds))
            dirs.append(root / name)
    table, rows = emit_report(dirs)
    (root / "report.txt").write_text(table)
    write_table(root / "report.tsv", rows)
    sys.stdout.write(table)
    return root


def emit_report(run_dirs) -> tuple[str, list[dict]]:
    """Comparison table over finished runs; RelaImpr is relative to the two-tower run if present.

    Returns the rendered text and the rows as dicts.  A missing or
    malformed metrics file raises ReportError naming the path.
    """
    runs = []
    for d in run_dirs:
        path = Path(d) / "metrics.tsv"
        if not path.is_file():
            raise ReportError(f"missing metrics file: {path}")
        try:
            m = read_metrics(path)
            runs.append((m.get("model", Path(d).name), float(m["auc"]), float(m["logloss"])))
        except (KeyError, ValueError) as exc:
            raise ReportError(f"malformed metrics file {path}: {exc}") from None
    if not runs:
        raise ReportError("emit_report needs at least one run")
    base_name, base_auc = next(((n, a) for n, a, _ in runs if n == BASELINE), (runs[0][0], runs[0][1]))
    rows = []
    for name, a, ll in runs:
        ri = 0.0 if name == base_name else rela_impr(a, base_auc)
        rows.append({"model": name, "auc": a, "logloss": ll, "rela_impr_pct": ri})
    width = max(len(r["model"]) for r in rows + [{"model": "model"}])
    lines = [f"{'model':<{width}}  {'AUC':>7}  {'Logloss':>8}  {'RelaImpr':>9}",
             f"{'-' * width}  {'-' * 7}  {'-' * 8}  {'-' * 9}"]
    for r in rows:
        lines.append(f"{r['model']:<{width}}  {r['auc']:7.4f}  {r['logloss']:8.4f}  {r['rela_impr_pct']:8.2f}%")
    lines.append(f"(RelaImpr relative to {base_name})")
    return "\n".join(lines) + "\n", rows


WORKFLOWS = {"train": run_train, "eval": run_eval, "precompute": run_precompute,
             "bench": run_bench, "ablate": run_ablate}


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{message}\n\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fit", description="FIT pre-ranking model workflows")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"{name} workflow")
        p.add_argument("--config", help="flat key = value configuration file")
        for key, default in _defaults().items():
            if key in _VOCAB:
                continue
            p.add_argument(f"--{key}", dest=f"opt_{key}", metavar=type(default).__name__.upper(),
                           default=None)
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UserError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt_") and v is not None}
        values = effective_config(args.config, overrides)
        log.info("kernel backend: %s", kernels.BACKEND)
        WORKFLOWS[args.command](values)
        return 0
    except ReportError as exc:
        print(f"fit: error: {exc}", file=sys.stderr)
        return 2
    except (UserError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"fit: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # invalid hyper-parameters surface from TrainConfig.validate
        print(f"fit: error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return 2


def report_main(argv: list[str] | None = None) -> int:
    """``fit-report RUN_DIR...``: print the comparison table of finished runs."""
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        print("usage: fit-report RUN_DIR [RUN_DIR ...]", file=sys.stderr)
        return 1
    try:
        table, _ = emit_report(argv)
    except ReportError as exc:
        print(f"fit-report: error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(table)
    return 0


def report_main_entry() -> None:
    sys.exit(report_main())


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
