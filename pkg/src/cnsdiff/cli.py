"""Command-line entry point: ``cnsdiff <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Relative ``--data`` paths that do not exist are looked up under the directory
named by ``CNSDIFF_DATA_ROOT`` when that variable is set.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig
from .corpus import (DataError, Dataset, SplitBundle, SyntheticSpec, build_split, generate_synthetic,
                     load_interactions, popularity_buckets, read_exposure_csv)
from .encoder import load_checkpoint

DATA_ROOT_ENV = "CNSDIFF_DATA_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-4

logger = logging.getLogger("cnsdiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def data_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute() and not path.exists():
        return Path(root) / path
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _iso(ts: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ts))


@contextmanager
def run_lock(rundir: Path):
    """Exclusive ownership of ``rundir`` through an O_EXCL lock file."""
    rundir.mkdir(parents=True, exist_ok=True)
    lock = rundir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{rundir} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(rundir: Path, command: str, params: dict, started: float) -> Path:
    files = sorted(p for p in rundir.rglob("*") if p.is_file() and p.name not in (".lock", "manifest.json"))
    manifest = {
        "tool": "cnsdiff",
        "version": __version__,
        "command": command,
        "params": params,
        "started": _iso(started),
        "finished": _iso(time.time()),
        "files": [{"path": str(p.relative_to(rundir)), "sha256": sha256_file(p)} for p in files],
    }
    path = rundir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_config(path) -> TrainConfig:
    try:
        return TrainConfig.load(path)
    except TypeError as exc:
        raise ConfigError("<root>", str(exc)) from exc


def load_data(data: str, split: str | None = None):
    ds = Dataset.load(data_path(data))
    if split is None:
        return ds, None
    return ds, SplitBundle.load(data_path(split), ds)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    schema = json.loads(args.schema) if args.schema else None
    if schema is not None and not isinstance(schema, dict):
        raise UsageError("--schema must be a JSON object mapping user_id/item_id/timestamp/rating to columns")
    ds = load_interactions(data_path(args.input), schema, args.min_user, args.min_item, args.rating_threshold)
    ds.save(args.out)
    print(f"{len(ds)} interactions, {ds.num_users} users, {ds.num_items} items -> {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    ds = Dataset.load(data_path(args.data))
    exposure = read_exposure_csv(data_path(args.exposure_test)) if args.exposure_test else None
    if args.kind == "exposure" and exposure is None:
        raise UsageError("--kind exposure needs --exposure-test")
    bundle = build_split(ds, args.kind, ood_fraction=args.ood_fraction, seed=args.seed, exposure_test=exposure)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle.save(out)
    if exposure is not None:
        # the exposure log extends the dataset; keep the extended copy next to the split
        bundle.dataset.save(out.with_suffix(".data"))
        print(f"extended dataset written to {out.with_suffix('.data')}")
    print(json.dumps(bundle.counts()))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    except (TypeError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError("<spec>", str(exc)) from exc
    ds, gt = generate_synthetic(spec)
    out = Path(args.out)
    ds.save(out)
    gt.save(out / "ground_truth")
    print(f"{len(ds)} interactions; realized false-negative rate per env: {np.round(gt.eta_hat, 4).tolist()}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import fit

    config = load_config(args.config)
    ds, split = load_data(args.data, args.split)
    rundir = Path(args.out)
    started = time.time()
    with run_lock(rundir):
        report, model = fit(ds, split, config, out_dir=rundir)
        _write_envs(rundir / "envs.csv", model.env_model, ds)
        if len(split.test_ood):
            _write_grouped(rundir / "grouped.csv", _grouped_for(model, config, ds, split, "popularity:4",
                                                                epoch=report.best_epoch))
        write_manifest(rundir, "train", {"config": config.to_dict(), "data": args.data, "split": args.split,
                                         "split_params": {k: v for k, v in split.to_manifest().items()
                                                          if k not in ("indices",)}}, started)
    for name, block in report.final.items():
        print(name, json.dumps(block))
    return EXIT_OK


def _write_envs(path: Path, env_model, ds) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if env_model.item_env is not None:
            w.writerow(["item_id", "env_id"])
            w.writerows(zip(ds.item_ids, env_model.item_env.tolist()))
        else:
            w.writerow(["interaction", "env_id"])
            w.writerows(enumerate(env_model.interaction_env.tolist()))


def _item_groups(spec: str, ds, split) -> tuple[np.ndarray, int]:
    kind, _, num = spec.partition(":")
    try:
        B = int(num or 4)
    except ValueError:
        raise UsageError(f"bad --groups value {spec!r}; expected popularity:B or temporal:B") from None
    if kind == "popularity":
        return popularity_buckets(ds.subset_popularity(split.train), B), B
    if kind == "temporal":
        last = np.full(ds.num_items, -1.0)
        np.maximum.at(last, ds.items, ds.timestamps.astype(np.float64))
        # bucket 0 = most recently active items
        return popularity_buckets(last, B), B
    raise UsageError(f"unknown group kind {kind!r}")


def _write_grouped(path: Path, results) -> None:
    from .evaluation import grouped_rows

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "metric", "value", "support"])
        w.writerows(grouped_rows(results))


def _model_from_checkpoint(ckpt, ds, split, config: TrainConfig | None):
    from .trainer import build_model, load_model_into

    _, header, _ = load_checkpoint(ckpt)
    if config is None:
        config = TrainConfig.from_dict(header["config"])
    model = build_model(ds, split, config)
    load_model_into(ckpt, model)
    return model, config


def _grouped_for(model, config, ds, split, groups_spec, part="test_ood", epoch=0, with_fhns=True):
    from .evaluation import fhns_flags, grouped_report, pairs_matrix
    from .trainer import TrainData, negative_pass, nearest_items

    data = TrainData.from_split(ds, split)
    groups, B = _item_groups(groups_spec, ds, split)
    idx = getattr(split, part)
    gt = pairs_matrix(ds.users[idx], ds.items[idx], ds.num_users, ds.num_items)
    flags = neg_groups = None
    if with_fhns:
        vecs, users, _, Z = negative_pass(model, config, data, epoch)
        flags = fhns_flags(vecs, users, data.test_matrix, Z.item_table, config.fhns_threshold)
        neg_groups = groups[nearest_items(vecs, Z.item_table)]
    Z = model.propagated()
    return grouped_report(Z.user_table, Z.item_table, gt, data.train_matrix, groups, B,
                          negative_flags=flags, negative_groups=neg_groups)


def cmd_eval(args) -> int:
    from .trainer import checkpoint_precision, evaluate_part

    ds, split = load_data(args.data, args.split)
    config = load_config(args.config) if args.config else None
    model, config = _model_from_checkpoint(data_path(args.checkpoint), ds, split, config)
    rundir = Path(args.out)
    started = time.time()
    with run_lock(rundir):
        Z = checkpoint_precision(model)
        final = []
        for name, part in (("iid", "test_iid"), ("ood", "test_ood")):
            if len(getattr(split, part)):
                final.append({"split": name, **evaluate_part(Z, ds, split, part).as_dict()})
        (rundir / "metrics.json").write_text(json.dumps({"final": final}, indent=2, sort_keys=True),
                                             encoding="utf-8")
        results = _grouped_for(model, config, ds, split, args.groups, with_fhns=args.config is not None)
        _write_grouped(rundir / "grouped.csv", results)
        write_manifest(rundir, "eval", {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
                                        "groups": args.groups}, started)
    for block in final:
        print(json.dumps(block))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .trainer import TrainData, build_model, load_model_into, negative_pass
    from .evaluation import fhns_flags

    rundir = Path(args.run)
    manifest = json.loads((rundir / "manifest.json").read_text(encoding="utf-8"))
    params = manifest["params"]
    config = TrainConfig.from_dict(params["config"])
    ds, split = load_data(args.data or params["data"], args.split or params["split"])
    data = TrainData.from_split(ds, split)
    model = build_model(ds, split, config)
    ckpts = sorted((rundir / "checkpoints").glob("epoch_*.ckpt"))
    if not ckpts:
        raise RuntimeError(f"no checkpoint series under {rundir / 'checkpoints'}")
    rows = []
    for ck in ckpts:
        header = load_model_into(ck, model)
        epoch = int(header["epoch"])
        vecs, users, _, Z = negative_pass(model, config, data, epoch)
        ratio = float(fhns_flags(vecs, users, data.test_matrix, Z.item_table, config.fhns_threshold).mean())
        rows.append((epoch, ratio))
        print(f"epoch {epoch}: fhns_ratio {ratio:.6f}")
    with open(rundir / "fhns_diagnose.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "ratio"])
        w.writerows(rows)
    best = rundir / "checkpoints" / "best.ckpt"
    header = load_model_into(best if best.exists() else ckpts[-1], model)
    results = _grouped_for(model, config, ds, split, args.groups, epoch=int(header["epoch"]))
    _write_grouped(rundir / "grouped.csv", results)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .trainer import TINY_CONFIG, gradcheck

    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    config = TrainConfig.from_dict({**TINY_CONFIG, **overrides})
    worst = gradcheck(config)
    for name, err in worst.items():
        print(f"{name:12s} {err:.3e}")
    top = max(worst.values())
    print(f"max relative error {top:.3e}")
    return EXIT_OK if top < GRADCHECK_TOL else EXIT_RUNTIME


def parse_vary(text: str) -> dict[str, list]:
    """Parse ``"T=[10,20];lambda2=[1e-6,1e-3]"`` into {key: values}."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        key, sep, values = part.partition("=")
        if not sep:
            raise UsageError(f"bad --vary entry {part!r}; expected key=[v1,v2,...]")
        try:
            vals = json.loads(values)
        except json.JSONDecodeError:
            raise UsageError(f"bad value list for {key!r}: {values!r}") from None
        if not isinstance(vals, list) or not vals:
            raise UsageError(f"value list for {key!r} must be a non-empty JSON list")
        out[key.strip()] = vals
    return out


def cmd_grid(args) -> int:
    base = load_config(args.config).to_dict()
    vary = parse_vary(args.vary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(vary)
    written = 0
    for combo in itertools.product(*(vary[k] for k in keys)):
        cfg = TrainConfig.from_dict({**base, **dict(zip(keys, combo))})
        tag = "_".join(f"{k}-{v}" for k, v in zip(keys, combo))
        (out / f"config_{written:03d}_{tag}.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True),
                                                             encoding="utf-8")
        written += 1
    print(f"{written} configs -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cnsdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="read and filter a raw interaction CSV")
    s.add_argument("--input", required=True)
    s.add_argument("--schema", help="JSON column mapping, e.g. '{\"user_id\": \"uid\"}'")
    s.add_argument("--min-user", type=int, default=0)
    s.add_argument("--min-item", type=int, default=0)
    s.add_argument("--rating-threshold", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", help="build an OOD split")
    s.add_argument("--data", required=True)
    s.add_argument("--kind", required=True, choices=("popularity", "temporal", "exposure"))
    s.add_argument("--ood-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--exposure-test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("synth", help="generate a confounded synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model and write a run directory")
    s.add_argument("--data", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint with grouped reports")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--groups", default="popularity:4")
    s.add_argument("--config", help="run config; enables per-group false-hard-negative ratios")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("diagnose", help="recompute FHNS curves and grouped reports for a run")
    s.add_argument("--run", required=True)
    s.add_argument("--groups", default="popularity:4")
    s.add_argument("--data")
    s.add_argument("--split")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    s.add_argument("--config", help="JSON overrides for the tiny gradcheck config")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("grid", help="expand a hyperparameter grid into config files")
    s.add_argument("--config", required=True)
    s.add_argument("--vary", required=True)
    s.add_argument("--out", default="grid")
    s.set_defaults(func=cmd_grid)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"cnsdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"cnsdiff: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"cnsdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"cnsdiff: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
