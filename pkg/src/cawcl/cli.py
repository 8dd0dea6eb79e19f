"""Command-line entry point: data generation, training, evaluation, ablation
grids and embedding export.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, TrainConfig, load_train_config, parse_overrides, read_kv_file
from .datagen import (BadConfig, DataError, Dataset, GenConfig, content_hash, generate,
                      load_dataset, preset, save_dataset)
from .diffcore import NonFiniteLoss, normalize_rows
from .evaluation import CSV_HEADER, retrieval_report
from .model import DimMismatch, load_checkpoint, save_checkpoint
from .pseudo import OUTLIER, ClusterParams, assign_pseudo_labels
from .trainer import (AblationSuite, Trainer, ablation_csv, build_samples,
                      run_ablation, summarize, tracklet_reps)

log = logging.getLogger("cawcl")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


def _gen_config(values: dict[str, str]) -> GenConfig:
    name = values.pop("preset", "default")
    kinds = {f.name: f.type for f in dataclasses.fields(GenConfig)}
    unknown = sorted(set(values) - set(kinds))
    if unknown:
        raise ConfigError(f"unknown generator keys: {', '.join(unknown)}")
    parsed = {}
    for k, v in values.items():
        try:
            parsed[k] = int(v) if kinds[k] in (int, "int") else float(v)
        except ValueError:
            raise ConfigError(f"bad value for {k}: {v!r}") from None
    try:
        return preset(name, **parsed)
    except BadConfig as exc:
        raise ConfigError(str(exc)) from None


def _load_data(path: str) -> tuple[Dataset, str]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset file not found: {p}")
    return load_dataset(p), content_hash(p)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    values = parse_overrides(args.set)
    values["preset"] = args.preset
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = _gen_config(values)
    out = Path(args.out)
    save_dataset(generate(cfg), out)
    print(f"wrote {out} ({content_hash(out)[:12]})")
    return 0


def cmd_train(args) -> int:
    cfg = load_train_config(args.config, parse_overrides(args.set))
    data, data_hash = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, data)
    lines = [CSV_HEADER]

    def on_report(r):
        lines.append(r.csv_row())
        log.info("epoch %d rank1 %.3f mAP %.3f probe %.3f", r.epoch, r.rank1, r.mAP,
                 r.camera_probe_accuracy)

    trainer.fit(on_report)
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    save_checkpoint(trainer.model, out / "model.ckpt")
    _write_json(out / "manifest.json", {
        "command": "train",
        "config": cfg.to_text(),
        "seed": cfg.seed,
        "dataset": str(Path(args.data)),
        "dataset_sha256": data_hash,
        "checkpoint_sha256": content_hash(out / "model.ckpt"),
        "metrics_sha256": content_hash(out / "metrics.csv"),
    })
    print(lines[-1])
    return 0


def _target_reps(args):
    cfg = load_train_config(args.config, parse_overrides(args.set))
    data, _ = _load_data(args.data)
    model = load_checkpoint(args.checkpoint)
    if model.encoder.d_in != data.d_in:
        raise DimMismatch(f"checkpoint expects d_in={model.encoder.d_in}, data has {data.d_in}")
    return cfg, data, model


def cmd_eval(args) -> int:
    cfg, data, model = _target_reps(args)
    tgt = data.target
    reps = tracklet_reps(model, build_samples(tgt, cfg.n_clips), len(tgt))
    report = retrieval_report(reps, [t.person_id for t in tgt], [t.camera for t in tgt])
    text = CSV_HEADER + "\n" + report.csv_row() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def embedding_table(cfg: TrainConfig, data: Dataset, model) -> str:
    """Tab-separated normalised tracklet representations with pseudo-labels.

    Target rows carry the cluster id from the configured clustering (-1 for
    outliers); source rows always carry -1.
    """
    rows = []
    labels = {}
    tgt = data.target
    if tgt:
        reps = normalize_rows(tracklet_reps(model, build_samples(tgt, cfg.n_clips), len(tgt)))
        params = ClusterParams(cfg.cluster_k, cfg.cluster_eps, cfg.min_pts)
        assignment = assign_pseudo_labels(reps, params)
        for t, r, lab in zip(tgt, reps, assignment.labels):
            labels[t.tracklet_id] = (int(lab), r)
    src = data.source
    if src:
        reps = normalize_rows(tracklet_reps(model, build_samples(src, cfg.n_clips), len(src)))
        for t, r in zip(src, reps):
            labels[t.tracklet_id] = (OUTLIER, r)
    feat = model.feat_dim
    header = ["tracklet_id", "person_id", "camera", "domain", "pseudo_label"]
    header += [f"f{i}" for i in range(feat)]
    rows.append("\t".join(header))
    for t in data.tracklets:
        lab, r = labels[t.tracklet_id]
        vals = [str(t.tracklet_id), str(t.person_id), str(t.camera), t.domain, str(lab)]
        vals += [repr(float(v)) for v in r]
        rows.append("\t".join(vals))
    return "\n".join(rows) + "\n"


def cmd_export(args) -> int:
    cfg, data, model = _target_reps(args)
    Path(args.out).write_text(embedding_table(cfg, data, model))
    print(f"wrote {args.out} ({len(data)} rows)")
    return 0


# ---------------------------------------------------------------- ablation
#
# Suite file, flat key = value:
#   grid.<train key> = v1,v2,...     one axis per line, crossed
#   seeds = 0,1,2
#   gen.<generator key> = value      (or gen.preset = name)
#   data = path                      fixed dataset instead of per-seed generation
#   any other key                    base training config


def load_suite(path: str | Path, overrides: dict[str, str] | None = None) -> tuple[AblationSuite, str | None]:
    values = read_kv_file(path)
    values.update(overrides or {})
    grid, gen, base = [], {}, {}
    seeds: tuple[int, ...] = (0,)
    data_path = None
    for k, v in values.items():
        if k.startswith("grid."):
            grid.append((k[5:], tuple(x.strip() for x in v.split(",") if x.strip())))
        elif k.startswith("gen."):
            gen[k[4:]] = v
        elif k == "seeds":
            try:
                seeds = tuple(int(x) for x in v.split(",") if x.strip())
            except ValueError:
                raise ConfigError(f"bad seeds: {v!r}") from None
        elif k == "data":
            data_path = v
        else:
            base[k] = v
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for name, vals in grid:
        if name not in known:
            raise ConfigError(f"unknown grid key: {name}")
        if not vals:
            raise ConfigError(f"grid axis {name} has no values")
        for val in vals:
            TrainConfig.from_mapping({name: val})
    dataset = None
    if data_path is not None:
        dataset, _ = _load_data(data_path)
    suite = AblationSuite(TrainConfig.from_mapping(base), tuple(grid), seeds, _gen_config(gen), dataset)
    return suite, data_path


def cell_hash(suite: AblationSuite, cell: dict, seed: int, data_hash: str | None) -> str:
    cfg = TrainConfig.from_mapping({**cell, "seed": str(seed)}, suite.base)
    source = data_hash or json.dumps(dataclasses.asdict(dataclasses.replace(suite.gen, seed=seed)),
                                     sort_keys=True)
    return hashlib.sha256((cfg.to_text() + "\n" + source).encode()).hexdigest()


def cmd_ablate(args) -> int:
    suite, data_path = load_suite(args.suite, parse_overrides(args.set))
    data_hash = content_hash(data_path) if data_path else None
    keys = [k for k, _ in suite.grid]
    out = Path(args.out)
    manifest_path = out.with_name(out.name + ".manifest.json")
    done: dict[str, dict] = {}
    if args.resume and manifest_path.is_file():
        done = json.loads(manifest_path.read_text()).get("rows", {})

    def skip(cell, seed):
        row = done.get(cell_hash(suite, cell, seed, data_hash))
        if row is not None:
            log.info("skip %s seed %d (cached)", cell, seed)
        return row

    def on_row(row):
        cell = {k: row[k] for k in keys}
        done[cell_hash(suite, cell, row["seed"], data_hash)] = row
        _write_json(manifest_path, {"command": "ablate", "suite": Path(args.suite).read_text(),
                                    "rows": done})

    rows = run_ablation(suite, skip, on_row)
    table = ablation_csv(rows + summarize(rows, keys), keys)
    out.write_text(table)
    sys.stdout.write(table)
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cawcl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_set(sp):
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        return sp

    g = with_set(sub.add_parser("gen-data", help="write a synthetic tracklet dataset"))
    g.add_argument("--out", required=True)
    g.add_argument("--preset", default="default")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = with_set(sub.add_parser("train", help="train and write metrics, checkpoint, manifest"))
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = with_set(sub.add_parser("eval", help="target retrieval metrics of a checkpoint"))
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = with_set(sub.add_parser("ablate", help="run an ablation grid"))
    a.add_argument("--suite", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--resume", action="store_true", help="skip cells already in the manifest")
    a.set_defaults(func=cmd_ablate)

    x = with_set(sub.add_parser("export-embeddings", help="write tracklet embeddings as TSV"))
    x.add_argument("--config")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimMismatch) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLoss as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
