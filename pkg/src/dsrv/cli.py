"""Command-line entry point: ``dsrv <subcommand> ...``.

Exit codes are 0 on success, 1 for invalid input and 2 when a computation
(training, model fitting) fails.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence


from . import cae, dsp, evalmetrics as em, heurfeat, pipeline as pl, retrieval
from . import tensornet as tn
from .dataio import (DRUM_TYPES, SOUND_TYPES, SynthSpec, ValidationError, VIPS_COUNTS, load_manifest,
                     load_ratings, read_wav, synth_dataset)

log = logging.getLogger("dsrv")

RUNTIME_ERRORS = (cae.TrainingError, em.FitError, em.DegenerateError, RuntimeError)
INPUT_ERRORS = (ValidationError, cae.UsageError, cae.ConfigError, ValueError, KeyError,
                FileNotFoundError, configparser.Error)


# ---------------------------------------------------------------------------
# Experiment config

SCHEDULE_KEYS = {f.name: f.type for f in fields(tn.TrainSchedule)}


def _resolve(base: Path, value: str) -> Path:
    p = Path(value).expanduser()
    return p if p.is_absolute() else base / p


def _coerce(value: str, kind):
    kind = str(kind)
    if "bool" in kind:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if "int" in kind and "float" not in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return value


def read_experiment(path) -> dict:
    """Parse an INI experiment file into manifest, output dir, seeds, schedule and models.

    ``[experiment]`` holds manifest, out, seeds, batch_size and cache;
    ``[schedule]`` overrides TrainSchedule fields; each ``[model NAME]``
    section names a preset (``arch``) plus ModelConfig overrides.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config {path} not found")
    cp = configparser.ConfigParser()
    cp.read(path)
    base = path.parent
    if not cp.has_section("experiment"):
        raise ValidationError(f"{path}: missing [experiment] section")
    exp = cp["experiment"]
    for key in ("manifest", "out"):
        if key not in exp:
            raise ValidationError(f"{path}: [experiment] needs {key}")
    seeds = [int(s) for s in exp.get("seeds", "0,1,2,3,4").split(",") if s.strip()]
    if not seeds:
        raise ValidationError(f"{path}: seeds must list at least one seed")
    sched = {}
    if cp.has_section("schedule"):
        for key, value in cp["schedule"].items():
            if key not in SCHEDULE_KEYS:
                raise ValidationError(f"{path}: unknown schedule key {key!r}")
            sched[key] = _coerce(value, SCHEDULE_KEYS[key])
    models = {}
    cfg_fields = {f.name: f.type for f in fields(cae.ModelConfig)}
    for section in cp.sections():
        if not section.startswith("model "):
            continue
        name = section[len("model "):].strip()
        items = dict(cp[section])
        arch = items.pop("arch", "cae")
        overrides = {}
        for key, value in items.items():
            if key not in cfg_fields:
                raise ValidationError(f"{path}: [{section}] unknown key {key!r}")
            if key == "filters":
                overrides[key] = tuple(int(v) for v in value.split(","))
            elif key == "hidden":
                overrides[key] = None if value.strip().lower() == "none" else int(value)
            else:
                overrides[key] = _coerce(value, cfg_fields[key])
        cfg = cae.ModelConfig.preset(arch, **overrides)
        cfg.validate()
        models[name] = cfg
    if not models:
        raise ValidationError(f"{path}: no [model NAME] sections")
    return {
        "manifest": _resolve(base, exp["manifest"]),
        "out": _resolve(base, exp["out"]),
        "cache": _resolve(base, exp["cache"]) if exp.get("cache") else None,
        "seeds": seeds,
        "batch_size": exp.getint("batch_size", 64),
        "schedule": tn.TrainSchedule(**sched),
        "models": models,
    }


def _train_one(job):
    name, cfg_dict, seed, manifest_path, cache, schedule, batch_size, out = job
    import torch
    torch.set_num_threads(1)
    cfg = cae.ModelConfig.from_dict(cfg_dict)
    manifest = load_manifest(manifest_path)
    data, norm = pl.training_data(manifest, cfg.conditioning, cache)
    model = cae.build_model(cfg, seed=seed)
    trained = cae.train(model, data, schedule, seed, norm, batch_size=batch_size)
    target = Path(out) / name
    target.mkdir(parents=True, exist_ok=True)
    cae.save_trained(target / f"seed{seed}.ckpt", trained)
    (target / f"seed{seed}.history.json").write_text(
        json.dumps([asdict(r) for r in trained.history], indent=2) + "\n")
    return name, seed, trained.best_val, len(trained.history)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth_data(args) -> int:
    spec = SynthSpec(n_per_class=args.per_class, imitators=args.imitators, seed=args.seed,
                     counts=VIPS_COUNTS if args.vips else None, mode=args.mode)
    manifest = synth_dataset(spec, args.out)
    print(f"wrote {len(manifest)} records to {Path(args.out) / 'manifest.csv'}")
    return 0


def cmd_preprocess(args) -> int:
    manifest = load_manifest(args.manifest)
    out = pl.preprocess_manifest(manifest, args.out, augment_fold=args.augment, seed=args.seed, jobs=args.jobs)
    print(f"wrote {len(out)} records to {Path(args.out) / 'manifest.csv'}")
    return 0


def _records(manifest, split):
    return manifest.subset(split) if split else list(manifest.records)


def cmd_features(args) -> int:
    manifest = load_manifest(args.manifest)
    vectors = pl.heuristic_vectors(_records(manifest, args.split), jobs=args.jobs)
    heurfeat.write_features_csv(args.out, vectors)
    print(f"wrote {len(vectors)} feature vectors to {args.out}")
    return 0


def cmd_train(args) -> int:
    exp = read_experiment(args.config)
    if not exp["manifest"].exists():
        raise FileNotFoundError(f"manifest {exp['manifest']} not found")
    cache = exp["cache"] or pl.cache_dir() or exp["out"] / "spectrograms"
    # fill the spectrogram cache once so workers only read it
    manifest = load_manifest(exp["manifest"])
    pl.spectrograms(manifest.subset("train") + manifest.subset("validation"), cache, args.jobs)
    jobs = [(name, cfg.to_dict(), seed, exp["manifest"], cache, exp["schedule"], exp["batch_size"], exp["out"])
            for name, cfg in exp["models"].items() for seed in exp["seeds"]]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    for name, seed, best, epochs in results:
        print(f"{name} seed {seed}: best val {best:.6g} after {epochs} epochs")
    return 0


def _labels(args, trained):
    if trained.config.label_size == 0:
        return {}
    if args.label_mode == "flag":
        if not args.drum_type:
            raise cae.UsageError("--label-mode flag needs --drum-type")
        return {"sound_type": args.sound_type, "drum_type": args.drum_type}
    return {}


def cmd_embed(args) -> int:
    trained = cae.load_trained(args.checkpoint)
    manifest = load_manifest(args.manifest)
    records = _records(manifest, args.split)
    vectors = pl.embed_records(trained, records, pl.cache_dir(args.cache), args.jobs,
                               **_labels(args, trained))
    heurfeat.write_features_csv(args.out, vectors)
    print(f"wrote {len(vectors)} embeddings to {args.out}")
    return 0


def _embedding_set(path, manifest):
    return em.EmbeddingSet.from_vectors(heurfeat.read_features_csv(path), manifest)


def screen_ratings(ratings, min_rho: float):
    """Apply the duplicate-trial reliability filter when duplicates exist."""
    keep = em.reliable_listeners(ratings, min_rho)
    if not keep:
        return ratings, "reliability filter skipped: no listener passed or no duplicated trials"
    dropped = len(ratings.listeners()) - len(keep)
    return ratings.filter_listeners(keep), f"reliability filter kept {len(keep)} listeners, dropped {dropped}"


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    sets = [_embedding_set(p, manifest) for p in args.embeddings]
    ratings, notes = None, []
    if args.ratings:
        ratings = load_ratings(args.ratings)
        if args.min_rho is not None:
            ratings, note = screen_ratings(ratings, args.min_rho)
            notes.append(note)
    report = pl.evaluate(sets, ratings, n_perm=args.n_perm, n_runs=args.runs, seed=args.seed,
                         within_class=args.within_class)
    report.notes = notes + report.notes
    report.write(args.out)
    summary = report.to_json()
    print(f"mrr {summary['mrr']:.2f} mss {summary['mss']:.2f}"
          + ("" if summary["accuracy"] is None else f" accuracy {summary['accuracy']:.2f} aic {summary['aic']:.2f}"))
    return 0


def write_heatmap(prefix, result: em.MSSResult, title: str = "") -> tuple[Path, Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_name(prefix.name + ".csv")
    svg_path = prefix.with_name(prefix.name + ".svg")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["feature", *result.imitators])
        for name, row in zip(result.features, result.pvals):
            writer.writerow([name, *(repr(float(p)) for p in row)])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "dsrv"

    fig, ax = plt.subplots(figsize=(3.0 + 0.45 * len(result.imitators), 1.5 + 0.25 * len(result.features)))
    im = ax.imshow(result.pvals, cmap="viridis_r", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(len(result.imitators)), result.imitators, rotation=90, fontsize=7)
    ax.set_yticks(range(len(result.features)), result.features, fontsize=7)
    ax.set_xlabel("imitator")
    ax.set_ylabel("feature")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, label="Mantel p-value")
    fig.tight_layout()
    # fixed metadata keeps the SVG byte-identical across runs
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return csv_path, svg_path


def cmd_heatmap(args) -> int:
    manifest = load_manifest(args.manifest)
    emb = _embedding_set(args.embeddings, manifest)
    result = em.mss(emb, n_runs=args.runs, n_perm=args.n_perm, seed=args.seed)
    csv_path, svg_path = write_heatmap(args.out, result, title=Path(args.embeddings).stem)
    print(f"mss {result.mss:.2f}; wrote {csv_path} and {svg_path}")
    return 0


def cmd_index(args) -> int:
    manifest = load_manifest(args.manifest)
    idx = retrieval.build_index(_embedding_set(args.embeddings, manifest))
    retrieval.save_index(args.out, idx)
    print(f"indexed {len(idx)} drums into {args.out}")
    return 0


def cmd_query(args) -> int:
    idx = retrieval.load_index(args.index)
    trained = cae.load_trained(args.model)
    label = None
    if trained.config.label_size:
        if not args.drum_type:
            raise cae.UsageError(f"{trained.config.conditioning} model needs --drum-type")
        label = cae.condition_label(trained.config.conditioning, "imitation", args.drum_type)
    spec = dsp.preprocess(read_wav(args.wav))
    if spec is None:
        raise ValidationError(f"{args.wav}: no audio above the silence threshold")
    vec = cae.embed(trained, spec.values, label, Path(args.wav).stem)
    hits = retrieval.query(idx, vec.values, args.k, args.drum_type if args.within_class else None)
    for rank, (sid, dist) in enumerate(hits, 1):
        print(f"{rank}\t{sid}\t{dist:.6f}")
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsrv", description="Drum sample retrieval by vocal imitation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def jobs(sp):
        sp.add_argument("--jobs", type=int, default=pl.default_jobs(), help="worker processes")

    def mantel(sp):
        sp.add_argument("--n-perm", type=int, default=em.DEFAULT_PERMUTATIONS)
        sp.add_argument("--runs", type=int, default=5, help="Mantel re-seedings averaged per cell")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("synth-data", help="write a synthetic drum/imitation corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-class", type=int, default=6)
    sp.add_argument("--imitators", type=int, default=14)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mode", choices=("evaluation", "train"), default="evaluation")
    sp.add_argument("--vips", action="store_true", help="6 kick, 6 snare, 2 closed and 4 open hi-hats")
    sp.set_defaults(fn=cmd_synth_data)

    sp = sub.add_parser("preprocess", help="trim, augment and cache spectrograms")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--augment", type=int, default=0, help="augmented copies per train/validation sound")
    sp.add_argument("--seed", type=int, default=0)
    jobs(sp)
    sp.set_defaults(fn=cmd_preprocess)

    sp = sub.add_parser("features", help="heuristic 32-feature CSV")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("train", "validation", "evaluation"))
    jobs(sp)
    sp.set_defaults(fn=cmd_features)

    sp = sub.add_parser("train", help="train every model and seed of an experiment file")
    sp.add_argument("--config", required=True)
    jobs(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("embed", help="autoencoder embeddings CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--label-mode", choices=("auto", "flag"), default="auto",
                    help="auto: labels from the manifest; flag: --sound-type/--drum-type for every record")
    sp.add_argument("--sound-type", choices=SOUND_TYPES, default="imitation")
    sp.add_argument("--drum-type", choices=DRUM_TYPES)
    sp.add_argument("--split", choices=("train", "validation", "evaluation"))
    sp.add_argument("--cache")
    jobs(sp)
    sp.set_defaults(fn=cmd_embed)

    sp = sub.add_parser("eval", help="MRR, MSS and (with ratings) accuracy and AIC")
    sp.add_argument("--embeddings", required=True, action="append", help="repeat once per seed")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ratings")
    sp.add_argument("--min-rho", type=float, default=0.5,
                    help="duplicate-trial Spearman threshold for keeping a listener")
    sp.add_argument("--within-class", action="store_true", help="rank only same-class references")
    sp.add_argument("--out", required=True)
    mantel(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("heatmap", help="per-imitator Mantel p-values as CSV and SVG")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="output prefix")
    mantel(sp)
    sp.set_defaults(fn=cmd_heatmap)

    sp = sub.add_parser("index", help="build a drum index from an embeddings CSV")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_index)

    sp = sub.add_parser("query", help="rank indexed drums for a vocal imitation")
    sp.add_argument("--index", required=True)
    sp.add_argument("--wav", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--drum-type", choices=DRUM_TYPES)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--within-class", action="store_true", help="restrict results to --drum-type")
    sp.set_defaults(fn=cmd_query)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
