"""``hidisc`` command line: generate, train, eval, embed, ablate.

Exit codes: 0 success, 2 configuration error, 3 runtime abort (non-finite
loss or flagged ablation runs), 4 checkpoint digest mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import re
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import AblationPlan, ConfigError, RunConfig, is_plan
from .data import Corpus, SynthConfig, export_corpus, generate_synthetic, load_manifest
from .evaluation import embed_corpus, evaluate_embeddings, export_embeddings, format_report
from .trainer import CHECKPOINT_VERSION, Checkpoint, DigestMismatch, TrainingAborted, train

log = logging.getLogger("hidisc")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_DIGEST = 0, 2, 3, 4
RUN_FILES = ("config.json", "run.json", "metrics.csv", "checkpoint.npz", "summary.json")
REPORT_METRICS = (
    ("patch_acc", ("levels", "patch", "accuracy")),
    ("patch_mca", ("levels", "patch", "mca")),
    ("slide_acc", ("levels", "slide", "accuracy")),
    ("patient_acc", ("levels", "patient", "accuracy")),
    ("patient_mca", ("levels", "patient", "mca")),
    ("mean_cosine", ("collapse", "mean_pairwise_cosine")),
    ("effective_rank", ("collapse", "effective_rank")),
)


def data_workers() -> int:
    raw = os.environ.get("HIDISC_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("HIDISC_WORKERS", f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("HIDISC_WORKERS", f"expected a positive integer, got {raw!r}")
    return n


def versions() -> dict:
    return {"hidisc": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "checkpoint": CHECKPOINT_VERSION}


def _dump(obj) -> str:
    def default(x):
        if isinstance(x, np.generic):
            return x.item()
        if isinstance(x, np.ndarray):
            return x.tolist()
        raise TypeError(f"cannot serialize {type(x).__name__}")

    return json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n"


def load_corpus(cfg: RunConfig, manifest: Optional[str] = None) -> Corpus:
    if manifest is not None:
        return load_manifest(manifest)
    if cfg.corpus.synthetic is not None:
        return generate_synthetic(cfg.corpus.synthetic)
    return load_manifest(cfg.corpus.manifest)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(synth: SynthConfig, out_dir, force: bool = False) -> Path:
    """Render a synthetic corpus to patch files plus manifest and provenance."""
    out_dir = Path(out_dir)
    if (out_dir / "manifest.jsonl").exists() and not force:
        raise ConfigError("--out", f"{out_dir} already holds a corpus; pass --force to overwrite")
    if force and (out_dir / "patches").exists():
        shutil.rmtree(out_dir / "patches")
    corpus = generate_synthetic(synth)
    provenance = {"generator": "synthetic", "synth_config": synth.to_dict(), "versions": versions()}
    return export_corpus(corpus, out_dir, provenance, force=True)


def _synth_from_file(path, seed: Optional[int]) -> SynthConfig:
    d = _read_json(path)
    if "corpus" in d:
        d = d["corpus"].get("synthetic")
        if d is None:
            raise ConfigError("corpus.synthetic", "generate needs a synthetic corpus config")
    try:
        cfg = SynthConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError("corpus.synthetic", str(exc)) from None
    if seed is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "seed": seed})
    return cfg


# ---------------------------------------------------------------------------
# train


def default_run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / cfg.name


def cmd_train(cfg: RunConfig, run_dir=None, force: bool = False, workers: Optional[int] = None) -> Path:
    """Train (or resume) a run; returns the run directory.

    An existing run directory whose config digest differs raises
    :class:`DigestMismatch` unless ``force`` clears it first.
    """
    run_dir = Path(run_dir) if run_dir is not None else default_run_dir(cfg)
    workers = data_workers() if workers is None else workers
    if cfg.corpus.manifest is not None and not Path(cfg.corpus.manifest).exists():
        raise ConfigError("corpus.manifest", f"{cfg.corpus.manifest} not found")
    digest = cfg.digest()
    run_json = run_dir / "run.json"
    if run_json.exists() and not force:
        prior = json.loads(run_json.read_text()).get("digest")
        if prior != digest:
            raise DigestMismatch(f"{run_dir} holds run {str(prior)[:12]}, config is {digest[:12]}; pass --force to replace it")
    if force:
        _clear_run(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    run_json.write_text(_dump({"digest": digest, "versions": versions()}))

    corpus = load_corpus(cfg)
    if tuple(corpus.patch_shape) != tuple(cfg.encoder.patch_shape):
        raise ConfigError("encoder.patch_shape",
                          f"{list(cfg.encoder.patch_shape)} does not match corpus patches {list(corpus.patch_shape)}")
    result = train(
        corpus, cfg.sample, cfg.loss, cfg.encoder, cfg.optim, run_dir,
        patients=corpus.split_patients("train"), workers=workers,
        digest_extra={"corpus": cfg.corpus.to_dict()},
    )
    last = result.metrics[-1] if result.metrics else {}
    summary = {
        "digest": digest,
        "iterations": result.checkpoint.iteration,
        "final_metrics": last,
        "train_patients": len(corpus.split_patients("train")),
    }
    (run_dir / "summary.json").write_text(_dump(summary))
    return run_dir


def _clear_run(run_dir: Path) -> None:
    if not run_dir.exists():
        return
    for name in RUN_FILES:
        (run_dir / name).unlink(missing_ok=True)
    for pattern in ("report_*.json", "embeddings_*", "abort_batch_*.npz"):
        for p in run_dir.glob(pattern):
            p.unlink()


def _run_config(run_dir: Path) -> RunConfig:
    path = Path(run_dir) / "config.json"
    if not path.exists():
        raise ConfigError("run_dir", f"{run_dir} has no config.json")
    return RunConfig.from_file(path)


def _load_checkpoint(run_dir: Path, cfg: RunConfig) -> Checkpoint:
    path = Path(run_dir) / "checkpoint.npz"
    if not path.exists():
        raise ConfigError("run_dir", f"{run_dir} has no checkpoint")
    return Checkpoint.load(path, expected_digest=cfg.digest())


# ---------------------------------------------------------------------------
# eval / embed


def cmd_eval(run_dir, split: str = "test", manifest: Optional[str] = None, quiet: bool = False) -> dict:
    """kNN evaluation of a run's checkpoint; writes the report and embeddings."""
    run_dir = Path(run_dir)
    cfg = _run_config(run_dir)
    ckpt = _load_checkpoint(run_dir, cfg)
    if split == "train":
        raise ConfigError("--split", "the train split is the kNN reference set; evaluate another split")
    corpus = load_corpus(cfg, manifest)
    ev = cfg.eval
    if not corpus.split_patients(split):
        raise ConfigError("--split", f"corpus has no patients in split {split!r}")
    ref = embed_corpus(ckpt.params, cfg.encoder, corpus, "train", ev.per_slide_subsample, ev.seed, ev.features)
    qry = embed_corpus(ckpt.params, cfg.encoder, corpus, split, ev.per_slide_subsample, ev.seed, ev.features)
    body = evaluate_embeddings(ref, qry, len(corpus.classes), k=ev.k, probe_size=ev.probe_size, seed=ev.seed)
    report = {
        "run": cfg.name,
        "digest": ckpt.digest,
        "iteration": ckpt.iteration,
        "split": split,
        "features": ev.features,
        "per_slide_subsample": ev.per_slide_subsample,
        "classes": list(corpus.classes),
        **body,
    }
    (run_dir / f"report_{split}.json").write_text(_dump(report))
    export_embeddings(qry, run_dir / f"embeddings_{split}.f32", ckpt.digest)
    if not quiet:
        print(format_report(report))
    return report


def cmd_embed(run_dir, split: str = "test", manifest: Optional[str] = None) -> Path:
    """Export embeddings of ``split`` (or ``all``) without running kNN."""
    run_dir = Path(run_dir)
    cfg = _run_config(run_dir)
    ckpt = _load_checkpoint(run_dir, cfg)
    corpus = load_corpus(cfg, manifest)
    ev = cfg.eval
    es = embed_corpus(ckpt.params, cfg.encoder, corpus, None if split == "all" else split,
                      ev.per_slide_subsample, ev.seed, ev.features)
    path = run_dir / f"embeddings_{split}.f32"
    export_embeddings(es, path, ckpt.digest)
    return path


# ---------------------------------------------------------------------------
# ablate


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.=_-]+", "_", label)


def run_one(cfg: RunConfig, run_dir, force: bool = False, workers: int = 1) -> dict:
    """Train and evaluate one sweep cell; returns a status record.

    An existing report with the expected digest is reused. Unreadable
    reports, digest clashes and checkpoint failures are flagged rather than
    retried unless ``force`` is set.
    """
    run_dir = Path(run_dir)
    digest = cfg.digest()
    report_path = run_dir / "report_test.json"
    if report_path.exists() and not force:
        try:
            report = json.loads(report_path.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            return {"status": "corrupt", "reason": f"unreadable report: {exc}"}
        if report.get("digest") != digest:
            return {"status": "corrupt", "reason": "report digest does not match the plan"}
        return {"status": "ok", "report": report}
    try:
        cmd_train(cfg, run_dir, force=force, workers=workers)
        report = cmd_eval(run_dir, "test", quiet=True)
    except TrainingAborted as exc:
        return {"status": "aborted", "reason": str(exc)}
    except DigestMismatch as exc:
        return {"status": "corrupt", "reason": str(exc)}
    except (OSError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        return {"status": "corrupt", "reason": f"{type(exc).__name__}: {exc}"}
    return {"status": "ok", "report": report}


def _run_one_job(job):
    cfg_dict, run_dir, force, workers = job
    return run_one(RunConfig.from_dict(cfg_dict), run_dir, force, workers)


def _metric(report: dict, path) -> Optional[float]:
    node = report
    for key in path:
        node = node.get(key) if isinstance(node, dict) else None
        if node is None:
            return None
    return float(node)


def aggregate(plan: AblationPlan, results: dict) -> list[dict]:
    """One row per cell with ``mean (std)`` over its healthy seeds.

    ``results`` maps ``(value, seed)`` to the record from :func:`run_one`.
    The sample standard deviation is used; a single healthy seed reports
    a std of 0.
    """
    rows = []
    for value in plan.values:
        recs = [(s, results.get((value, s), {"status": "missing"})) for s in plan.seeds]
        good = [r["report"] for _, r in recs if r["status"] == "ok"]
        flagged = [f"seed{s}:{r['status']}" for s, r in recs if r["status"] != "ok"]
        row = {"cell": plan.cell_label(value), "seeds": len(plan.seeds), "ok": len(good), "flagged": ";".join(flagged)}
        for name, path in REPORT_METRICS:
            vals = [v for v in (_metric(rep, path) for rep in good) if v is not None]
            if not vals:
                row[name] = "n/a"
                continue
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            row[name] = f"{np.mean(vals):.4f} ({std:.4f})"
        rows.append(row)
    return rows


def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    fields = ["cell", "seeds", "ok", "flagged"] + [n for n, _ in REPORT_METRICS]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def format_table(rows: list[dict]) -> str:
    cols = ["cell", "patch_mca", "slide_acc", "patient_acc", "mean_cosine", "flagged"]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return "\n".join(lines)


def cmd_ablate(plan: AblationPlan, out_dir=None, parallel: int = 1, force: bool = False,
               workers: Optional[int] = None, quiet: bool = False) -> tuple[list[dict], dict]:
    """Run every (value, seed) cell of ``plan``; returns aggregate rows and per-run records."""
    out_dir = Path(out_dir) if out_dir is not None else Path(plan.base.out_dir) / plan.name
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "plan.json").write_text(_dump(plan.to_dict()))
    workers = data_workers() if workers is None else workers
    jobs, keys = [], []
    for value, seed, cfg in plan.runs():
        run_dir = out_dir / _slug(plan.cell_label(value)) / f"seed{seed}"
        jobs.append((cfg.to_dict(), str(run_dir), force, workers))
        keys.append((value, seed))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            records = list(ex.map(_run_one_job, jobs))
    else:
        records = [_run_one_job(j) for j in jobs]
    results = dict(zip(keys, records))
    rows = aggregate(plan, results)
    (out_dir / "aggregate.csv").write_text(_csv_text(rows))
    status = [{"cell": plan.cell_label(v), "seed": s, "status": r["status"], "reason": r.get("reason", "")}
              for (v, s), r in results.items()]
    (out_dir / "runs.json").write_text(_dump(status))
    if not quiet:
        print(format_table(rows))
        for st in status:
            if st["status"] != "ok":
                print(f"flagged: {st['cell']} seed {st['seed']}: {st['status']} ({st['reason']})", file=sys.stderr)
    return rows, results


# ---------------------------------------------------------------------------
# entry point


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("--config", f"{path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"{path} is not valid JSON: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override every training and evaluation seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--parallel", type=int, default=1, help="concurrent sweep runs (ablate only)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hidisc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hidisc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="render a synthetic corpus to disk")
    sub.add_parser("train", parents=[common], help="train a run from a config")
    for name, help_ in (("eval", "kNN evaluation of a trained run"), ("embed", "export embeddings of a run")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("run_dir")
        sp.add_argument("--split", default="test")
        sp.add_argument("--manifest", help="evaluate on this manifest instead of the run's corpus")
    sub.add_parser("ablate", parents=[common], help="run an ablation plan")
    return p


def _require_config(args) -> str:
    if not args.config:
        raise ConfigError("--config", f"{args.command} needs --config")
    return args.config


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "generate":
            synth = _synth_from_file(_require_config(args), args.seed)
            manifest = cmd_generate(synth, args.out or "corpus", args.force)
            print(f"wrote {manifest}")
        elif args.command == "train":
            cfg = RunConfig.from_file(_require_config(args))
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
            run_dir = cmd_train(cfg, args.out, args.force)
            print(f"run complete: {run_dir}")
        elif args.command == "eval":
            report = cmd_eval(args.run_dir, args.split, args.manifest)
            print(f"report: {Path(args.run_dir) / ('report_' + report['split'] + '.json')}")
        elif args.command == "embed":
            print(f"wrote {cmd_embed(args.run_dir, args.split, args.manifest)}")
        elif args.command == "ablate":
            path = _require_config(args)
            d = _read_json(path)
            if not is_plan(d):
                raise ConfigError("--config", "an ablation plan needs 'base' and 'axis'")
            plan = AblationPlan.from_dict(d, Path(path).parent)
            if args.seed is not None:
                plan = AblationPlan(plan.base, plan.axis, plan.values, (args.seed,), plan.name)
            if args.parallel < 1:
                raise ConfigError("--parallel", "must be >= 1")
            _, results = cmd_ablate(plan, args.out, args.parallel, args.force)
            if any(r["status"] != "ok" for r in results.values()):
                return EXIT_ABORT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except DigestMismatch as exc:
        print(f"digest mismatch: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
