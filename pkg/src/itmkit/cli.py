"""Command-line surface: build document frequencies, build similarity
matrices, evaluate retrieval runs, train embeddings, and correlate
scores with human judgments.

Every successful command writes a run manifest (resolved options, input
checksums, tool version, wall-clock, output paths).  Failures exit with
2 for I/O problems, 3 for validation problems, 4 for numeric
divergence, and print a JSON error object to standard error.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click

from . import __version__
from ._binio import sha256_file
from .corpus import load_corpus
from .errors import (
    DivergenceError,
    FileFormatError,
    IntegrityError,
    ItmkitError,
    ProvenanceError,
    ValidationError,
)
from .metrics import aggregate, correlate_judgments, load_run, read_score_tsv
from .ngrams import build_df, load_df, save_df
from .semsim import build_sim_matrix, load_sim, save_sim
from .training import load_bundles_from_config, load_train_config, save_model, train

EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_DIVERGENCE = 4


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, (ValidationError, IntegrityError, ProvenanceError)):
        return EXIT_VALIDATION
    if isinstance(exc, (FileFormatError, OSError)):
        return EXIT_IO
    return EXIT_VALIDATION


def _fail(exc: Exception) -> None:
    code = _exit_code(exc)
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    click.echo(json.dumps(payload), err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ItmkitError, OSError) as exc:
            _fail(exc)

    return wrapper


def _write_manifest(
    command: str,
    config: dict,
    inputs: list,
    outputs: list,
    started: float,
    manifest_path,
) -> None:
    doc = {
        "command": command,
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(config.items())},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_clock_s": round(time.monotonic() - started, 6),
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _manifest_path(explicit, primary_output) -> Path:
    if explicit is not None:
        return Path(explicit)
    if primary_output is not None:
        return Path(str(primary_output) + ".manifest.json")
    return Path("itmkit-manifest.json")


@click.group()
@click.version_option(version=__version__, prog_name="itmkit")
def main():
    """Semantics-aware image-text retrieval toolkit."""


@main.command("build-df")
@click.option("--captions", required=True, type=click.Path(), help="Caption JSON file.")
@click.option("--split", required=True, help="Corpus split to read (train/val/test).")
@click.option("--out", required=True, type=click.Path(), help="Output document-frequency file.")
@click.option("--manifest", type=click.Path(), default=None, help="Manifest path (default: OUT.manifest.json).")
@handle_errors
def cmd_build_df(captions, split, out, manifest):
    """Build n-gram document frequencies over one corpus split."""
    started = time.monotonic()
    corpus = load_corpus(captions, split)
    table = build_df(corpus)
    save_df(table, out)
    _write_manifest(
        "build-df",
        {"captions": captions, "split": split, "out": out},
        [captions],
        [out],
        started,
        _manifest_path(manifest, out),
    )


@main.command("simmat")
@click.option("--captions", required=True, type=click.Path(), help="Caption JSON file.")
@click.option("--split", required=True, help="Corpus split to score.")
@click.option("--df", "df_path", required=True, type=click.Path(), help="Document-frequency file.")
@click.option("--out", required=True, type=click.Path(), help="Output similarity-matrix file.")
@click.option("--threads", type=int, default=None, envvar="ITM_THREADS", help="Worker thread cap.")
@click.option("--manifest", type=click.Path(), default=None, help="Manifest path (default: OUT.manifest.json).")
@handle_errors
def cmd_simmat(captions, split, df_path, out, threads, manifest):
    """Score every caption against every image's references."""
    started = time.monotonic()
    corpus = load_corpus(captions, split)
    table = load_df(df_path)
    sim = build_sim_matrix(corpus, table, threads=threads)
    save_sim(sim, out)
    _write_manifest(
        "simmat",
        {"captions": captions, "split": split, "df": df_path, "out": out, "threads": threads},
        [captions, df_path],
        [out],
        started,
        _manifest_path(manifest, out),
    )


@main.command("eval")
@click.option(
    "--run",
    "runs",
    required=True,
    multiple=True,
    type=click.Path(),
    help="Retrieval-run file; pass twice (one i2t, one t2i).",
)
@click.option("--captions", required=True, type=click.Path(), help="Caption JSON file.")
@click.option("--split", required=True, help="Corpus split the runs were produced on.")
@click.option("--sim", "sim_path", required=True, type=click.Path(), help="Similarity-matrix file.")
@click.option("--m", "m", type=int, default=None, help="Extended-set size (default: m = k per cell).")
@click.option("--k", "ks", default="1,5,10", help="Comma-separated cut-offs.")
@click.option("--non-gt", is_flag=True, help="Report ground-truth-removed NCS cells.")
@click.option("--report", "fmt", type=click.Choice(["table", "json"]), default="table")
@click.option("--out", type=click.Path(), default=None, help="Write the report here as well.")
@click.option("--manifest", type=click.Path(), default=None, help="Manifest path.")
@handle_errors
def cmd_eval(runs, captions, split, sim_path, m, ks, non_gt, fmt, out, manifest):
    """Compute every retrieval metric for an i2t/t2i run pair."""
    started = time.monotonic()
    try:
        k_tuple = tuple(int(p) for p in ks.replace(",", " ").split())
    except ValueError:
        raise ValidationError(f"--k: cannot parse {ks!r}")
    corpus = load_corpus(captions, split)
    sim = load_sim(sim_path)
    loaded = [load_run(p) for p in runs]
    by_direction = {r.direction: r for r in loaded}
    if len(runs) != 2 or set(by_direction) != {"i2t", "t2i"}:
        raise ValidationError("--run must be given twice: one i2t run and one t2i run")
    report = aggregate(
        by_direction["i2t"],
        by_direction["t2i"],
        corpus,
        sim,
        m=m,
        ks=k_tuple,
        non_gt=non_gt,
    )
    text = report.to_json() if fmt == "json" else report.to_table()
    click.echo(text)
    outputs = []
    if out is not None:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        outputs.append(out)
    _write_manifest(
        "eval",
        {
            "runs": list(runs),
            "captions": captions,
            "split": split,
            "sim": sim_path,
            "m": m,
            "k": ks,
            "non_gt": non_gt,
            "report": fmt,
            "out": out,
        },
        [*runs, captions, sim_path],
        outputs,
        started,
        _manifest_path(manifest, out),
    )


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(), help="Training config file.")
@click.option("--out-model", required=True, type=click.Path(), help="Output checkpoint.")
@click.option("--report", "report_path", required=True, type=click.Path(), help="Per-epoch report JSON.")
@click.option("--threads", type=int, default=None, envvar="ITM_THREADS", help="Worker thread cap.")
@click.option("--manifest", type=click.Path(), default=None, help="Manifest path.")
@handle_errors
def cmd_train(config_path, out_model, report_path, threads, manifest):
    """Train the joint embedding described by a config file."""
    started = time.monotonic()
    cfg, data = load_train_config(config_path)
    train_bundle, val_bundle = load_bundles_from_config(data, Path(config_path).parent)
    result = train(train_bundle, val_bundle, cfg)
    save_model(result.model, out_model)
    epochs_doc = {
        "best_epoch": result.best_epoch,
        "best_nsum": result.best_nsum,
        "epochs": [json.loads(r.to_json()) for r in result.reports],
    }
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(epochs_doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_manifest(
        "train",
        {"config": config_path, "out_model": out_model, "report": report_path, "threads": threads},
        [config_path],
        [out_model, report_path],
        started,
        _manifest_path(manifest, out_model),
    )


@main.command("correlate")
@click.option("--judgments", required=True, type=click.Path(), help="Human-judgment TSV.")
@click.option("--scores", required=True, type=click.Path(), help="Model-score TSV.")
@click.option("--report", "fmt", type=click.Choice(["table", "json"]), default="table")
@click.option("--manifest", type=click.Path(), default=None, help="Manifest path.")
@handle_errors
def cmd_correlate(judgments, scores, fmt, manifest):
    """Pearson-R between human judgments and scores over shared pairs."""
    started = time.monotonic()
    r, n = correlate_judgments(read_score_tsv(judgments), read_score_tsv(scores))
    if fmt == "json":
        click.echo(json.dumps({"pearson_r": r, "pairs": n}))
    else:
        click.echo(f"pearson_r {r:.6f} over {n} shared pairs")
    _write_manifest(
        "correlate",
        {"judgments": judgments, "scores": scores, "report": fmt},
        [judgments, scores],
        [],
        started,
        _manifest_path(manifest, None),
    )


if __name__ == "__main__":
    main()
