"""Command-line entry point: ``shoring gen | symtest | train | report``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure
(divergence, I/O during a run).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import yaml

from . import pipeline
from .errors import ConfigError, DivergenceError, ParseError, ShoringError, VersionError
from .model import ARCHITECTURES
from .trainer import model_checkpoint, save_checkpoint

log = logging.getLogger("shoring")

EXIT_USAGE = 2
EXIT_RUNTIME = 3

# column name -> True when larger is better
METRIC_COLUMNS = {"loss": False, "std_r": False, "ptb@1%": False, "ptb_r@1%": False,
                  "R2": True, "pearson": True, "p_value": True}


class Failure(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def usage_error(message: str) -> Failure:
    return Failure(message, EXIT_USAGE)


def runtime_error(message: str) -> Failure:
    return Failure(message, EXIT_RUNTIME)


def _config(config_path, overrides, data_dir: str | None = None) -> dict:
    """Without ``--config``, commands reading a dataset start from the config stored beside it."""
    base = None
    stored = Path(data_dir) / "config.yaml" if data_dir else None
    if config_path is None and stored is not None and stored.exists():
        try:
            base = yaml.safe_load(stored.read_text(encoding="utf-8"))
        except (yaml.YAMLError, OSError) as exc:
            raise usage_error(f"cannot read {stored}: {exc}") from exc
    try:
        return pipeline.load_config(config_path, overrides, base)
    except (ConfigError, OSError) as exc:
        raise usage_error(str(exc)) from exc


def _prepare_out(out: str) -> Path:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise usage_error(f"cannot write to output directory {out}: {exc}") from exc
    return path


def _write_manifest(out: Path, command: str, cfg: dict, dataset_hash: str | None, seeds: dict,
                    artifacts: dict, started: float, extra: dict | None = None) -> Path:
    manifest = {
        "command": command, "config": cfg, "dataset_sha256": dataset_hash, "seeds": seeds,
        "artifacts": artifacts, "tool_version": pipeline.TOOL_VERSION, "python": platform.python_version(),
        "wall_time_s": round(time.time() - started, 3),
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str), encoding="utf-8")
    return path


def _split_list(value: str | None) -> list[str]:
    return [v.strip() for v in (value or "").split(",") if v.strip()]


def _max_workers(jobs: int) -> int:
    cap = os.environ.get("SHORING_THREADS")
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError as exc:
            raise usage_error(f"SHORING_THREADS must be an integer, got {cap!r}") from exc
    return max(1, jobs)


def _load_run(data_dir: str, cfg: dict | None):
    if not (Path(data_dir) / "config.yaml").exists():
        raise usage_error(f"{data_dir} is not a dataset directory (run `shoring gen` first)")
    try:
        return pipeline.load_run(data_dir, cfg)
    except (ParseError, VersionError, ConfigError) as exc:
        raise usage_error(str(exc)) from exc


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Symbolic testing of sequence models."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="YAML run configuration.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                          help="Override a config entry, e.g. train.learning_rate=1e-4.")


# ---------------------------------------------------------------- gen


@main.command()
@config_option
@set_option
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", type=int, default=None, help="Generator seed.")
def gen(config_path, overrides, out, seed):
    """Generate a synthetic dataset, split it, fit the encoder and label every task."""
    started = time.time()
    if seed is not None:
        overrides = (*overrides, f"generator.seed={seed}")
    cfg = _config(config_path, overrides)
    out_dir = _prepare_out(out)
    try:
        run = pipeline.build_run(cfg)
        artifacts = pipeline.write_run(run, out_dir)
    except ConfigError as exc:
        raise usage_error(str(exc)) from exc
    except OSError as exc:
        raise runtime_error(f"I/O error: {exc}") from exc
    digest = pipeline.sha256_file(artifacts["dataset"])
    manifest = _write_manifest(out_dir, "gen", cfg, digest, {"generator": cfg["generator"].get("seed", 0)},
                               artifacts, started)
    click.echo(json.dumps({"dataset_sha256": digest, "samples": len(run.dataset), "manifest": str(manifest)}))


# ---------------------------------------------------------------- train


@main.command("train")
@config_option
@set_option
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False), help="Directory from `gen`.")
@click.option("--labels", "labels_path", required=True, type=click.Path(dir_okay=False), help="Label JSONL.")
@click.option("--model", "architecture", required=True, type=click.Choice(ARCHITECTURES))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Training seed (initialisation and shuffling).")
def train_cmd(config_path, overrides, data_dir, labels_path, architecture, out, seed):
    """Train one model on one label file; write checkpoint, log, report and manifest."""
    started = time.time()
    if seed is not None:
        overrides = (*overrides, f"train.seed={seed}")
    cfg = _config(config_path, overrides, data_dir)
    if not Path(labels_path).exists():
        raise usage_error(f"labels file not found: {labels_path}")
    out_dir = _prepare_out(out)
    run = _load_run(data_dir, cfg)
    try:
        labels = pipeline.ExprLabelSet.read(labels_path)
    except (OSError, ValueError, KeyError) as exc:
        raise usage_error(f"cannot read labels {labels_path}: {exc}") from exc
    if labels.raw.shape[0] != len(run.dataset):
        raise usage_error(f"{labels.raw.shape[0]} labels for {len(run.dataset)} samples")
    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w", encoding="utf-8") as fh:
        def on_epoch(e):
            fh.write(json.dumps({"epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss,
                                 "wall_time": round(e.wall_time, 3)}) + "\n")
            fh.flush()
        try:
            cell = pipeline.train_and_evaluate(run, architecture, labels, run.config, on_epoch)
        except DivergenceError as exc:
            raise runtime_error(f"training diverged: {exc}") from exc
    ckpt_path = out_dir / "model.ckpt"
    ckpt = model_checkpoint(cell.model, {"task": labels.expression.name, "best_epoch": cell.train_result.best_epoch})
    save_checkpoint(ckpt_path, ckpt)
    report_path = out_dir / "report.json"
    report = cell.report.to_dict()
    report["row"] = cell.report.row()
    report_path.write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    artifacts = {"checkpoint": str(ckpt_path), "log": str(log_path), "report": str(report_path)}
    _write_manifest(out_dir, "train", run.config, pipeline.sha256_file(Path(data_dir) / "dataset.jsonl"),
                    {"train": run.config["train"]["seed"], "eval": run.config["eval"]["seed"]}, artifacts, started,
                    {"model": architecture, "labels": str(labels_path), "checkpoint_sha256": ckpt.digest()})
    click.echo(json.dumps(cell.report.row()))


# ---------------------------------------------------------------- symtest


def _cell_key(model: str, task: str, seed: int) -> str:
    return f"{model}|{task}|{seed}"


def _completed(rows_path: Path) -> dict[str, dict]:
    done = {}
    if not rows_path.exists():
        return done
    for line in rows_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError:
            continue  # a torn final line from an interrupted run
        if "error" not in row:
            done[_cell_key(row["model"], row["task"], row.get("seed", 0))] = row
    return done


def _drop_torn_tail(rows_path: Path) -> None:
    """Cut an unterminated last line so appended rows start on a fresh line."""
    if not rows_path.exists():
        return
    buf = rows_path.read_bytes()
    if buf and not buf.endswith(b"\n"):
        rows_path.write_bytes(buf[:buf.rfind(b"\n") + 1])


def _symtest_cell(data_dir: str, cfg: dict, architecture: str, task: str, ckpt_dir: str | None) -> dict:
    """Worker body: fully seeded, reads everything from disk."""
    run = pipeline.load_run(data_dir, cfg)
    seed = int(run.config["train"]["seed"])
    started = time.time()
    try:
        cell = pipeline.run_cell(run, architecture, task, run.config)
    except (DivergenceError, ConfigError) as exc:
        return {"model": architecture, "task": task, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}
    row = cell.report.row()
    row.update({"seed": seed, "best_epoch": cell.train_result.best_epoch,
                "epochs": len(cell.train_result.log), "wall_time_s": round(time.time() - started, 2)})
    if ckpt_dir:
        path = Path(ckpt_dir) / f"{architecture}__{pipeline.task_filename(task)}.ckpt"
        save_checkpoint(path, model_checkpoint(cell.model, {"task": task}))
        row["checkpoint"] = str(path)
    return row


@main.command()
@config_option
@set_option
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False), help="Directory from `gen`.")
@click.option("--models", default="SA,SSA,SHORIN,SHORING", show_default=True, help="Comma-separated models.")
@click.option("--exprs", default=None, help="Comma-separated task names (default: all tasks).")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Training seed for every cell.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Parallel worker processes.")
@click.option("--no-checkpoints", is_flag=True, help="Do not save a checkpoint per cell.")
def symtest(config_path, overrides, data_dir, models, exprs, out, seed, jobs, no_checkpoints):
    """Train and evaluate every (model, task) cell; rows stream to rows.jsonl and resume on rerun."""
    started = time.time()
    if seed is not None:
        overrides = (*overrides, f"train.seed={seed}")
    cfg = _config(config_path, overrides, data_dir)
    model_list = _split_list(models)
    if not model_list:
        raise usage_error("--models is empty")
    bad = [m for m in model_list if m not in ARCHITECTURES]
    if bad:
        raise usage_error(f"unknown model {bad[0]!r}; choose from {', '.join(ARCHITECTURES)}")
    run = _load_run(data_dir, cfg)
    task_list = _split_list(exprs) or list(run.tasks)
    missing = [t for t in task_list if t not in run.tasks]
    if missing:
        raise usage_error(f"unknown task {missing[0]!r}; choose from {', '.join(run.tasks)}")
    out_dir = _prepare_out(out)
    ckpt_dir = None
    if not no_checkpoints:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
    rows_path = out_dir / "rows.jsonl"
    train_seed = int(run.config["train"]["seed"])
    done = _completed(rows_path)
    _drop_torn_tail(rows_path)
    cells = [(m, t) for t in task_list for m in model_list if _cell_key(m, t, train_seed) not in done]
    if done:
        click.echo(f"resuming: {len(done)} completed rows kept, {len(cells)} cells to run", err=True)
    failures = 0

    def record(row: dict) -> None:
        nonlocal failures
        with rows_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        if "error" in row:
            failures += 1
            click.echo(f"{row['model']} / {row['task']}: {row['error']}", err=True)
        else:
            click.echo(f"{row['model']} / {row['task']}: R2={row['R2']:.4f} p={row['p_value']:.3f}", err=True)

    workers = _max_workers(jobs)
    ckpt = str(ckpt_dir) if ckpt_dir else None
    try:
        if workers == 1 or len(cells) <= 1:
            for m, t in cells:
                record(_symtest_cell(data_dir, run.config, m, t, ckpt))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_symtest_cell, data_dir, run.config, m, t, ckpt) for m, t in cells]
                for fut in futures:
                    record(fut.result())
    except OSError as exc:
        raise runtime_error(f"I/O error: {exc}") from exc
    artifacts = {"rows": str(rows_path)}
    if ckpt_dir:
        artifacts.update({p.stem: str(p) for p in sorted(ckpt_dir.glob("*.ckpt"))})
    _write_manifest(out_dir, "symtest", run.config, pipeline.sha256_file(Path(data_dir) / "dataset.jsonl"),
                    {"train": train_seed, "eval": run.config["eval"]["seed"]}, artifacts, started,
                    {"models": model_list, "tasks": task_list})
    if failures:
        raise runtime_error(f"{failures} cell(s) failed; see {rows_path}")


# ---------------------------------------------------------------- report


def read_rows(paths) -> list[dict]:
    rows = []
    for p in paths:
        for line in Path(p).read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                if "error" not in row:
                    rows.append(row)
    return rows


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.4g}" if abs(value) >= 1e4 or (value != 0 and abs(value) < 1e-3) else f"{value:.4f}"
    return str(value)


def render(rows: list[dict], fmt: str) -> str:
    columns = ["model", "task", *METRIC_COLUMNS]
    if fmt == "json":
        return json.dumps([{c: r.get(c) for c in columns} for r in rows], indent=1)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({c: repr(r[c]) if isinstance(r.get(c), float) else r.get(c) for c in columns})
        return buf.getvalue()
    if fmt == "md":
        # best per column among the models evaluated on the same task
        best: dict[tuple[str, str], float] = {}
        for task in {r.get("task") for r in rows}:
            group = [r for r in rows if r.get("task") == task]
            for col, higher in METRIC_COLUMNS.items():
                vals = [r[col] for r in group if isinstance(r.get(col), (int, float)) and not math.isnan(r[col])]
                if vals:
                    best[task, col] = max(vals) if higher else min(vals)
        arrows = {c: ("↑" if h else "↓") for c, h in METRIC_COLUMNS.items()}
        lines = ["| " + " | ".join(c + arrows.get(c, "") for c in columns) + " |",
                 "|" + "|".join("---" for _ in columns) + "|"]
        for r in rows:
            cells = []
            for c in columns:
                text = _fmt(r.get(c, ""))
                if (r.get("task"), c) in best and r.get(c) == best[r.get("task"), c]:
                    text = f"**{text}**"
                cells.append(text)
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    raise usage_error(f"unknown format {fmt!r}; choose json, csv or md")


@main.command()
@click.argument("rows_files", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--format", "fmt", default="md", show_default=True, help="json, csv or md.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write here instead of stdout.")
def report(rows_files, fmt, out):
    """Render report rows (JSONL from symtest) as a table."""
    if fmt not in ("json", "csv", "md"):
        raise usage_error(f"unknown format {fmt!r}; choose json, csv or md")
    try:
        rows = read_rows(rows_files)
    except (OSError, json.JSONDecodeError) as exc:
        raise usage_error(f"cannot read rows: {exc}") from exc
    if not rows:
        raise usage_error("no report rows to render")
    text = render(rows, fmt)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


def run() -> None:
    """Console-script wrapper mapping library errors onto exit codes."""
    try:
        main(standalone_mode=True)
    except ShoringError as exc:  # pragma: no cover - safety net
        click.echo(f"Error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)


if __name__ == "__main__":
    run()
