"""Command-line entry points: synthesize data, train, localize, evaluate and ablate feature sources."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from multiprocessing.pool import ThreadPool
from pathlib import Path

import click

from .config import RunConfig, load_run_config
from .errors import EmptyQuerySet, MissingCheckpoint
from .geometry import CameraPose, pose_errors
from .matcher import load_matcher, save_matcher
from .matcher_training import TrainingScene, matcher_config_for, train_matcher
from .metrics import CAMBRIDGE_THRESHOLDS, evaluate_records, format_table, read_records, write_plots
from .nerf_training import load_field, save_field, train_scene, write_metrics_log
from .pipeline import LocalizerConfig, localize_query
from .refinement import default_mode
from .retrieval import build_database
from .scene_data import SceneDataset, SyntheticSceneSpec, generate_synthetic, load_dataset, save_dataset

log = logging.getLogger("nerfloc")

REFINE_FLAGS = {"iterative": "iterative", "optimize": "optimize-then-match", "off": "off"}
FEATURE_SOURCES = ("pt3d", "pe3d", "f1", "f2", "f3", "f4", "f5", "f6", "f7")


def _run_config(config_path, overrides) -> RunConfig:
    return load_run_config(config_path, list(overrides))


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not (p.with_name(p.name + ".json").exists() and p.with_name(p.name + ".bin").exists()):
        raise MissingCheckpoint(f"{what} checkpoint {p} not found")
    return p


def _query_ids(ds: SceneDataset, queries: str) -> list[str]:
    """``test`` (default split), ``train``, a comma list or a file with one id per line."""
    if queries == "test":
        ids = list(ds.test_ids)
    elif queries == "train":
        ids = list(ds.train_ids)
    elif Path(queries).is_file():
        ids = [ln.strip() for ln in Path(queries).read_text().splitlines() if ln.strip()]
    else:
        ids = [q.strip() for q in queries.split(",") if q.strip()]
    unknown = [q for q in ids if q not in ds.images]
    if unknown:
        raise click.BadParameter(f"unknown query ids {unknown[:5]}", param_hint="--queries")
    if not ids:
        raise EmptyQuerySet("no query images selected")
    return ids


def localize_scene(ds: SceneDataset, scene_name: str, field_, matcher, cfg: RunConfig, query_ids: list[str],
                   results_path: Path, refine_mode: str | None = None, retrieval_db: str | None = None,
                   workers: int | None = None) -> list[dict]:
    """Localize ``query_ids``, appending one record per query to ``results_path`` in query order.

    Queries already present in the file are skipped, so an interrupted run resumes.
    """
    if not query_ids:
        raise EmptyQuerySet("no query images selected")
    done = {r["query"] for r in read_records(results_path)}
    todo = [q for q in query_ids if q not in done]
    mode = refine_mode or cfg.refine.mode
    refine_cfg = dataclasses.replace(cfg.refine, mode=mode)
    loc = LocalizerConfig(cfg.localize.topk, cfg.localize.merge, cfg.localize.covis_min,
                          cfg.localize.fallback_to_retrieval, refine_cfg, cfg.ransac)
    source = retrieval_db or cfg.localize.retrieval_db
    db = build_database(ds, matcher, source=source, field_=field_ if source == "synthesized" else None)

    def run(q):
        res = localize_query(q, ds.images[q], ds.intrinsics[q], db, field_, matcher, loc,
                             appearance_id=ds.sequence_index(q), truth=ds.poses.get(q), diameter=ds.diameter)
        rec = res.to_record()
        rec["scene"] = scene_name
        rec["diameter"] = ds.diameter
        for k in ("t_err", "r_err", "init_t_err", "init_r_err"):
            if rec[k] is not None and not math.isfinite(rec[k]):
                rec[k] = None
        return rec

    results_path.parent.mkdir(parents=True, exist_ok=True)
    out = []
    n_workers = max(1, workers or cfg.localize.workers)
    with open(results_path, "a") as fh:
        if n_workers == 1:
            it = map(run, todo)
            pool = None
        else:
            pool = ThreadPool(n_workers)
            it = pool.imap(run, todo)  # ordered, so records land in query order
        try:
            for rec in it:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
                out.append(rec)
                log.info("%s %s t=%s r=%s", rec["query"], rec["status"], rec["t_err"], rec["r_err"])
        finally:
            if pool is not None:
                pool.close()
                pool.join()
    return out


def parse_threshold_table(text: str) -> dict[str, float]:
    """``cambridge`` or ``Scene=meters,Scene=meters``."""
    if text.strip().lower() == "cambridge":
        return dict(CAMBRIDGE_THRESHOLDS)
    table = {}
    for item in text.split(","):
        if item.strip():
            k, v = item.split("=", 1)
            table[k.strip()] = float(v)
    return table


def evaluate_results(records: list[dict], out_dir: Path, t_thresh: float, r_thresh: float,
                     per_scene: dict[str, float] | None = None, diameter_fraction: float = 0.0,
                     dataset: SceneDataset | None = None, plots: bool = True) -> str:
    """Write ``metrics.txt`` (and plots) for ``records``; returns the table text."""
    if dataset is not None:
        # recompute errors against the dataset's ground-truth poses
        records = [dict(r) for r in records]
        for r in records:
            if r.get("localized", True) and r["query"] in dataset.poses:
                p = r["pose"]
                est = CameraPose(p[:4], p[4:])
                r["t_err"], r["r_err"] = pose_errors(est, dataset.poses[r["query"]])
    if diameter_fraction > 0:
        diam = {r.get("scene", "scene"): r.get("diameter") for r in records}
        if dataset is not None:
            diam = {k: dataset.diameter for k in diam}
        if any(v is None for v in diam.values()):
            raise click.UsageError("a diameter-relative threshold needs records with a diameter or --scene")
        per_scene = {k: diameter_fraction * v for k, v in diam.items()}
    rows = evaluate_records(records, t_thresh, r_thresh, per_scene)
    table = format_table(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.txt").write_text(table)
    if plots:
        write_plots(records, out_dir / "plots")
    return table


# -- commands ----------------------------------------------------------------

config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                             help="key = value run configuration file")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="override one config key")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="log progress")
def main(verbose):
    """NeRF-based visual localization toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("synth")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="dataset directory to create")
@click.option("--seed", default=0, show_default=True)
@click.option("--n-objects", default=12, show_default=True)
@click.option("--n-train", default=20, show_default=True)
@click.option("--n-test", default=10, show_default=True)
@click.option("--size", default=96, show_default=True, help="image width and height")
@click.option("--fov", default=60.0, show_default=True)
def cmd_synth(out, seed, n_objects, n_train, n_test, size, fov):
    """Render a synthetic desk scene to the on-disk dataset layout."""
    spec = SyntheticSceneSpec(seed=seed, n_objects=n_objects, n_train_views=n_train, n_test_views=n_test,
                              image_size=size, fov_deg=fov)
    ds, _ = generate_synthetic(spec)
    save_dataset(ds, out)
    click.echo(f"wrote {len(ds.ids)} views to {out}")


@main.command("train-nerf")
@click.option("--scene", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@set_option
def cmd_train_nerf(scene, out, config_path, overrides):
    """Fit a scene field; writes ``field`` checkpoint, ``nerf_log.txt`` and ``psnr.txt``."""
    cfg = _run_config(config_path, overrides)
    out = Path(out)
    cfg.write_echo(out)
    ds = load_dataset(scene)
    result = train_scene(ds, cfg.nerf, seed=cfg.seed)
    save_field(result.field, out / "field")
    write_metrics_log(result.log, out / "nerf_log.txt")
    (out / "psnr.txt").write_text(f"train_psnr {result.train_psnr:.4f}\n")
    click.echo(f"train PSNR {result.train_psnr:.2f} dB")


@main.command("train-matcher")
@click.option("--scene", "scenes", required=True, multiple=True, type=click.Path(exists=True, file_okay=False))
@click.option("--field", "fields", required=True, multiple=True, help="field checkpoint per --scene, same order")
@click.option("--variant", type=click.Choice(["mini", "full"]), default=None, help="overrides matcher.variant")
@click.option("--mode", type=click.Choice(["per-scene", "multi-scene"]), default="per-scene", show_default=True)
@click.option("--source", type=click.Choice(FEATURE_SOURCES), default=None, help="overrides matcher.feature_source")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@set_option
def cmd_train_matcher(scenes, fields, variant, mode, source, out, config_path, overrides):
    """Train a matcher on one or several scenes; writes ``matcher`` checkpoint and ``matcher_log.txt``."""
    if len(scenes) != len(fields):
        raise click.UsageError("give one --field per --scene")
    cfg = _run_config(config_path, overrides)
    if variant:
        cfg.set("matcher.variant", variant)
    if source:
        cfg.set("matcher.feature_source", source)
    out = Path(out)
    cfg.write_echo(out)
    matcher, log_ = _train_matcher_cmd(scenes, fields, mode, cfg)
    save_matcher(matcher, out / "matcher")
    _write_matcher_log(log_, out / "matcher_log.txt")
    click.echo(f"final coarse loss {log_[-1].coarse:.4f}" if log_ else "no epochs run")


def _train_matcher_cmd(scenes, fields, mode, cfg: RunConfig):
    train_scenes = []
    for s, f in zip(scenes, fields):
        field_ = load_field(_require(f, "field"))
        train_scenes.append(TrainingScene(Path(s).name, load_dataset(s), field_))
    opts = cfg.matcher
    mc = matcher_config_for(train_scenes[0].field, opts.variant, opts.feature_source, **opts.overrides())
    res = train_matcher(train_scenes, opts.variant, mode, cfg.matcher_train, seed=cfg.seed, matcher_config=mc)
    return res.matcher, res.log


def _write_matcher_log(entries, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch coarse fine pairs\n")
        for e in entries:
            fine = "-" if e.fine is None else f"{e.fine:.6f}"
            fh.write(f"{e.epoch} {e.coarse:.6f} {fine} {e.n_pairs}\n")


@main.command("localize")
@click.option("--scene", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--field", required=True, help="field checkpoint path (without extension)")
@click.option("--matcher", "matcher_path", required=True, help="matcher checkpoint path (without extension)")
@click.option("--queries", default="test", show_default=True, help="test, train, comma list or id file")
@click.option("--topk", type=int, default=None)
@click.option("--merge", type=click.Choice(["none", "match", "3d"]), default=None)
@click.option("--refine", type=click.Choice(["auto", *REFINE_FLAGS]), default="auto", show_default=True,
              help="auto: iterative for full, optimize for mini")
@click.option("--retrieval-db", type=click.Choice(["real", "synthesized"]), default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@set_option
def cmd_localize(scene, field, matcher_path, queries, topk, merge, refine, retrieval_db, workers, out, config_path,
                 overrides):
    """Localize queries; appends records to ``results.jsonl`` and resumes past completed ids."""
    cfg = _run_config(config_path, overrides)
    field_ = load_field(_require(field, "field"))
    matcher = load_matcher(_require(matcher_path, "matcher"))
    if topk is not None:
        cfg.set("localize.topk", str(topk))
    if merge is not None:
        cfg.set("localize.merge", merge)
    if retrieval_db is not None:
        cfg.set("localize.retrieval_db", retrieval_db)
    if workers is not None:
        cfg.set("localize.workers", str(workers))
    mode = default_mode(matcher.config.variant) if refine == "auto" else REFINE_FLAGS[refine]
    cfg.set("refine.mode", mode)
    out = Path(out)
    cfg.write_echo(out)
    ds = load_dataset(scene)
    ids = _query_ids(ds, queries)
    recs = localize_scene(ds, Path(scene).name, field_, matcher, cfg, ids, out / "results.jsonl")
    click.echo(f"localized {len(recs)} new queries ({len(ids) - len(recs)} already done)")


@main.command("evaluate")
@click.option("--results", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene", default=None, type=click.Path(exists=True, file_okay=False),
              help="recompute errors against this dataset's poses")
@click.option("--t-thresh", type=float, default=None, help="translation threshold (scene units)")
@click.option("--r-thresh", type=float, default=None, help="rotation threshold (degrees)")
@click.option("--scene-thresholds", default=None, help="'cambridge' or Scene=meters,... per-scene translation thresholds")
@click.option("--diameter-fraction", type=float, default=None, help="translation threshold as a fraction of diameter")
@click.option("--no-plots", is_flag=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@set_option
def cmd_evaluate(results, scene, t_thresh, r_thresh, scene_thresholds, diameter_fraction, no_plots, out, config_path,
                 overrides):
    """Median errors and recall per scene into ``metrics.txt`` plus ``plots/``."""
    cfg = _run_config(config_path, overrides)
    ev = cfg.evaluate
    records = read_records(results)
    if not records:
        raise EmptyQuerySet(f"no result records in {results}")
    table = evaluate_results(
        records, Path(out),
        ev.t_thresh if t_thresh is None else t_thresh,
        ev.r_thresh if r_thresh is None else r_thresh,
        parse_threshold_table(scene_thresholds) if scene_thresholds else None,
        ev.t_thresh_diameter_fraction if diameter_fraction is None else diameter_fraction,
        load_dataset(scene) if scene else None,
        plots=not no_plots,
    )
    click.echo(table, nl=False)


def ablation_row(source: str, records: list[dict], t_thresh: float, r_thresh: float) -> str:
    row = evaluate_records(records, t_thresh, r_thresh)[0]
    return f"{source} {row.median_t:.6f} {row.median_r:.6f} {row.recall:.6f}"


@main.command("ablate-features")
@click.option("--scene", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--field", required=True, help="field checkpoint path (without extension)")
@click.option("--layers", default="pt3d,pe3d,f1,f2,f3,f4,f5,f6,f7", show_default=True)
@click.option("--queries", default="test", show_default=True)
@click.option("--refine", type=click.Choice(list(REFINE_FLAGS)), default="off", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@config_option
@set_option
def cmd_ablate_features(scene, field, layers, queries, refine, out, config_path, overrides):
    """Train one mini matcher per 3D feature source and tabulate localization metrics."""
    cfg = _run_config(config_path, overrides)
    cfg.set("matcher.variant", "mini")
    cfg.set("refine.mode", REFINE_FLAGS[refine])
    out = Path(out)
    cfg.write_echo(out)
    field_path = _require(field, "field")
    ds = load_dataset(scene)
    ids = _query_ids(ds, queries)
    thr = cfg.evaluate.t_thresh
    if cfg.evaluate.t_thresh_diameter_fraction > 0:
        thr = cfg.evaluate.t_thresh_diameter_fraction * ds.diameter
    lines = ["source median_t median_r recall"]
    for src in [s.strip().lower() for s in layers.split(",") if s.strip()]:
        if src not in FEATURE_SOURCES:
            raise click.BadParameter(f"unknown feature source {src!r}", param_hint="--layers")
        cfg.set("matcher.feature_source", src)
        sub = out / src
        recs = [r for r in read_records(sub / "results.jsonl") if r["query"] in ids]
        if len(recs) < len(set(ids)):
            try:
                matcher = load_matcher(sub / "matcher")
            except MissingCheckpoint:
                matcher, log_ = _train_matcher_cmd([scene], [str(field_path)], "per-scene", cfg)
                save_matcher(matcher, sub / "matcher")
                _write_matcher_log(log_, sub / "matcher_log.txt")
            recs += localize_scene(ds, Path(scene).name, load_field(field_path), matcher, cfg, ids,
                                   sub / "results.jsonl")
        lines.append(ablation_row(src, recs, thr, cfg.evaluate.r_thresh))
        click.echo(lines[-1])
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
