"""Command-line pipeline: ingest -> plan -> acquire -> manifest -> split -> tune/train -> eval -> explain -> report.

Every stage writes into ``<output_dir>/<stage>/<digest>/`` where the digest
covers the stage's configuration and the digest of its upstream stage, and
records that digest in ``<output_dir>/<stage>/latest``. Re-running a stage
with unchanged inputs reproduces the same directory byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import digest, file_digest, read_json, read_jsonl, write_json, write_jsonl
from .config import PipelineConfig
from .errors import (
    ConfigurationError, IntegrityError, MissingArtifactError, PlanningError, SamplingError,
    TransportError, ValidationError,
)

log = logging.getLogger("svirisk")

EXIT_OK, EXIT_FAILURE, EXIT_VALIDATION, EXIT_MISSING, EXIT_PROVIDER = 0, 1, 2, 3, 4
STAGES = ("ingest", "plan", "acquire", "manifest", "split", "tune", "train", "eval", "explain", "report")
UPSTREAM = {
    "plan": "ingest", "acquire": "plan", "manifest": "acquire", "split": "manifest",
    "tune": "split", "train": "split", "eval": "train", "explain": "train", "report": "eval",
}


class Stage:
    """Resolves upstream outputs and publishes this stage's content-addressed directory."""

    def __init__(self, cfg: PipelineConfig, name: str, key: dict):
        self.cfg = cfg
        self.name = name
        self.base = cfg.path("output_dir") / name
        self.config_hash = digest({"stage": name, "key": key, "seed": cfg.seed})
        self.dir = self.base / self.config_hash

    @staticmethod
    def latest(cfg: PipelineConfig, name: str, needed_by: str) -> Path:
        marker = cfg.path("output_dir") / name / "latest"
        if not marker.exists():
            raise MissingArtifactError(
                f"`{needed_by}` needs the output of `{name}`; run `svirisk {name}` first", required_command=name
            )
        path = marker.parent / marker.read_text().strip()
        if not path.exists():
            raise MissingArtifactError(f"{path} is missing; re-run `svirisk {name}`", required_command=name)
        return path

    def meta(self, **extra) -> dict:
        return {"stage": self.name, "config_hash": self.config_hash, "version": __version__, **extra}

    def publish(self) -> Path:
        self.base.mkdir(parents=True, exist_ok=True)
        (self.base / "latest").write_text(self.config_hash + "\n")
        log.info("%s -> %s", self.name, self.dir)
        return self.dir


def _dir_digest(path: Path) -> str:
    return path.name


# ---------------------------------------------------------------- ingest

def cmd_ingest(cfg: PipelineConfig, args) -> Path:
    from .geodata import merge_health_geometry, read_geojson, read_health_csv, write_records_jsonl

    cfg.validate_inputs()
    crs = args.crs or cfg["paths"]["geojson_crs"]
    key = {
        "health": file_digest(cfg.path("health_csv")),
        "geometry": file_digest(cfg.path("geojson")),
        "crs": crs,
    }
    stage = Stage(cfg, "ingest", key)
    merged = merge_health_geometry(read_health_csv(cfg.path("health_csv")), read_geojson(cfg.path("geojson"), crs))
    write_records_jsonl(merged.records, stage.dir / "records.jsonl", meta=stage.meta())
    write_json(stage.dir / "merge_report.json", stage.meta(
        records=len(merged.records),
        unmatched_health=merged.unmatched_health,
        unmatched_geometry=merged.unmatched_geometry,
    ))
    if merged.unmatched:
        log.warning("%d neighborhood code(s) could not be matched", len(merged.unmatched))
    return stage.publish()


def _records(cfg, needed_by):
    from .geodata import read_records_jsonl

    return read_records_jsonl(Stage.latest(cfg, "ingest", needed_by) / "records.jsonl")


# ---------------------------------------------------------------- plan

def _plan_settings(cfg, args):
    plan = dict(cfg["plan"])
    if getattr(args, "max_attempts", None):
        plan["max_attempts"] = args.max_attempts
    if getattr(args, "months", None):
        plan["months"] = args.months
    if getattr(args, "quota_override", None):
        plan["quota_overrides"] = list(plan["quota_overrides"]) + list(args.quota_override)
    from .svi_client import MonthWindow

    MonthWindow.parse(plan["months"])
    return plan


def cmd_plan(cfg: PipelineConfig, args) -> Path:
    from .sampler import (
        QuotaPlan, SamplePoint, class_populations, neighborhood_rng, planned_image_counts,
        sample_point_in_polygon, select_neighborhoods,
    )

    upstream = Stage.latest(cfg, "ingest", "plan")
    settings = _plan_settings(cfg, args)
    records = _records(cfg, "plan")
    stage = Stage(cfg, "plan", {"upstream": _dir_digest(upstream), "plan": settings})
    plan = QuotaPlan().with_overrides(settings["quota_overrides"])
    selection = select_neighborhoods(records, plan, cfg.seed)
    counts = planned_image_counts(selection, plan)
    rows = []
    for c in sorted(selection.selected):
        for rec in selection.selected[c]:
            rng = neighborhood_rng(cfg.seed, rec.code)
            for slot in range(plan.images_per_neighborhood[c]):
                pt = sample_point_in_polygon(rec.polygon, rng)
                rows.append(dict(SamplePoint(rec.code, pt, 0, "planned", slot).to_dict(), risk_class=c))
    write_jsonl(stage.dir / "plan.jsonl", rows, meta=stage.meta())
    write_json(stage.dir / "plan.json", stage.meta(
        quota=plan.to_dict(),
        settings=settings,
        populations={str(k): v for k, v in class_populations(records).items()},
        selected={str(c): [r.code for r in v] for c, v in selection.selected.items()},
        pool={str(c): [r.code for r in v] for c, v in selection.pool.items()},
        planned_images={str(k): v for k, v in counts.items()},
        total_images=sum(counts.values()),
    ))
    print(f"planned images per class: {dict(counts)}; total {sum(counts.values())}")
    return stage.publish()


# ---------------------------------------------------------------- acquire

def make_provider(cfg: PipelineConfig, records=None):
    from .svi_client import HttpProvider, MockProvider

    p = cfg["provider"]
    if p["kind"] == "mock":
        from .fixtures import scene_color_fn

        return MockProvider(
            seed=cfg.seed, coverage=p["coverage"], official_rate=p["official_rate"],
            color_fn=scene_color_fn(records) if records is not None else None,
        )
    if p["kind"] in ("http", "real"):
        return HttpProvider(p["metadata_url"], p["image_url"], official_copyright=p["official_copyright"])
    raise ConfigurationError(f"unknown provider kind {p['kind']!r}")


def cmd_acquire(cfg: PipelineConfig, args) -> Path:
    from .sampler import QuotaPlan, RetryPolicy, Selection, run_acquisition
    from .svi_client import ImageRequest, MonthWindow, SviClient

    upstream = Stage.latest(cfg, "plan", "acquire")
    plan_doc = read_json(upstream / "plan.json")
    settings = plan_doc["settings"]
    records = {r.code: r for r in _records(cfg, "acquire")}
    stage = Stage(cfg, "acquire", {"upstream": _dir_digest(upstream), "provider": cfg["provider"]})
    plan = QuotaPlan().with_overrides(settings["quota_overrides"])
    selection = Selection(
        {int(c): [records[k] for k in v] for c, v in plan_doc["selected"].items()},
        {int(c): [records[k] for k in v] for c, v in plan_doc["pool"].items()},
    )
    provider = make_provider(cfg, list(records.values()))
    client = SviClient(provider, cfg.path("cache_dir"), MonthWindow.parse(settings["months"]),
                       rate_limit=cfg["provider"]["rate_limit"])
    policy = RetryPolicy(int(settings["max_attempts"]), bool(settings["replacement"]))
    attempts, seen = [], {}

    def probe(coord):
        meta = client.probe_metadata(coord)
        if meta is not None:
            seen[meta.pano_id] = meta
        return meta

    run = run_acquisition(selection, plan, policy, probe, cfg.seed,
                          log=attempts.append, workers=int(settings.get("workers", 1)))
    rows = [dict(a, status="probe_found" if a["found"] else "probe_absent") for a in attempts]
    for code in sorted(run.results):
        res = run.results[code]
        if res.status == "exhausted":
            rows.append({"code": code, "status": "exhausted", "attempts": res.attempts})
    fetched = 0
    for pt in run.found_points():
        req = ImageRequest(pt.coordinate, pano_id=pt.pano_id)
        row = {"code": pt.code, "slot": pt.slot, "lat": pt.coordinate.lat, "lon": pt.coordinate.lon,
               "pano_id": pt.pano_id, "capture_date": pt.capture_date, "attempt_index": pt.attempt_index}
        try:
            client.fetch_image(req, seen[pt.pano_id])
        except IntegrityError as exc:
            rows.append(dict(row, status="fetch_failed", error=str(exc)))
            continue
        path = client.cache_path(pt.pano_id, req.size).relative_to(cfg.path("cache_dir"))
        rows.append(dict(row, status="fetched", image_path=path.as_posix()))
        fetched += 1
    write_jsonl(stage.dir / "acquisition_log.jsonl", rows, meta=stage.meta())
    write_json(stage.dir / "acquisition_summary.json", stage.meta(
        fetched=fetched,
        exhausted=sorted(c for c, r in run.results.items() if r.status == "exhausted"),
        replacement_rounds=[{str(k): v for k, v in r.items()} for r in run.rounds],
        shortfall={str(k): v for k, v in run.shortfall.items()},
        neighborhoods={str(c): len(v) for c, v in run.final_selection.items()},
    ))
    print(f"fetched {fetched} images; exhausted neighborhoods: "
          f"{sum(r.status == 'exhausted' for r in run.results.values())}")
    return stage.publish()


# ---------------------------------------------------------------- manifest / split

def cmd_manifest(cfg: PipelineConfig, args) -> Path:
    from .dataset import build_manifest, write_manifest

    upstream = Stage.latest(cfg, "acquire", "manifest")
    _, log_rows = read_jsonl(upstream / "acquisition_log.jsonl")
    stage = Stage(cfg, "manifest", {"upstream": _dir_digest(upstream)})
    manifest = build_manifest(log_rows, _records(cfg, "manifest"))
    write_manifest(manifest.entries, stage.dir / "manifest.jsonl", meta=stage.meta(image_root=str(cfg["paths"]["cache_dir"])))
    write_json(stage.dir / "class_counts.json", stage.meta(class_counts={str(k): v for k, v in manifest.class_counts.items()}))
    print(f"manifest: {len(manifest)} images, per class {manifest.class_counts}")
    return stage.publish()


def cmd_split(cfg: PipelineConfig, args) -> Path:
    from .dataset import SplitSpec, read_manifest, split_manifest, write_manifest

    upstream = Stage.latest(cfg, "manifest", "split")
    s = dict(cfg["split"])
    if args.stratify:
        s["stratify"] = True
    stage = Stage(cfg, "split", {"upstream": _dir_digest(upstream), "split": s})
    spec = SplitSpec(s["train_frac"], s["val_frac"], s["test_frac"], cfg.seed, s["stratify"], s["by_neighborhood"])
    entries = split_manifest(read_manifest(upstream / "manifest.jsonl"), spec)
    write_manifest(entries, stage.dir / "manifest.jsonl", meta=stage.meta())
    sizes = {name: sum(e.split == name for e in entries) for name in ("train", "val", "test")}
    write_json(stage.dir / "split_sizes.json", stage.meta(sizes=sizes))
    print(f"split sizes: {sizes}")
    return stage.publish()


def _manifest_source(cfg, args, needed_by):
    if getattr(args, "manifest", None):
        path = Path(args.manifest)
        if not path.exists():
            raise ValidationError(f"manifest {path} does not exist")
        return path, file_digest(path)
    upstream = Stage.latest(cfg, "split", needed_by)
    return upstream / "manifest.jsonl", _dir_digest(upstream)


def _datasets(cfg, entries, train_mode_for_train=True):
    from .dataset import ManifestDataset

    root = cfg.path("cache_dir")
    cache = len(entries) <= 2000
    by = {s: [e for e in entries if e.split == s] for s in ("train", "val", "test")}
    return {
        "train": ManifestDataset(by["train"], root, train=train_mode_for_train, seed=cfg.seed, cache=cache),
        "val": ManifestDataset(by["val"], root, cache=cache),
        "test": ManifestDataset(by["test"], root, cache=cache),
    }


# ---------------------------------------------------------------- tune / train

def _train_config(cfg, args=None):
    from .model_train import TrainConfig

    d = dict(cfg["train"])
    if args is not None and getattr(args, "config", None):
        d.update(read_json(args.config))
    d.setdefault("seed", cfg.seed)
    return TrainConfig.from_dict(d)


def cmd_tune(cfg: PipelineConfig, args) -> Path:
    from .dataset import ManifestDataset, read_manifest, tuning_subsets
    from .model_train import grid_search

    path, src = _manifest_source(cfg, args, "tune")
    t = dict(cfg["tune"])
    grid = read_json(args.grid) if args.grid else t["grid"]
    base = _train_config(cfg)
    stage = Stage(cfg, "tune", {"upstream": src, "tune": dict(t, grid=grid), "base": base.to_dict()})
    entries = read_manifest(path)
    tr, va = tuning_subsets(entries, cfg.seed, t["train_frac"], t["val_frac"])
    root = cfg.path("cache_dir")
    from .model_train import expand_grid

    configs = expand_grid(grid, base)
    results = grid_search(configs, ManifestDataset(tr, root, train=True, seed=cfg.seed, cache=True),
                          ManifestDataset(va, root, cache=True), epochs=int(t["epochs"]))
    write_json(stage.dir / "tune.json", stage.meta(
        results=[r.to_dict() for r in results], best=results[0].config.to_dict(),
        subset_sizes={"train": len(tr), "val": len(va)},
    ))
    for r in results:
        print(json.dumps(r.as_row()))
    return stage.publish()


def cmd_train(cfg: PipelineConfig, args) -> Path:
    from .dataset import read_manifest
    from .model_train import TrainConfig, build_from_config, finetune, save_checkpoint

    path, src = _manifest_source(cfg, args, "train")
    config = _train_config(cfg, args)
    tuned = None
    if cfg["tune"]["use_best"] and not getattr(args, "config", None):
        best = read_json(Stage.latest(cfg, "tune", "train") / "tune.json")["best"]
        tuned = best
        config = replace(TrainConfig.from_dict(best), max_epochs=config.max_epochs, patience=config.patience)
    stage = Stage(cfg, "train", {"upstream": src, "train": config.to_dict(), "weights": args.weights})
    ds = _datasets(cfg, read_manifest(path))
    model = build_from_config(config, weights_path=args.weights)

    def progress(epoch, h):
        log.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f",
                 epoch, h.train_loss[-1], h.val_loss[-1], h.val_accuracy[-1])

    history, best_state = finetune(model, config, ds["train"], ds["val"], on_epoch=progress)
    model.load_state_dict(best_state)
    save_checkpoint(stage.dir / "model.pt", model, config, history,
                    extra={"stage_hash": stage.config_hash, "manifest": str(path), "tuned_from": tuned})
    print(f"trained {history.stopped_epoch} epochs; best epoch {history.best_epoch} "
          f"(val loss {history.val_loss[history.best_epoch - 1]:.4f})")
    return stage.publish()


def _checkpoint(cfg, args, needed_by):
    if getattr(args, "checkpoint", None):
        p = Path(args.checkpoint)
        if not p.exists():
            raise MissingArtifactError(f"checkpoint {p} not found; run `svirisk train` first", "train")
        return p, file_digest(p)
    upstream = Stage.latest(cfg, "train", needed_by)
    return upstream / "model.pt", _dir_digest(upstream)


# ---------------------------------------------------------------- eval / explain / report

def cmd_eval(cfg: PipelineConfig, args) -> Path:
    from .dataset import read_manifest
    from .evaluation import predict, render_confusion_matrix, report_from_predictions
    from .model_train import load_checkpoint

    ckpt, ck_src = _checkpoint(cfg, args, "eval")
    path, src = _manifest_source(cfg, args, "eval")
    split = args.split
    stage = Stage(cfg, "eval", {"checkpoint": ck_src, "manifest": src, "split": split})
    model, config, _ = load_checkpoint(ckpt)
    entries = read_manifest(path)
    ds = _datasets(cfg, entries)[split]
    if len(ds) == 0:
        raise ValidationError(f"split {split!r} is empty")
    probs, labels = predict(model, ds)
    report = report_from_predictions(probs, labels)
    write_json(stage.dir / "eval_report.json", stage.meta(
        model=config.arch.display_name, split=split, report=report.to_dict(),
    ))
    render_confusion_matrix(report.confusion_matrix, stage.dir / "confusion_matrix.png",
                            title=f"{config.arch.display_name} ({split})")
    write_jsonl(stage.dir / "predictions.jsonl", (
        {"image_path": e.image_path, "label": int(y), "probs": [round(float(p), 8) for p in pr]}
        for e, y, pr in zip(ds.entries, labels, probs)
    ), meta=stage.meta())
    print(report.summary())
    return stage.publish()


def cmd_explain(cfg: PipelineConfig, args) -> Path:
    import torch

    from .dataset import denormalize, read_manifest
    from .evaluation import predict, top_confident_true_positives
    from .geodata import RISK_CLASSES
    from .model_train import load_checkpoint
    from .xai import (
        RolloutConfig, attention_rollout, collect_attention, gradient_rollout, render_overlay,
        shap_gradient_explain,
    )

    e = dict(cfg["explain"])
    for opt, key in (("top_k", "top_k"), ("discard", "discard_ratio"), ("fusion", "fusion")):
        if getattr(args, opt, None) is not None:
            e[key] = getattr(args, opt)
    ckpt, ck_src = _checkpoint(cfg, args, "explain")
    path, src = _manifest_source(cfg, args, "explain")
    stage = Stage(cfg, "explain", {"checkpoint": ck_src, "manifest": src, "explain": e})
    model, config, _ = load_checkpoint(ckpt)
    ds = _datasets(cfg, read_manifest(path), train_mode_for_train=False)
    target = ds[e["split"]]
    probs, labels = predict(model, target)
    chosen = top_confident_true_positives(probs, labels, refs=range(len(target)), k=int(e["top_k"]))
    train = ds["train"]
    rng = np.random.default_rng(cfg.seed)
    bg_idx = np.sort(rng.choice(len(train), size=min(int(e["background"]), len(train)), replace=False))
    background = torch.stack([train[int(i)][0] for i in bg_idx])
    rollout_cfg = RolloutConfig(e["fusion"], float(e["discard_ratio"]))
    is_vit = config.family == "vit_deit"
    model_name = config.arch.display_name.replace(" ", "_").lower()
    text = {"config_hash": stage.config_hash}
    index = []
    for c in sorted(chosen):
        for rank, ex in enumerate(chosen[c], start=1):
            x, _ = target[ex.ref]
            image = np.clip(denormalize(x.numpy()).transpose(1, 2, 0), 0, 1)
            out_dir = stage.dir / model_name / RISK_CLASSES[c]
            item = {"class": RISK_CLASSES[c], "rank": rank, "probability": ex.probability,
                    "image_path": target.entries[ex.ref].image_path, "files": {}}
            attr = shap_gradient_explain(model, x, background, c, n_samples=int(e["shap_samples"]),
                                         seed=cfg.seed, output=e["shap_output"])
            f = render_overlay(image, attr.channel_sum(), "signed_diverging", out_dir / f"{rank:02d}_shap.png", text=text)
            item["files"]["shap"] = f.relative_to(stage.dir).as_posix()
            if is_vit:
                attns, grads = collect_attention(model, x, target_class=c)
                for kind, mask in (("rollout", attention_rollout(attns, rollout_cfg)),
                                   ("grad_rollout", gradient_rollout(attns, grads, c, rollout_cfg))):
                    f = render_overlay(image, mask.grid, "heat_overlay", out_dir / f"{rank:02d}_{kind}.png", text=text)
                    item["files"][kind] = f.relative_to(stage.dir).as_posix()
            index.append(item)
    write_json(stage.dir / "index.json", stage.meta(
        model=config.arch.display_name, split=e["split"], settings=e,
        background=[train.entries[int(i)].image_path for i in bg_idx],
        explanations=index,
    ))
    counts = {RISK_CLASSES[c]: len(v) for c, v in chosen.items()}
    print(f"explained top-{e['top_k']} true positives per class: {counts}")
    return stage.publish()


def cmd_report(cfg: PipelineConfig, args) -> Path:
    ev = Stage.latest(cfg, "eval", "report")
    ex = Stage.latest(cfg, "explain", "report")
    stage = Stage(cfg, "report", {"eval": _dir_digest(ev), "explain": _dir_digest(ex)})
    stage.dir.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(ev / "eval_report.json", stage.dir / "eval_report.json")
    shutil.copyfile(ev / "confusion_matrix.png", stage.dir / "confusion_matrix.png")
    index = read_json(ex / "index.json")
    for item in index["explanations"]:
        for rel in item["files"].values():
            dst = stage.dir / "explain" / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(ex / rel, dst)
    write_json(stage.dir / "explain" / "index.json", index)
    report = read_json(ev / "eval_report.json")
    write_json(stage.dir / "summary.json", stage.meta(
        eval_stage=_dir_digest(ev), explain_stage=_dir_digest(ex),
        model=report["model"], report=report["report"], explanations=len(index["explanations"]),
    ))
    print(f"report written to {stage.dir}")
    return stage.publish()


def cmd_fixture(args) -> Path:
    from .fixtures import write_fixture

    cfg = write_fixture(args.out, seed=args.seed)
    print(f"fixture written; run stages with --pipeline {cfg}")
    return cfg


COMMANDS = {
    "ingest": cmd_ingest, "plan": cmd_plan, "acquire": cmd_acquire, "manifest": cmd_manifest,
    "split": cmd_split, "tune": cmd_tune, "train": cmd_train, "eval": cmd_eval,
    "explain": cmd_explain, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svirisk", description=__doc__.splitlines()[0])
    parser.add_argument("--pipeline", default="pipeline.toml", help="pipeline configuration (TOML)")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="merge health statistics with neighborhood geometry")
    p.add_argument("--crs", choices=["EPSG:4326", "EPSG:28992"], help="CRS of the GeoJSON coordinates")

    p = sub.add_parser("plan", help="select neighborhoods and plan image slots per class")
    p.add_argument("--seed", type=int, dest="stage_seed")
    p.add_argument("--max-attempts", type=int)
    p.add_argument("--months", help="capture month window, e.g. 5-9")
    p.add_argument("--quota-override", action="append", metavar="CLASS=COUNT[:IMAGES]")

    sub.add_parser("acquire", help="probe and download imagery for the plan")
    sub.add_parser("manifest", help="build the labeled image manifest")
    p = sub.add_parser("split", help="assign train/val/test splits")
    p.add_argument("--stratify", action="store_true")

    p = sub.add_parser("tune", help="grid search on a 30%%/10%% subset")
    p.add_argument("--grid", help="JSON file mapping option -> list of values")
    p.add_argument("--manifest")

    p = sub.add_parser("train", help="fine-tune with early stopping")
    p.add_argument("--config", help="JSON training configuration")
    p.add_argument("--manifest")
    p.add_argument("--weights", help="local backbone state dict to start from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])

    p = sub.add_parser("explain", help="SHAP and rollout maps for the most confident true positives")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--top-k", type=int)
    p.add_argument("--discard", type=float)
    p.add_argument("--fusion", choices=["mean", "max", "min"])

    sub.add_parser("report", help="bundle evaluation and explanations")

    p = sub.add_parser("fixture", help="write the synthetic desk-scale fixture")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=7, dest="fixture_seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "fixture":
            args.seed = args.fixture_seed
            cmd_fixture(args)
            return EXIT_OK
        cfg = PipelineConfig.load(args.pipeline)
        seed = getattr(args, "stage_seed", None)
        seed = args.seed if seed is None else seed
        if seed is not None:
            cfg.data["seed"] = seed
        COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TransportError, IntegrityError) as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (ValidationError, ConfigurationError, PlanningError, SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
