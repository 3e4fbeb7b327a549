"""Command-line entry point: ``slotlab {synth,train,eval,aggregate,report}``.

Exit status: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import checkpoint, kvfile
from . import evaluate as ev
from . import metrics as mt
from . import model as M
from . import scenes as sc
from . import train as tr

log = logging.getLogger("slotlab")

WEIGHTS = "weights.slbw"
STEP_LOG = "steps.csv"
CONFIG = "config.txt"
RUN_RECORD = "run.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunRecord:
    config: dict
    seed: int
    checkpoint: str
    step_log: str
    report: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> RunRecord:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# data helpers

def load_split(manifest: sc.Manifest) -> tuple[np.ndarray, list[mt.Segmentation], list[str]]:
    images, segs, ids = [], [], []
    for image_id, img_path, seg_path in manifest.paths():
        images.append(sc.read_image(img_path))
        segs.append(sc.read_segmentation(seg_path))
        ids.append(image_id)
    if not images:
        raise sc.FormatError(f"manifest for {manifest.dataset} lists no images")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise sc.FormatError(f"images in {manifest.dataset} differ in size: {sorted(shapes)}")
    return np.stack(images), segs, ids


def _manifest_in(path: Path) -> Path:
    return path / "manifest.json" if path.is_dir() else path


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    overrides = {} if args.seed is None else {"seed": args.seed}
    spec = kvfile.read(sc.SceneSpec, args.spec, overrides) if args.spec else sc.SceneSpec(**overrides)
    out = Path(args.out)
    scenes = sc.generate_dataset(spec, args.count, start=args.start)
    n_slots = args.n_slots or spec.n_slots
    manifest = sc.write_dataset(scenes, out, spec.name, n_slots, start=args.start)
    if args.hires_size:
        hi = [sc.generate_scene(spec, args.start + i, args.hires_size) for i in range(args.count)]
        sc.write_dataset(hi, out / "hires", spec.name, n_slots, start=args.start)
    (out / "scene_spec.txt").write_text(kvfile.dump(spec), encoding="utf-8")
    print(f"wrote {manifest.count} scenes to {out}")
    return 0


def _train_config(args) -> tr.TrainConfig:
    cfg = tr.load_config(args.config) if args.config else tr.TrainConfig()
    updates = {}
    for flag in ("finetune", "improved_hp", "encoder_hp", "hires"):
        v = getattr(args, flag)
        if v is not None:
            updates[flag] = v
    if args.topk is not None:
        updates["topk"] = args.topk or None
    if args.steps is not None:
        updates["total_steps"] = args.steps
        updates["warmup_steps"] = min(cfg.warmup_steps, args.steps)
    if args.seed is not None:
        updates["seed"] = args.seed
    return replace(cfg, **updates)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data = Path(args.data)
    manifest = sc.load_manifest(_manifest_in(data))
    images, _, _ = load_split(manifest)
    if images.shape[1] != images.shape[2]:
        raise sc.FormatError("training images must be square")
    cfg = replace(cfg, image_size=images.shape[1], n_slots=manifest.n_slots)
    hires = None
    if cfg.hires:
        hdir = data / "hires" if data.is_dir() else data.parent / "hires"
        if not (hdir / "manifest.json").exists():
            raise FileNotFoundError(f"hires stage needs {hdir}/manifest.json (synth --hires-size)")
        hires, _, _ = load_split(sc.load_manifest(hdir / "manifest.json"))
        if len(hires) != len(images):
            raise sc.FormatError("hires split has a different number of scenes")
        cfg = replace(cfg, hires_image_size=hires.shape[1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG).write_text(tr.dump_config(cfg), encoding="utf-8")

    def progress(row):
        if row["step"] % args.log_every == 0:
            log.info("step %d loss %.5f grad_norm %.4f", row["step"], row["loss"], row["grad_norm"])

    result = tr.train(cfg, images, hires, progress=progress)
    checkpoint.save_weights(result.params, out / WEIGHTS)
    (out / STEP_LOG).write_text(tr.log_to_csv(result.log), encoding="utf-8")
    record = RunRecord(asdict(cfg), cfg.seed, WEIGHTS, STEP_LOG)
    (out / RUN_RECORD).write_text(record.to_json(), encoding="utf-8")
    if result.collapse_step is not None:
        print(f"warning: target collapse flagged at step {result.collapse_step}", file=sys.stderr)
    print(f"trained {len(result.log)} steps; checkpoint {out / WEIGHTS}")
    return 0


def model_for_checkpoint(params: M.Params, cfg: tr.TrainConfig, image_size: int) -> M.ModelConfig:
    """Model config matching the stored weights, re-gridded to ``image_size`` if needed."""
    n = params["encoder.pos_embed"].shape[0]
    side = math.isqrt(n)
    if side * side != n:
        raise sc.FormatError(f"checkpoint position embeddings ({n}) do not form a square grid")
    mcfg = cfg.model_config(side * cfg.patch_size)
    if image_size != mcfg.encoder.image_size:
        mcfg = M.resize_model_grid(params, mcfg, image_size)
    return mcfg


def _read_predictions(pred_dir: Path, ids: list[str]) -> list[mt.Segmentation]:
    out = []
    for image_id in ids:
        path = pred_dir / f"{image_id}.seg.bin"
        if not path.exists():
            raise FileNotFoundError(f"missing prediction {path}")
        out.append(sc.read_segmentation(path))
    return out


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.predictions is None):
        raise UsageError("eval: give exactly one of --checkpoint or --predictions")
    manifest = sc.load_manifest(_manifest_in(Path(args.manifest)))
    images, gts, ids = load_split(manifest)
    if args.predictions is not None:
        preds = _read_predictions(Path(args.predictions), ids)
    else:
        ckpt = Path(args.checkpoint)
        cfg_path = Path(args.config) if args.config else ckpt.parent / CONFIG
        cfg = tr.load_config(cfg_path)
        if manifest.n_slots != cfg.n_slots:
            # the slot count is a protocol setting of the dataset, so the manifest wins
            cfg = replace(cfg, n_slots=manifest.n_slots, topk=min(cfg.topk, manifest.n_slots) if cfg.topk else None)
        params = checkpoint.load_weights(ckpt)
        mcfg = model_for_checkpoint(params, cfg, images.shape[1])
        seed = cfg.seed if args.seed is None else args.seed
        preds = ev.predict_segmentations(images, mcfg, params, seed, size=(gts[0].height, gts[0].width), topk=cfg.topk)
        if args.save_predictions:
            pdir = Path(args.save_predictions)
            pdir.mkdir(parents=True, exist_ok=True)
            for image_id, p in zip(ids, preds):
                sc.write_segmentation(p, pdir / f"{image_id}.seg.bin")
    panoptic = [sc.scene_panoptic(g) for g in gts]
    report = ev.evaluate(preds, gts, manifest.dataset, ids, panoptic, args.mbo_direction)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(), encoding="utf-8")
    out.with_suffix(".json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    if args.checkpoint is not None:
        rec_path = Path(args.checkpoint).parent / RUN_RECORD
        if rec_path.exists():
            rec = RunRecord.load(rec_path)
            rec.report = str(out.resolve())
            rec_path.write_text(rec.to_json(), encoding="utf-8")
    for name, value in report.means().items():
        print(f"{name}\t{value:.6f}")
    return 0


def load_report(path) -> mt.MetricReport:
    path = Path(path)
    summary = path.with_suffix(".json")
    if path.suffix == ".json":
        raise UsageError(f"expected a report CSV, got {path}")
    dataset, count = path.stem, None
    if summary.exists():
        doc = json.loads(summary.read_text(encoding="utf-8"))
        dataset, count = doc.get("dataset", dataset), doc.get("count")
    return mt.MetricReport.from_csv(path.read_text(encoding="utf-8"), dataset, count)


def cmd_aggregate(args) -> int:
    reports = [load_report(p) for p in args.reports]
    summaries = [r.summary() for r in reports]
    agg = mt.aggregate_per_sample(summaries)
    mt.write_summary(args.out, summaries, agg)
    for name, value in agg.items():
        print(f"{name}\t{value:.6f}")
    return 0


def bar_chart_svg(title: str, labels: list[str], values: list[float], width: int = 480,
                  bar_height: int = 22) -> str:
    """Horizontal bars for values in [0, 1] (rect and text elements only)."""
    left, top, gap = 140, 36, 8
    span = width - left - 60
    height = top + len(labels) * (bar_height + gap) + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="10" y="22" font-family="sans-serif" font-size="14">{escape(title)}</text>']
    for i, (lab, v) in enumerate(zip(labels, values)):
        y = top + i * (bar_height + gap)
        shown = 0.0 if math.isnan(v) else min(max(v, 0.0), 1.0)
        parts.append(f'<text x="{left - 6}" y="{y + bar_height - 6}" font-family="sans-serif" '
                     f'font-size="12" text-anchor="end">{escape(lab)}</text>')
        parts.append(f'<rect x="{left}" y="{y}" width="{shown * span:.2f}" height="{bar_height}" fill="#4a7ab5"/>')
        parts.append(f'<text x="{left + shown * span + 4:.2f}" y="{y + bar_height - 6}" '
                     f'font-family="sans-serif" font-size="12">{"nan" if math.isnan(v) else f"{v:.3f}"}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(args) -> int:
    reports = [load_report(p) for p in args.reports]
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.reports]
    if len(labels) != len(reports):
        raise UsageError("report: --labels must name every report")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics: list[str] = []
    for r in reports:
        metrics += [m for m in r.metric_names() if m not in metrics]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "metric", "mean", "count", "skipped"])
    for lab, r in zip(labels, reports):
        for m in metrics:
            w.writerow([lab, m, repr(r.mean(m)), r.count, r.skipped(m)])
    (out / "comparison.csv").write_text(buf.getvalue(), encoding="utf-8")
    for m in metrics:
        svg = bar_chart_svg(m, labels, [r.mean(m) for r in reports])
        (out / f"{m}.svg").write_text(svg, encoding="utf-8")
    print(f"wrote comparison.csv and {len(metrics)} charts to {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slotlab", description="Slot-attention object discovery on synthetic scenes.")
    p.add_argument("--seed", type=int, default=None, help="global seed for every random stream")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="render synthetic scenes and a manifest")
    s.add_argument("--spec", help="scene spec file (key = value)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--start", type=int, default=0, help="index of the first scene")
    s.add_argument("--n-slots", type=int, default=None, help="slot count recorded in the manifest")
    s.add_argument("--hires-size", type=int, default=0, help="also render the scenes at this size under hires/")

    t = sub.add_parser("train", help="train a model on a synthetic split")
    t.add_argument("--config", help="training config file (key = value)")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--out", required=True)
    bool_flag = argparse.BooleanOptionalAction
    t.add_argument("--finetune", action=bool_flag, default=None, help="train the encoder")
    t.add_argument("--improved-hp", dest="improved_hp", action=bool_flag, default=None)
    t.add_argument("--encoder-hp", dest="encoder_hp", action=bool_flag, default=None)
    t.add_argument("--topk", type=int, default=None, help="decode only the top K slots per patch (0 = all)")
    t.add_argument("--hires", action=bool_flag, default=None, help="run the high-resolution stage")
    t.add_argument("--steps", type=int, default=None, help="override total_steps")
    t.add_argument("--log-every", type=int, default=250)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="directory of NNNN.seg.bin predictions")
    e.add_argument("--config", help="config used for the checkpoint (default: next to it)")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True, help="per-image report CSV; a .json summary is written alongside")
    e.add_argument("--mbo-direction", choices=("gt", "pred"), default="gt")
    e.add_argument("--save-predictions", help="write predicted segmentations to this directory")

    a = sub.add_parser("aggregate", help="dataset-size-weighted mean over reports")
    a.add_argument("--reports", nargs="+", required=True)
    a.add_argument("--out", required=True)

    r = sub.add_parser("report", help="comparison CSV and SVG bar charts")
    r.add_argument("--reports", nargs="+", required=True)
    r.add_argument("--labels", help="comma-separated run labels")
    r.add_argument("--out", required=True, help="output directory")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "aggregate": cmd_aggregate, "report": cmd_report}


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("slotlab: missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (tr.TrainingError, sc.FormatError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"slotlab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())
