"""Command-line entry point: ``oncedet <command> --run-dir DIR ...``.

Every artifact of a run lives under one run directory::

    manifest.json            written first, updated by each command
    stage1/extractor.ckpt    stage1/codes.ckpt    stage1/metrics.csv
    stage2/generator.ckpt    stage2/episodes.csv  stage2/val.csv
    registry.json            the deployed registry (base + enrolled classes)
    eval/                    reports, tables, SVG plots
    detect/                  detections JSON + annotated PNGs

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import subprocess
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .codec import BoxAnnotation
from .metrics import precision_recall
from .model import CodeGenerator, SupportSet
from .pipeline import (
    EvalSet,
    build_split,
    load_codes,
    load_extractor,
    load_generator,
    sample_support,
    save_codes,
    save_module,
)
from .registry import Registry, RegistryError, enrol, run_protocol
from .synth import SPLIT_NAMES, blank_scene, export_scenes
from .training import TrainConfig, load_config, meta_train_stage2, train_stage1

log = logging.getLogger("oncedet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
BOX_COLOURS = ["#e6194b", "#3cb44b", "#4363d8", "#ffe119", "#f032e6", "#42d4f4", "#f58231", "#911eb4", "#9a6324"]


class UsageError(Exception):
    """Bad invocation or missing prerequisite; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- run directory


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    manifest = property(lambda self: self.root / "manifest.json")
    extractor = property(lambda self: self.root / "stage1" / "extractor.ckpt")
    codes = property(lambda self: self.root / "stage1" / "codes.ckpt")
    stage1_log = property(lambda self: self.root / "stage1" / "metrics.csv")
    generator = property(lambda self: self.root / "stage2" / "generator.ckpt")
    stage2_log = property(lambda self: self.root / "stage2" / "episodes.csv")
    stage2_val_log = property(lambda self: self.root / "stage2" / "val.csv")
    registry = property(lambda self: self.root / "registry.json")

    def read_manifest(self) -> dict:
        if not self.manifest.exists():
            raise UsageError(f"{self.root} has no manifest.json; run train-base first")
        return json.loads(self.manifest.read_text())

    def write_manifest(self, doc: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
        tmp.replace(self.manifest)

    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.read_manifest()["config"])


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _build_id() -> str:
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class _Record:
    """Appends a command record to the manifest before work starts and finalises it after."""

    def __init__(self, run: RunDir, name: str, argv: Sequence[str], inputs: Sequence[Path] = ()):
        self.run, self.name = run, name
        self.doc = run.read_manifest()
        self.entry = {"command": name, "argv": list(argv), "started": _now(), "status": "running",
                      "inputs": {str(p): _sha256(p) for p in inputs if Path(p).exists()}}
        self.doc.setdefault("commands", []).append(self.entry)
        run.write_manifest(self.doc)

    def finish(self, outputs: Sequence[Path] = (), status: str = "ok", **extra) -> None:
        self.entry.update(status=status, finished=_now(),
                          outputs={str(p): _sha256(p) for p in outputs if Path(p).exists()}, **extra)
        for p in outputs:
            self.doc.setdefault("checkpoints", {})[Path(p).name] = str(p)
        self.run.write_manifest(self.doc)


def _refuse_overwrite(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (pass --force)")


def _require(paths: Sequence[Path], hint: str) -> None:
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"missing {p}; {hint}")


# ---------------------------------------------------------------- commands


def cmd_train_base(args) -> int:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} not found")
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.stage1.epochs = args.epochs
    run = RunDir(args.run_dir)
    _refuse_overwrite([run.manifest, run.extractor, run.codes, run.registry], args.force)
    run.write_manifest({"created": _now(), "build": _build_id(), "seed": cfg.seed, "output_dir": str(run.root),
                        "config_path": str(Path(args.config).resolve()) if args.config else None,
                        "config": cfg.to_dict(), "checkpoints": {}, "commands": []})
    rec = _Record(run, "train-base", sys.argv[1:], [Path(args.config)] if args.config else [])
    split = build_split(cfg, only=("base_train", "base_val"))
    run.extractor.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = train_stage1(split["base_train"], split["base_val"], split.base_ids, cfg.stage1, seed=cfg.seed,
                       log_path=run.stage1_log,
                       on_epoch=lambda e, row: print(f"epoch {e}: loss {row['total']:.4f} val {row['val_loss']:.4f}",
                                                     flush=True))
    save_module(run.extractor, res.extractor, "extractor", {"best_epoch": res.best_epoch})
    names = {c: split.class_names[c] for c in split.base_ids}
    save_codes(run.codes, res.base_codes, res.shared, names)
    Registry.from_base(res.base_codes, res.shared, names, path=run.registry)
    elapsed = time.perf_counter() - t0
    print(f"stage I done in {elapsed:.0f} s: best epoch {res.best_epoch}, val loss "
          f"{res.initial_val_loss:.4f} -> {res.best_val_loss:.4f}")
    print(f"extractor checksum {res.extractor.checksum()}")
    rec.finish([run.extractor, run.codes, run.stage1_log, run.registry], seconds=round(elapsed, 1),
               extractor_checksum=res.extractor.checksum())
    return EXIT_OK


def cmd_meta_train(args) -> int:
    run = RunDir(args.run_dir)
    _require([run.extractor, run.codes], "run train-base first")
    cfg = load_config(args.config) if args.config else run.config()
    if args.episodes is not None:
        cfg.stage2.episodes = args.episodes
    _refuse_overwrite([run.generator], args.force)
    rec = _Record(run, "meta-train", sys.argv[1:], [run.extractor, run.codes])
    extractor = load_extractor(run.extractor)
    before = extractor.checksum()
    _, shared, _ = load_codes(run.codes)
    split = build_split(cfg, only=("base_train", "base_val"))
    generator = CodeGenerator.from_extractor(extractor, np.random.default_rng(cfg.seed))
    run.generator.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def progress(step, row):
        if "val_loss" in row:
            print(f"step {step}: loss {row['total']:.4f} val {row['val_loss']:.4f}", flush=True)

    res = meta_train_stage2(extractor, generator, shared, split["base_train"], split["base_val"], split.base_ids,
                            cfg.stage2, seed=cfg.seed, log_path=run.stage2_log, val_log_path=run.stage2_val_log,
                            on_step=progress)
    if extractor.checksum() != before:
        raise RuntimeError("feature extractor changed during meta-training")
    save_module(run.generator, res.generator, "generator", {"best_step": res.best_step})
    elapsed = time.perf_counter() - t0
    print(f"stage II done in {elapsed:.0f} s: best step {res.best_step}, val loss "
          f"{res.initial_val_loss:.4f} -> {res.best_val_loss:.4f}; extractor checksum unchanged")
    rec.finish([run.generator, run.stage2_log, run.stage2_val_log], seconds=round(elapsed, 1),
               extractor_checksum=before)
    return EXIT_OK


def _support_from_dir(directory: Path, class_id: int, k: Optional[int]) -> SupportSet:
    """Support set from ``<name>.png`` + ``<name>.json`` pairs (Detection-schema box records)."""
    from PIL import Image

    samples = []
    for js in sorted(directory.glob("*.json")):
        png = js.with_suffix(".png")
        if not png.exists():
            continue
        boxes = [BoxAnnotation(int(r["class_id"]), *map(float, r["bbox"])) for r in json.loads(js.read_text())]
        boxes = [b for b in boxes if b.class_id == class_id]
        if boxes:
            img = np.asarray(Image.open(png).convert("RGB"), dtype=np.float32) / 255.0
            samples.append((img, boxes))
    if k is not None:
        kept, n = [], 0
        for img, boxes in samples:
            if n >= k:
                break
            kept.append((img, boxes[: k - n]))
            n += len(kept[-1][1])
        samples = kept
    if not samples:
        raise UsageError(f"no boxes of class {class_id} found in {directory}")
    return SupportSet(class_id, samples)


def cmd_enrol(args) -> int:
    run = RunDir(args.run_dir)
    _require([run.generator, run.registry], "run train-base and meta-train first")
    cfg = run.config()
    rec = _Record(run, "enrol", sys.argv[1:], [run.generator, run.registry])
    if args.synthetic:
        class_id, k = args.synthetic
        split = build_split(cfg, only=("novel_support_pool",))
        if class_id not in split.class_names:
            raise UsageError(f"class {class_id} is not in the synthetic roster")
        seed = cfg.seed if args.seed is None else args.seed
        support = sample_support(split["novel_support_pool"], class_id, k, np.random.default_rng([seed, class_id, k]))
        name = args.name or split.class_names[class_id]
    else:
        class_id = args.class_id
        support = _support_from_dir(Path(args.support_dir), class_id, args.shots)
        name = args.name or f"class-{class_id}"
    generator = load_generator(run.generator)
    registry = Registry.load(run.registry)
    gen_before = generator.checksum()
    t0 = time.perf_counter()
    try:
        enrol(registry, class_id, support, generator, name=name, replace=args.replace)
    except RegistryError as exc:
        rec.finish(status="error", error=str(exc))
        raise UsageError(str(exc)) from exc
    wall = time.perf_counter() - t0
    assert generator.checksum() == gen_before
    code_sum = registry.entry(class_id).code.checksum()
    print(f"enrolled class {class_id} ({name}) from {support.num_boxes} boxes in {wall:.3f} s")
    print(f"code checksum {code_sum}")
    rec.finish([run.registry], wall_seconds=wall, code_checksum=code_sum)
    return EXIT_OK


def _plot_forgetting(series: list[dict], path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = [p["num_enrolled"] for p in series]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(x, [100 * p["all_ap"] for p in series], "o-", label="all classes AP")
    ax.plot(x, [100 * p["all_ar"] for p in series], "s--", label="all classes AR@10")
    ax.plot(x, [100 * p["base_ap"] for p in series], "^:", label="base classes AP")
    ax.set_xlabel("novel classes enrolled")
    ax.set_ylabel("percent")
    ax.set_xticks(x)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _plot_pr(curves: dict[str, tuple[np.ndarray, np.ndarray]], path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    for label, (rec, prec) in curves.items():
        if rec.size:
            ax.step(rec, prec, where="post", label=label)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_eval(args) -> int:
    run = RunDir(args.run_dir)
    _require([run.extractor, run.codes], "run train-base first")
    out = Path(args.out) if args.out else run.root / "eval"
    cfg = run.config()
    extractor = load_extractor(run.extractor)
    base_codes, shared, names = load_codes(run.codes)

    if args.registry:
        registry = Registry.load(args.registry, attach=False)
        targets = [out / f"registry_{args.split}.json"]
        _refuse_overwrite(targets, args.force)
        rec = _Record(run, "eval", sys.argv[1:], [Path(args.registry)])
        split = build_split(cfg, only=(args.split,))
        report = EvalSet(extractor, split[args.split]).evaluate(registry.codes(), registry.shared,
                                                                 registry.group_map())
        out.mkdir(parents=True, exist_ok=True)
        targets[0].write_text(report.to_json())
        print(report.table("registry"))
        rec.finish(targets)
        return EXIT_OK

    _require([run.generator], "run meta-train first")
    mode = {"batch": "incremental_batch", "continual": "continual"}[args.protocol]
    targets = []
    for k in args.shots:
        stem = out / f"{args.protocol}_{k}shot"
        targets += [stem.with_suffix(".json"), stem.with_name(stem.name + "_pr.svg")]
        if mode == "continual":
            targets += [stem.with_suffix(".csv"), stem.with_name(stem.name + "_curve.svg")]
    targets.append(out / f"{args.protocol}_table.txt")
    _refuse_overwrite(targets, args.force)
    rec = _Record(run, "eval", sys.argv[1:], [run.extractor, run.codes, run.generator])
    generator = load_generator(run.generator)
    split = build_split(cfg, only=("novel_support_pool", args.split))
    eval_set = EvalSet(extractor, split[args.split])
    names = {**split.class_names, **names}
    out.mkdir(parents=True, exist_ok=True)
    tables, summary = [], {}
    for k in args.shots:
        rng = np.random.default_rng([cfg.seed, k])
        supports = {c: sample_support(split["novel_support_pool"], c, k, rng) for c in split.novel_ids}
        registry = Registry.from_base(base_codes, shared, names)
        report = run_protocol(mode, registry, supports, generator, eval_set, names)
        stem = out / f"{args.protocol}_{k}shot"
        stem.with_suffix(".json").write_text(report.to_json())
        final = report.final
        tables.append(final.table(f"ONCE {k}-shot"))
        summary[k] = final.groups["novel"].ap50
        dets = eval_set.detections(registry.codes(), registry.shared)
        gts = eval_set.ground_truths(registry.class_ids)
        curves = {f"{names[c]}": precision_recall(dets, gts, c) for c in split.novel_ids}
        _plot_pr(curves, stem.with_name(stem.name + "_pr.svg"), f"novel classes, {k}-shot, IoU 0.5")
        if mode == "continual":
            report.write_csv(stem.with_suffix(".csv"))
            _plot_forgetting(report.series(), stem.with_name(stem.name + "_curve.svg"),
                             f"continual enrolment, {k}-shot")
            report.check_no_forgetting()
            print(f"{k}-shot: {len(report.snapshots)} snapshots, base metrics unchanged at every step")
    body = [tables[0].splitlines()[0], tables[0].splitlines()[1]] + [t.splitlines()[2] for t in tables]
    text = "\n".join(body)
    print(text)
    for k, v in summary.items():
        print(f"{k}-shot novel AP50 {100 * v:.1f}")
    (out / f"{args.protocol}_table.txt").write_text(text + "\n")
    rec.finish(targets, novel_ap50={str(k): v for k, v in summary.items()})
    return EXIT_OK


def _load_image(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        img = Image.open(path).convert("RGB")
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc
    return np.asarray(img, dtype=np.float32) / 255.0


def _annotate(image: np.ndarray, detections, names: dict[int, str], path: Path, scale: int = 4) -> None:
    from PIL import Image, ImageDraw

    canvas = Image.fromarray((image * 255).round().astype(np.uint8)).resize(
        (image.shape[1] * scale, image.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    for d in detections:
        colour = BOX_COLOURS[d.class_id % len(BOX_COLOURS)]
        box = [v * scale for v in d.as_list()]
        draw.rectangle(box, outline=colour, width=2)
        draw.text((box[0] + 2, box[1] + 1), f"{names.get(d.class_id, d.class_id)} {d.score:.2f}", fill=colour)
    canvas.save(path)


def cmd_detect(args) -> int:
    run = RunDir(args.run_dir)
    reg_path = Path(args.registry) if args.registry else run.registry
    _require([run.extractor, reg_path], "run train-base first")
    out = Path(args.out) if args.out else run.root / "detect"
    images = [Path(p) for p in args.images]
    targets = []
    for p in images:
        if not p.is_file():
            raise UsageError(f"image {p} not found")
        targets += [out / f"{p.stem}.detections.json", out / f"{p.stem}.annotated.png"]
    _refuse_overwrite(targets, args.force)
    rec = _Record(run, "detect", sys.argv[1:], [run.extractor, reg_path] + images)
    extractor = load_extractor(run.extractor)
    registry = Registry.load(reg_path, attach=False)
    names = {e.class_id: e.name for e in registry.entries()}
    r = 4 * extractor.stride
    out.mkdir(parents=True, exist_ok=True)
    for p in images:
        image = _load_image(p)
        if image.shape[0] % r or image.shape[1] % r:
            raise UsageError(f"{p}: image size {image.shape[1]}x{image.shape[0]} must be a multiple of {r}")
        dets = registry.detect(extractor, image, args.threshold, args.max_per_class)
        records = [d.to_json(p.name) for d in dets]
        (out / f"{p.stem}.detections.json").write_text(json.dumps(records, indent=1))
        _annotate(image, dets, names, out / f"{p.stem}.annotated.png")
        print(f"{p.name}: {len(dets)} detections")
        for d in dets:
            print(f"  {names.get(d.class_id, d.class_id):<18} {d.score:.3f}  "
                  + " ".join(f"{v:6.1f}" for v in d.as_list()))
    rec.finish(targets)
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    cfg = load_config(args.config) if args.config else TrainConfig()
    cfg.seed = args.seed
    if args.blank:
        scenes = [blank_scene(10_000 + i) for i in range(args.count)]
    else:
        split = build_split(cfg, only=(args.split,))
        scenes = split[args.split][: args.count]
    _refuse_overwrite([out / f"{s.seed}.png" for s in scenes], args.force)
    export_scenes(scenes, out)
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oncedet", description="Few-shot incremental object detection on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, force=True):
        sp.add_argument("--run-dir", required=True, help="run directory holding all artifacts")
        if force:
            sp.add_argument("--force", action="store_true", help="allow overwriting existing outputs")

    sp = sub.add_parser("train-base", help="stage I: train the feature extractor and base codes")
    common(sp)
    sp.add_argument("--config", help="TOML or JSON training config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int, help="override stage1.epochs")
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("meta-train", help="stage II: episodic training of the code generator")
    common(sp)
    sp.add_argument("--config", help="override the config recorded in the manifest")
    sp.add_argument("--episodes", type=int, help="override stage2.episodes")
    sp.set_defaults(func=cmd_meta_train)

    sp = sub.add_parser("enrol", help="add a class to the registry from a few labelled boxes")
    common(sp, force=False)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", nargs=2, type=int, metavar=("CLASS_ID", "K"),
                     help="sample K boxes of CLASS_ID from the synthetic support pool")
    src.add_argument("--support-dir", help="directory of <name>.png + <name>.json box files")
    sp.add_argument("--class-id", type=int, help="class id to read from --support-dir")
    sp.add_argument("--shots", type=int, help="use at most this many boxes from --support-dir")
    sp.add_argument("--name")
    sp.add_argument("--seed", type=int, help="support sampling seed (default: run seed)")
    sp.add_argument("--replace", action="store_true", help="re-enrol a class that is already registered")
    sp.set_defaults(func=cmd_enrol)

    sp = sub.add_parser("eval", help="enrol the novel classes and report AP/AR")
    common(sp)
    sp.add_argument("--protocol", choices=["batch", "continual"], default="batch")
    sp.add_argument("--shots", type=int, nargs="+", default=[5])
    sp.add_argument("--split", choices=SPLIT_NAMES, default="novel_test")
    sp.add_argument("--registry", help="evaluate this registry file as-is instead of running a protocol")
    sp.add_argument("--out", help="output directory (default RUN_DIR/eval)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("detect", help="run the registered classes on images")
    common(sp)
    sp.add_argument("images", nargs="+")
    sp.add_argument("--registry", help="registry file (default RUN_DIR/registry.json)")
    sp.add_argument("--threshold", type=float, default=0.3)
    sp.add_argument("--max-per-class", type=int, default=20)
    sp.add_argument("--out", help="output directory (default RUN_DIR/detect)")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("synth", help="export synthetic scenes as PNG + JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=SPLIT_NAMES, default="novel_test")
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config")
    sp.add_argument("--blank", action="store_true", help="background-only canvases")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "enrol" and args.support_dir and args.class_id is None:
        parser.error("--support-dir needs --class-id")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"oncedet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("oncedet: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failure: report and exit nonzero
        log.debug("failure", exc_info=True)
        print(f"oncedet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
