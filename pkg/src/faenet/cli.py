"""``faenet`` command line: gradcheck, synth, train, eval, ablate, detect.

Every subcommand reads one JSON run configuration (``--config``), applies
flag overrides (``--seed``, ``--set section.key=value``; flags win), and
writes the fully resolved configuration to ``<out>/resolved_config.json``.
A lock file keeps a second writer out of the same output directory.

Exit codes: 0 success, 1 a check failed, 2 bad configuration or input,
3 the run itself failed (divergence, output directory busy).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as Dt
from . import detector as D
from . import evaluation as E
from . import gradsuite
from . import tensor as T
from . import train as TR
from .detector import ConfigError, DetectorConfig

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_RUN_FAILED = 0, 1, 2, 3
LOCK_NAME = ".faenet.lock"
RESOLVED_NAME = "resolved_config.json"

PRESETS = {"mini": D.mini_config, "full": D.full_config}
EVAL_DEFAULTS = {"conf_threshold": 0.01, "nms_iou": 0.45, "top_k": 200, "interpolation": "all_point"}
GRADCHECK_DEFAULTS = {"tolerance": 1e-3}
DETECT_DEFAULTS = {"score_threshold": 0.3}
SYNTH_DEFAULTS = {"num_images": 500}
TOP_KEYS = ("seed", "detector", "synth", "eval_images", "train", "eval", "gradcheck", "detect")


class RunFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Everything one invocation needs, resolved from defaults, a config file and flags.

    ``detector`` is a preset name (``"mini"`` or ``"full"``), a preset with
    overrides (``{"preset": "mini", "fam_width": 16}``), or a complete
    detector config.  Preset class and channel counts follow the synthetic
    dataset.  The eval split is samples ``num_images .. num_images +
    eval_images - 1`` of the same generator, so it never overlaps training.
    """

    seed: int = 0
    detector: DetectorConfig = None
    synth: Dt.SynthSpec = None
    eval_images: int = 100
    train: TR.TrainConfig = None
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))
    gradcheck: dict = field(default_factory=lambda: dict(GRADCHECK_DEFAULTS))
    detect: dict = field(default_factory=lambda: dict(DETECT_DEFAULTS))

    @property
    def model(self) -> DetectorConfig:
        """The detector with the training toggles applied."""
        t = self.train
        return self.detector.with_toggles(t.use_sfe, t.use_dfe, t.use_fam)

    def to_dict(self) -> dict:
        synth = self.synth.to_dict()
        synth.pop("seed")
        train = self.train.to_dict()
        train.pop("seed")
        return {"seed": self.seed, "detector": self.detector.to_dict(), "synth": synth,
                "eval_images": self.eval_images, "train": train, "eval": dict(self.eval),
                "gradcheck": dict(self.gradcheck), "detect": dict(self.detect)}


def _section(doc: dict, key: str, defaults: dict | None = None) -> dict:
    value = doc.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    if "seed" in value:
        raise ConfigError(f"{key}.seed is not configurable; set the top-level seed")
    if defaults is not None:
        unknown = set(value) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown {key} config keys: {sorted(unknown)}")
        return {**defaults, **value}
    return value


def _detector_config(spec, synth: Dt.SynthSpec) -> DetectorConfig:
    derived = {"num_classes": synth.num_classes, "in_channels": synth.channels}
    if isinstance(spec, str):
        spec = {"preset": spec}
    if not isinstance(spec, dict):
        raise ConfigError("detector must be a preset name or an object")
    if "preset" not in spec:
        return DetectorConfig.from_dict(spec)
    overrides = dict(spec)
    name = overrides.pop("preset")
    if name not in PRESETS:
        raise ConfigError(f"unknown detector preset {name!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[name]().to_dict()
    return DetectorConfig.from_dict({**base, **derived, **overrides})


def resolve_config(doc: dict | None = None, seed: int | None = None) -> RunConfig:
    doc = dict(doc or {})
    unknown = set(doc) - set(TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}; allowed: {list(TOP_KEYS)}")
    root = doc.get("seed", 0) if seed is None else seed
    if not isinstance(root, int) or isinstance(root, bool) or root < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {root!r}")
    try:
        synth = Dt.SynthSpec(**{**SYNTH_DEFAULTS, **_section(doc, "synth"), "seed": root})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"synth: {e}") from None
    det = _detector_config(doc.get("detector", "mini"), synth)
    if det.input_size != synth.image_size or det.in_channels != synth.channels:
        raise ConfigError(f"synth images are {synth.channels}x{synth.image_size}^2 but the detector expects "
                          f"{det.in_channels}x{det.input_size}^2")
    if det.num_classes != synth.num_classes:
        raise ConfigError(f"detector has {det.num_classes} classes, the dataset {synth.num_classes} (with background)")
    try:
        train = TR.TrainConfig.from_dict({**_section(doc, "train"), "seed": root})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from None
    ev = _section(doc, "eval", EVAL_DEFAULTS)
    if ev["interpolation"] not in E.INTERPOLATIONS:
        raise ConfigError(f"eval.interpolation must be one of {E.INTERPOLATIONS}")
    eval_images = doc.get("eval_images", 100)
    if not isinstance(eval_images, int) or eval_images < 0:
        raise ConfigError(f"eval_images must be a non-negative integer, got {eval_images!r}")
    return RunConfig(root, det, synth, eval_images, train, ev, _section(doc, "gradcheck", GRADCHECK_DEFAULTS),
                     _section(doc, "detect", DETECT_DEFAULTS))


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def load_run_config(path, seed: int | None = None, overrides=()) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for text in overrides:
        keys, value = _parse_override(text)
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {text}: {k!r} is not a section")
        node[keys[-1]] = value
    return resolve_config(doc, seed)


# ---------------------------------------------------------------------------
# output directory handling


@contextmanager
def locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunFailed(f"{out_dir} is in use by another run (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _echo_config(out: Path, run: RunConfig) -> None:
    _dump(out / RESOLVED_NAME, run.to_dict())


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _progress(rec: dict) -> None:
    if rec["kind"] == "eval":
        _err(f"epoch {rec['epoch']}: mAP {rec['map']:.4f}")


# ---------------------------------------------------------------------------
# datasets


def _manifest(path: Path, split: str) -> Path:
    if path.is_file():
        return path
    for cand in (path / split / "manifest.jsonl", path / "manifest.jsonl"):
        if cand.is_file():
            return cand
    raise ConfigError(f"no manifest for the {split} split under {path}")


def _split(run: RunConfig, data: str | None, split: str) -> tuple[list[str], list[Dt.Sample]]:
    """Class names and samples of one split, loaded from ``data`` or generated from the config."""
    if data is None:
        spec = run.synth
        if split == "train":
            return list(spec.classes), Dt.generate(spec)
        return list(spec.classes), Dt.generate(spec, spec.num_images, run.eval_images)
    return Dt.load_dataset(_manifest(Path(data), split))


def _check_model_inputs(cfg: DetectorConfig, classes, samples) -> None:
    if len(classes) + 1 != cfg.num_classes:
        raise ConfigError(f"dataset has {len(classes)} classes, the detector {cfg.num_classes - 1}")
    want = (cfg.in_channels, cfg.input_size, cfg.input_size)
    for s in samples:
        if s.image.shape != want:
            raise ConfigError(f"image {s.image_id} is {s.image.shape}, the detector expects {want}")


def _load_model(args, run: RunConfig | None):
    """Detector from ``--checkpoint``; with ``--config`` the fingerprints must agree."""
    expected = None if run is None else run.model.fingerprint()
    ckpt = TR.load_checkpoint(args.checkpoint, expected)
    cfg = DetectorConfig.from_dict(ckpt.metadata["detector_config"])
    det = D.build_detector(cfg, ckpt.metadata.get("seed", 0))
    TR.restore(det, ckpt)
    return det.eval(), ckpt


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(run: RunConfig, tolerance: float | None = None, only=None, out: Path | None = None) -> int:
    tol = run.gradcheck["tolerance"] if tolerance is None else tolerance
    try:
        results = gradsuite.run_suite(tol, only or None)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from None
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        where = "" if r.passed else f" (worst tensor {r.report.worst})"
        print(f"{status} {r.name:22s} max_rel_err={r.report.max_error:.3e} tol={tol:g}{where}")
    failed = [r.name for r in results if not r.passed]
    if out is not None:
        _dump(out / "gradcheck.json", {"tolerance": tol, "checks": [r.to_dict() for r in results]})
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def cmd_synth(run: RunConfig, out: Path) -> int:
    spec = run.synth
    Dt.write_dataset(Dt.generate(spec), out / "train", spec.classes)
    Dt.write_dataset(Dt.generate(spec, spec.num_images, run.eval_images), out / "eval", spec.classes)
    print(f"wrote {spec.num_images} train and {run.eval_images} eval images under {out}")
    return EXIT_OK


def _write_report(out: Path, report: E.EvalReport, class_names) -> None:
    _dump(out / "eval_report.json", report.to_dict(class_names))
    curves = out / "pr_curves"
    curves.mkdir(exist_ok=True)
    for c, pr in sorted(report.pr_curves.items()):
        name = class_names[c - 1] if c - 1 < len(class_names) else str(c)
        rows = ["recall\tprecision"] + [f"{r!r}\t{p!r}" for r, p in zip(pr["recall"], pr["precision"])]
        (curves / f"{c:02d}_{name}.tsv").write_text("\n".join(rows) + "\n")


def cmd_train(run: RunConfig, out: Path, data: str | None = None, resume: str | None = None) -> int:
    classes, train_set = _split(run, data, "train")
    _, eval_set = _split(run, data, "eval")
    _check_model_inputs(run.model, classes, train_set + eval_set)
    if resume is None:
        # a fresh run starts a fresh log
        (out / "train_log.jsonl").unlink(missing_ok=True)
    try:
        res = TR.train(run.detector, run.train, train_set, eval_set, out, resume=resume, echo=_progress,
                       metadata={"class_names": classes, "run_config": run.to_dict()})
    except TR.TrainingDiverged as e:
        raise RunFailed(f"training diverged: {e} (last good checkpoint: {e.checkpoint})") from None
    if eval_set:
        report = TR.evaluate_model(res.detector, eval_set, **_eval_kwargs(run))
        _write_report(out, report, classes)
        print(f"final mAP {report.map:.4f}; checkpoint {res.checkpoint}")
    return EXIT_OK


def _eval_kwargs(run: RunConfig) -> dict:
    return {k: run.eval[k] for k in ("conf_threshold", "nms_iou", "top_k")}


def read_predictions(path, records: dict[str, tuple[int, int]], class_names) -> dict[str, list[E.Detection]]:
    """Parse detection records (one JSON object per line, pixel boxes) into normalised detections."""
    ids = {n: i + 1 for i, n in enumerate(class_names)}
    preds: dict[str, list[E.Detection]] = {k: [] for k in records}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path}:{n}"
        try:
            rec = json.loads(line)
            image, name, score = rec["image"], rec["class"], float(rec["score"])
            box = [float(rec[k]) for k in ("xmin", "ymin", "xmax", "ymax")]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"{where}: malformed detection record ({e})") from None
        if image not in records:
            raise ConfigError(f"{where}: image {image!r} is not in the dataset")
        if name not in ids:
            raise ConfigError(f"{where}: unknown class {name!r}")
        w, h = records[image]
        preds[image].append(E.Detection(ids[name], score, (box[0] / w, box[1] / h, box[2] / w, box[3] / h), image))
    return preds


def cmd_eval(run: RunConfig | None, out: Path, checkpoint: str | None, predictions: str | None,
             data: str | None, args) -> int:
    if (checkpoint is None) == (predictions is None):
        raise ConfigError("eval needs exactly one of --checkpoint or --predictions")
    base = run or resolve_config()
    if predictions is not None:
        classes, samples = _split(base, data, "eval")
        sizes = {s.image_id: (s.image.shape[2], s.image.shape[1]) for s in samples}
        preds = read_predictions(predictions, sizes, classes)
        canonical = base.detector.input_size
        num_classes = len(classes) + 1
    else:
        det, ckpt = _load_model(args, run)
        if run is None:
            base = resolve_config(_stored_config(ckpt))
        classes, samples = _split(base, data, "eval")
        _check_model_inputs(det.config, classes, samples)
        preds = TR.predict(det, samples, **_eval_kwargs(base))
        canonical, num_classes = det.config.input_size, det.config.num_classes
    gts = {s.image_id: list(s.annotations) for s in samples}
    report = E.evaluate(preds, gts, canonical, num_classes, base.eval["interpolation"])
    _write_report(out, report, classes)
    print(f"mAP {report.map:.4f} over {len(samples)} images")
    return EXIT_OK


def _stored_config(ckpt) -> dict:
    doc = ckpt.metadata.get("run_config")
    if doc is None:
        raise ConfigError("checkpoint carries no run configuration; pass --config")
    return doc


def cmd_ablate(run: RunConfig, out: Path, data: str | None = None) -> int:
    classes, train_set = _split(run, data, "train")
    _, eval_set = _split(run, data, "eval")
    _check_model_inputs(run.detector, classes, train_set + eval_set)
    for sub in out.glob("*/train_log.jsonl"):
        sub.unlink()
    try:
        rows = TR.run_ablation(run.detector, run.train, train_set, eval_set, out, echo=_progress,
                               metadata={"class_names": classes, "run_config": run.to_dict()})
    except TR.TrainingDiverged as e:
        raise RunFailed(f"training diverged: {e}") from None
    for r in rows:
        print(f"{r['variant']:14s} params={r['parameters']:8d} mAP={r['map']:.4f} (reference {r['reference_map']})")
    return EXIT_OK


def _image_array(path: str, cfg: DetectorConfig) -> tuple[np.ndarray, int, int]:
    try:
        with Image.open(path) as im:
            im = im.convert("L" if cfg.in_channels == 1 else "RGB")
            w, h = im.size
            if (w, h) != (cfg.input_size, cfg.input_size):
                im = im.resize((cfg.input_size, cfg.input_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as e:
        raise ConfigError(f"cannot read image {path}: {e}") from None
    arr = arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)
    return arr, w, h


def cmd_detect(run: RunConfig | None, images, args, out: Path | None = None) -> int:
    det, ckpt = _load_model(args, run)
    names = ckpt.metadata.get("class_names") or [str(c) for c in range(1, det.config.num_classes)]
    if args.threshold is not None:
        threshold = args.threshold
    elif run is not None:
        threshold = run.detect["score_threshold"]
    elif "run_config" in ckpt.metadata:
        threshold = resolve_config(ckpt.metadata["run_config"]).detect["score_threshold"]
    else:
        threshold = DETECT_DEFAULTS["score_threshold"]
    lines = []
    for path in images:
        arr, w, h = _image_array(path, det.config)
        with T.no_grad():
            head = det(arr[None])
        image_id = Path(path).stem
        for d in E.decode_detections(head, det.priors, threshold, image_ids=[image_id])[0]:
            x0, y0, x1, y1 = d.box
            lines.append(json.dumps({
                "image": image_id, "class": names[d.class_id - 1], "class_id": d.class_id, "score": d.score,
                "xmin": x0 * w, "ymin": y0 * h, "xmax": x1 * w, "ymax": y1 * h,
            }, sort_keys=True))
    for line in lines:
        print(line)
    if out is not None:
        (out / "detections.jsonl").write_text("".join(l + "\n" for l in lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration (unknown keys are rejected)")
    common.add_argument("--seed", type=int, metavar="N", help="root seed; overrides the config")
    common.add_argument("--out", metavar="DIR", help="output directory (locked while the command runs)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                        help="override one config field, e.g. train.total_epochs=5 (value parsed as JSON)")

    p = argparse.ArgumentParser(prog="faenet", description="Feature-aggregation single-shot detector toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and block")
    g.add_argument("--tolerance", type=float, help="max relative error (default from config, 1e-3)")
    g.add_argument("--only", action="append", metavar="CHECK", help=f"run only these checks: {', '.join(gradsuite.CHECKS)}")

    sub.add_parser("synth", parents=[common], help="write the synthetic train and eval splits")

    t = sub.add_parser("train", parents=[common], help="train a detector")
    t.add_argument("--data", metavar="DIR", help="dataset written by synth (default: generate from the config)")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint or a predictions file")
    e.add_argument("--checkpoint", metavar="CKPT", help="model to evaluate")
    e.add_argument("--predictions", metavar="JSONL", help="detection records to score instead of a model")
    e.add_argument("--data", metavar="PATH", help="manifest or dataset directory (default: generated eval split)")

    a = sub.add_parser("ablate", parents=[common], help="train and score the four ablation variants")
    a.add_argument("--data", metavar="DIR", help="dataset written by synth (default: generate from the config)")

    d = sub.add_parser("detect", parents=[common], help="print detections for images as JSON lines")
    d.add_argument("--checkpoint", metavar="CKPT", required=True, help="model to run")
    d.add_argument("--threshold", type=float, help="minimum score (default from config, 0.3)")
    d.add_argument("images", nargs="+", metavar="IMAGE")
    return p


NEEDS_OUT = {"synth", "train", "eval", "ablate"}


def _dispatch(args, run: RunConfig | None, out: Path | None) -> int:
    c = args.command
    if c == "gradcheck":
        return cmd_gradcheck(run, args.tolerance, args.only, out)
    if c == "synth":
        return cmd_synth(run, out)
    if c == "train":
        return cmd_train(run, out, args.data, args.resume)
    if c == "eval":
        return cmd_eval(run, out, args.checkpoint, args.predictions, args.data, args)
    if c == "ablate":
        return cmd_ablate(run, out, args.data)
    return cmd_detect(run, args.images, args, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        # eval and detect fall back to the configuration stored in the checkpoint
        explicit = args.config is not None or args.seed is not None or args.overrides
        if args.command in ("eval", "detect") and not explicit:
            run = None
        else:
            run = load_run_config(args.config, args.seed, args.overrides)
        if args.command in NEEDS_OUT and args.out is None:
            raise ConfigError(f"{args.command} needs --out DIR")
        if args.out is None:
            return _dispatch(args, run, None)
        out = Path(args.out)
        with locked(out):
            if run is not None:
                _echo_config(out, run)
            return _dispatch(args, run, out)
    except (ConfigError, TR.ConfigFieldError, Dt.AnnotationError, TR.FingerprintMismatch) as e:
        _err(f"error: {e}")
        return EXIT_CONFIG
    except FileNotFoundError as e:
        _err(f"error: {e}")
        return EXIT_CONFIG
    except RunFailed as e:
        _err(f"error: {e}")
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    sys.exit(main())
