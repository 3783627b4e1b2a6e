"""SGD training with warm-up and step decay, checkpoints, and the four-variant ablation driver."""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as Dt
from . import evaluation as E
from . import multibox as M
from . import tensor as T
from .detector import Detector, DetectorConfig, build_detector
from .rng import substream

# (name, use_sfe, use_dfe, use_fam, full-scale VOC2007 reference mAP)
ABLATION_VARIANTS = (
    ("baseline", False, False, False, 77.5),
    ("+SFE", True, False, False, 79.0),
    ("+SFE+DFE", True, True, False, 79.5),
    ("+SFE+DFE+FAM", True, True, True, 80.1),
)


class ConfigFieldError(ValueError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.02
    batch_size: int = 16
    warmup_epochs: float = 2
    milestone_epochs: tuple[float, ...] = (40, 50)
    total_epochs: int = 60
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    use_sfe: bool = True
    use_dfe: bool = True
    use_fam: bool = True
    neg_pos_ratio: float = 3.0
    match_iou: float = 0.5
    augment: bool = True
    eval_every: int = 1  # epochs between held-out evaluations, 0 to disable

    def __post_init__(self):
        self.milestone_epochs = tuple(self.milestone_epochs)
        m = self.milestone_epochs
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ConfigFieldError(f"milestones must be strictly increasing, got {m}")
        if m and m[-1] >= self.total_epochs:
            raise ConfigFieldError(f"milestones must precede total_epochs={self.total_epochs}, got {m}")
        if self.warmup_epochs < 0 or (m and self.warmup_epochs >= m[0]):
            raise ConfigFieldError(f"warm-up ({self.warmup_epochs} epochs) must end before the first milestone {m[:1]}")
        if self.base_lr <= 0 or self.batch_size < 1 or self.total_epochs < 1:
            raise ConfigFieldError("base_lr, batch_size and total_epochs must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigFieldError(f"need 0 <= momentum < 1 and weight_decay >= 0, got {self.momentum}, {self.weight_decay}")

    @classmethod
    def voc_schedule(cls, **kw) -> TrainConfig:
        """Full-scale VOC schedule: 250 epochs, lr 4e-3 decayed at 150 and 200, 5 warm-up epochs, batch 32."""
        return cls(**{"base_lr": 4e-3, "batch_size": 32, "warmup_epochs": 5, "milestone_epochs": (150, 200),
                      "total_epochs": 250, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestone_epochs"] = list(self.milestone_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigFieldError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Learning rate at a (fractional) epoch.

    Linear from ``base_lr / 100`` at 0 to ``base_lr`` at the end of warm-up,
    then ``base_lr / 10**k`` where k counts the milestones already reached.
    """
    if not 0 <= epoch <= config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs}]")
    base = config.base_lr
    if epoch < config.warmup_epochs:
        start = base / 100
        return start + (base - start) * epoch / config.warmup_epochs
    k = sum(1 for m in config.milestone_epochs if epoch >= m)
    return base / 10**k


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


def sgd_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], lr: float, momentum: float = 0.9,
             weight_decay: float = 5e-4, velocity: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """One momentum step: ``v = momentum * v + g + weight_decay * p``; ``p -= lr * v``.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves the model untouched.  Returns the updated velocity.
    """
    velocity = {} if velocity is None else velocity
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        v = momentum * velocity.get(name, 0.0) + g + weight_decay * p.data
        velocity[name] = v
        p.data = p.data - lr * v
    return velocity


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"FAENETCK"
FORMAT_VERSION = 1


class FingerprintMismatch(ValueError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"checkpoint was written for config {found}, current config is {expected}")
        self.expected, self.found = expected, found


@dataclass
class Checkpoint:
    version: int
    fingerprint: str
    epoch: int
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix) + 1:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}


def save_checkpoint(path, detector: Detector, epoch: int, velocity: dict[str, np.ndarray] | None = None,
                    metadata: dict | None = None) -> Path:
    """Write the binary container atomically (temp file, then rename).

    Layout, all integers little-endian: magic ``FAENETCK``; u32 version;
    u32 fingerprint length + ASCII sha256 of the canonical detector config;
    u32 epoch; u32 metadata length + UTF-8 JSON; u32 tensor count; then per
    tensor: u32 name length + UTF-8 name, u8 rank, rank x u64 extents, float64
    payload in C order.
    """
    path = Path(path)
    meta = {"detector_config": detector.config.to_dict(), "seed": detector.seed, **(metadata or {})}
    tensors = {f"param/{k}": t.data for k, t in detector.named_parameters().items()}
    tensors.update({f"momentum/{k}": v for k, v in (velocity or {}).items()})
    tensors.update({f"buffer/{k}": t.data for k, t in detector.named_buffers().items()})
    fp = detector.config.fingerprint().encode()
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(fp)), fp, struct.pack("<I", epoch),
              struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<B", arr.ndim)]
        chunks += [struct.pack("<Q", n) for n in arr.shape]
        chunks.append(arr.tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = u32()
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    fp = take(u32()).decode()
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise FingerprintMismatch(expected_fingerprint, fp)
    epoch = u32()
    meta = json.loads(take(u32()).decode())
    tensors = {}
    for _ in range(u32()):
        name = take(u32()).decode()
        rank = take(1)[0]
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return Checkpoint(version, fp, epoch, tensors, meta)


def restore(detector: Detector, ckpt: Checkpoint) -> dict[str, np.ndarray]:
    """Load parameters and buffers into ``detector``; returns the momentum buffers."""
    if ckpt.fingerprint != detector.config.fingerprint():
        raise FingerprintMismatch(detector.config.fingerprint(), ckpt.fingerprint)
    for prefix, targets in (("param", detector.named_parameters()), ("buffer", detector.named_buffers())):
        stored = ckpt.group(prefix)
        missing = set(targets) - set(stored)
        if missing:
            raise ValueError(f"checkpoint lacks {prefix} tensors {sorted(missing)[:5]}")
        for name, t in targets.items():
            if stored[name].shape != t.shape:
                raise ValueError(f"checkpoint {prefix} {name!r} has shape {stored[name].shape}, model {t.shape}")
            t.data = stored[name].copy()
    return {k: v.copy() for k, v in ckpt.group("momentum").items()}


def detector_from_checkpoint(path) -> tuple[Detector, Checkpoint]:
    ckpt = load_checkpoint(path)
    cfg = DetectorConfig.from_dict(ckpt.metadata["detector_config"])
    det = build_detector(cfg, ckpt.metadata.get("seed", 0))
    restore(det, ckpt)
    return det.eval(), ckpt


# ---------------------------------------------------------------------------
# training loop


def predict(detector: Detector, samples: Sequence[Dt.Sample], batch_size: int = 32, conf_threshold: float = 0.01,
            nms_iou: float = 0.45, top_k: int = 200) -> dict[str, list[E.Detection]]:
    """Inference-mode detections keyed by image id (the caller's mode is restored)."""
    was_training = detector.training
    detector.eval()
    out = {}
    try:
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            with T.no_grad():
                head = detector(Dt.stack_images(chunk))
            ids = [s.image_id or str(i + j) for j, s in enumerate(chunk)]
            for k, dets in zip(ids, E.decode_detections(head, detector.priors, conf_threshold, nms_iou, top_k, ids)):
                out[k] = dets
    finally:
        if was_training:
            detector.train()
    return out


def evaluate_model(detector: Detector, samples: Sequence[Dt.Sample], detailed: bool = True, **kw) -> E.EvalReport:
    preds = predict(detector, samples, **kw)
    gts = {s.image_id or str(i): list(s.annotations) for i, s in enumerate(samples)}
    return E.evaluate(preds, gts, detector.config.input_size, detector.config.num_classes, detailed=detailed)


def batch_loss(detector: Detector, samples: Sequence[Dt.Sample], cfg: TrainConfig):
    matches = [M.match(detector.priors, s.annotations, cfg.match_iou) for s in samples]
    head = detector(Dt.stack_images(samples))
    return M.multibox_loss(head.loc, head.conf, matches, cfg.neg_pos_ratio, return_terms=True)


def _grads(params: dict[str, T.Tensor]) -> dict[str, np.ndarray]:
    return {k: (np.zeros(p.shape) if p.grad is None else p.grad) for k, p in params.items()}


@dataclass
class TrainResult:
    detector: Detector
    velocity: dict[str, np.ndarray]
    log: list[dict]
    final_map: float | None
    checkpoint: Path | None


class _Log:
    def __init__(self, path: Path | None, echo: Callable[[dict], None] | None):
        self.records: list[dict] = []
        self.path, self.echo = path, echo

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        if self.echo is not None:
            self.echo(rec)


def train(det_config: DetectorConfig, cfg: TrainConfig, train_samples: Sequence[Dt.Sample],
          eval_samples: Sequence[Dt.Sample] = (), out_dir=None, resume=None, stop_after_epoch: int | None = None,
          echo: Callable[[dict], None] | None = None, metadata: dict | None = None) -> TrainResult:
    """Train a detector; every random choice is keyed by ``cfg.seed``.

    Data order for epoch e comes from substream ``(seed, "data", e)`` and the
    augmentation of sample i in epoch e from ``(seed, "augment", e, i)``, so a
    run resumed from an epoch-k checkpoint continues exactly as the
    uninterrupted run.  With ``out_dir`` set, ``train_log.jsonl`` receives one
    record per iteration and per evaluation, and ``last.ckpt`` is rewritten
    after every epoch.  A non-finite loss raises :class:`TrainingDiverged`
    without touching the last good checkpoint.
    """
    det_config = det_config.with_toggles(cfg.use_sfe, cfg.use_dfe, cfg.use_fam)
    det = build_detector(det_config, substream_seed(cfg.seed))
    det.train()
    params = det.named_parameters()
    velocity: dict[str, np.ndarray] = {}
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, det_config.fingerprint())
        velocity = restore(det, ckpt)
        start = ckpt.epoch
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = _Log(None if out is None else out / "train_log.jsonl", echo)
    ckpt_path = None if out is None else out / "last.ckpt"
    good = ckpt_path if resume is None else Path(resume)

    n = len(train_samples)
    if n == 0:
        raise ValueError("training set is empty")
    per_epoch = -(-n // cfg.batch_size)
    final_map = None
    last_epoch = cfg.total_epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.total_epochs)
    for epoch in range(start, last_epoch):
        order = substream(cfg.seed, "data", epoch).permutation(n)
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            if cfg.augment:
                batch = [Dt.augment(s, substream(cfg.seed, "augment", epoch, int(i))) for s, i in zip(batch, idx)]
            lr = lr_at(epoch + b / per_epoch, cfg)
            for p in params.values():
                p.grad = None
            loss, terms = batch_loss(det, batch, cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch} batch {b}", good)
            loss.backward()
            try:
                velocity = sgd_step(params, _grads(params), lr, cfg.momentum, cfg.weight_decay, velocity)
            except NonFiniteGradient as e:
                raise TrainingDiverged(f"{e} at epoch {epoch} batch {b}", good) from e
            log.write({"kind": "iter", "iteration": epoch * per_epoch + b, "epoch": epoch, "lr": lr, "loss": value,
                       "loc": float(terms["loc"]), "conf": float(terms["conf"]), "num_pos": int(terms["num_pos"])})
        if eval_samples and cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.total_epochs):
            final_map = evaluate_model(det, eval_samples, detailed=False).map
            log.write({"kind": "eval", "epoch": epoch, "map": final_map})
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, det, epoch + 1, velocity, {"train_config": cfg.to_dict(), **(metadata or {})})
            good = ckpt_path
    return TrainResult(det, velocity, log.records, final_map, ckpt_path)


def substream_seed(seed: int) -> int:
    """Parameter-initialisation seed derived from the run seed."""
    return int(substream(seed, "init").integers(2**31))


def overfit_one_batch(det_config: DetectorConfig, samples: Sequence[Dt.Sample], iterations: int = 300,
                      lr: float = 0.01, seed: int = 0, momentum: float = 0.9,
                      stop_ratio: float | None = None) -> list[float]:
    """Repeatedly fit one fixed batch at a constant learning rate; returns the loss per iteration.

    With ``stop_ratio`` the loop ends as soon as the loss drops below that
    fraction of the first loss.
    """
    det = build_detector(det_config, substream_seed(seed)).train()
    params = det.named_parameters()
    cfg = TrainConfig(seed=seed)
    velocity: dict[str, np.ndarray] = {}
    losses = []
    for _ in range(iterations):
        for p in params.values():
            p.grad = None
        loss, _ = batch_loss(det, samples, cfg)
        losses.append(loss.item())
        if stop_ratio is not None and losses[-1] < stop_ratio * losses[0]:
            break
        loss.backward()
        velocity = sgd_step(params, _grads(params), lr, momentum, 0.0, velocity)
    return losses


# ---------------------------------------------------------------------------
# ablation


def parameter_count(det_config: DetectorConfig) -> int:
    return sum(t.size for t in build_detector(det_config).named_parameters().values())


def run_ablation(det_config: DetectorConfig, cfg: TrainConfig, train_samples, eval_samples, out_dir=None,
                 echo: Callable[[dict], None] | None = None, metadata: dict | None = None) -> list[dict]:
    """Train the four variants with one seed and schedule; returns one row per variant.

    Rows carry the variant name, its toggles, parameter count, toy mAP and the
    full-scale reference mAP (context only).  With ``out_dir`` the table is
    also written as ``ablation.json`` and ``ablation.tsv``.
    """
    rows = []
    for name, sfe, dfe, fam, ref in ABLATION_VARIANTS:
        vcfg = TrainConfig.from_dict({**cfg.to_dict(), "use_sfe": sfe, "use_dfe": dfe, "use_fam": fam,
                                      "eval_every": 0})
        sub = None if out_dir is None else Path(out_dir) / name.replace("+", "plus_").strip("_")
        res = train(det_config, vcfg, train_samples, (), sub, echo=echo, metadata=metadata)
        report = evaluate_model(res.detector, eval_samples, detailed=False)
        rows.append({
            "variant": name, "use_sfe": sfe, "use_dfe": dfe, "use_fam": fam,
            "parameters": sum(t.size for t in res.detector.named_parameters().values()),
            "map": report.map, "reference_map": ref,
        })
    if out_dir is not None:
        write_ablation_table(rows, out_dir)
    return rows


def write_ablation_table(rows: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps({"rows": rows}, indent=2, sort_keys=True) + "\n")
    cols = ["variant", "use_sfe", "use_dfe", "use_fam", "parameters", "map", "reference_map"]
    lines = ["\t".join(cols)] + ["\t".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols)
                                 for r in rows]
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
