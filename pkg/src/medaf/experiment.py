"""Training, calibration, evaluation, CAM export and the ablation/sweep grids."""
from __future__ import annotations

import copy
import dataclasses
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .data import (
    LabeledImageSet,
    Split,
    SplitSpec,
    SyntheticSpec,
    apply_split,
    batches,
    channel_stats,
    generate_synthetic,
    load_idx_pair,
    normalize,
)
from .errors import ArgumentError, ConfigError, MedafError
from .metrics import MetricsReport, build_report
from .network import MedafConfig, Model, build_model, forward, parse_fusion_mode
from .objective import cam_postprocess, total_loss
from .scoring import (
    UNKNOWN,
    ThresholdCalibration,
    batch_scores,
    calibrate_threshold,
    decide_batch,
    score_dump_text,
)

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ("epoch", "ce_global", "ce_experts", "diversity", "total", "accuracy")


class TrainingError(MedafError, RuntimeError):
    pass


# ----------------------------------------------------------------------------
# configuration


@dataclass
class OptimizerConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list[int] = field(default_factory=lambda: [20])
    decay: float = 0.1

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** sum(1 for m in self.milestones if epoch >= m)


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "idx"
    images_path: str | None = None
    labels_path: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_per_class: int = 100
    data_seed: int = 0
    split: SplitSpec = field(default_factory=SplitSpec)
    batch_size: int = 32
    epochs: int = 30


@dataclass
class ScoringConfig:
    gamma: float = 0.5
    target_tpr: float = 0.95


@dataclass
class AblationConfig:
    disable_diversity: bool = False
    fusion_mode: str = "gating"


@dataclass
class ExperimentConfig:
    model: MedafConfig = field(default_factory=MedafConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        parse_fusion_mode(self.ablation.fusion_mode, self.model.num_experts)
        d = self.data
        if d.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {d.source!r}")
        if d.source == "idx" and not (d.images_path and d.labels_path):
            raise ConfigError("idx source needs data.images_path and data.labels_path")
        if d.batch_size < 1 or d.epochs < 1 or d.n_per_class < 1:
            raise ConfigError("batch_size, epochs and n_per_class must be >= 1")
        if len(d.split.known_classes) != self.model.num_classes:
            raise ConfigError(f"{len(d.split.known_classes)} known classes but model.num_classes="
                              f"{self.model.num_classes}")
        if not self.optimizer.lr > 0 or not 0 <= self.optimizer.momentum < 1:
            raise ConfigError("optimizer needs lr > 0 and momentum in [0, 1)")
        if self.scoring.gamma < 0 or not 0 < self.scoring.target_tpr <= 1:
            raise ConfigError("scoring needs gamma >= 0 and target_tpr in (0, 1]")
        return self

    @property
    def effective_beta2(self) -> float:
        return 0.0 if self.ablation.disable_diversity else self.model.beta2

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_plain(cls, d).validate()

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_json(text)

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"model.beta2": 0.0})``."""
        new = copy.deepcopy(self)
        for path, value in overrides.items():
            obj = new
            *head, last = path.split(".")
            for part in head:
                obj = getattr(obj, part)
            if not hasattr(obj, last):
                raise ConfigError(f"no config field {path!r}")
            setattr(obj, last, value)
        if hasattr(new.model, "__post_init__"):
            new.model.__post_init__()
        new.model.seed = new.seed
        return new.validate()


def _to_plain(obj):
    if hasattr(obj, "to_dict") and not isinstance(obj, ExperimentConfig):
        return obj.to_dict()
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, list):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    ("ExperimentConfig", "model"): MedafConfig,
    ("ExperimentConfig", "optimizer"): OptimizerConfig,
    ("ExperimentConfig", "data"): DataConfig,
    ("ExperimentConfig", "scoring"): ScoringConfig,
    ("ExperimentConfig", "ablation"): AblationConfig,
    ("DataConfig", "synthetic"): SyntheticSpec,
    ("DataConfig", "split"): SplitSpec,
}


def _from_plain(cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} expects a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    kwargs = {}
    for name, value in d.items():
        sub = _NESTED.get((cls.__name__, name))
        kwargs[name] = _from_plain(sub, value) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ----------------------------------------------------------------------------
# data


def load_dataset(cfg: ExperimentConfig) -> LabeledImageSet:
    d = cfg.data
    if d.source == "idx":
        return load_idx_pair(d.images_path, d.labels_path)
    return generate_synthetic(d.synthetic, d.n_per_class, d.data_seed)


def load_split(cfg: ExperimentConfig) -> Split:
    return apply_split(load_dataset(cfg), cfg.data.split)


# ----------------------------------------------------------------------------
# inference helpers


@dataclass
class ScoredSet:
    s_lg: np.ndarray
    s_ft: np.ndarray
    s_total: np.ndarray
    fused_logits: np.ndarray


def score_images(model: Model, images: np.ndarray, gamma: float, fusion_mode: str = "gating",
                 batch_size: int = 256) -> ScoredSet:
    """Score raw ``[0, 1]`` images with the model's stored normalization."""
    x = normalize(images, model.norm_mean, model.norm_std)
    kind, idx = parse_fusion_mode(fusion_mode, model.num_experts)
    experts = [idx] if kind == "single_expert" else None
    parts = []
    for start in range(0, x.shape[0], batch_size):
        bundle = forward(model, x[start:start + batch_size], fusion_mode=fusion_mode)
        s = batch_scores(bundle, gamma, experts)
        parts.append((*s, bundle.fused_logits.data))
    cols = [np.concatenate(c) for c in zip(*parts)]
    return ScoredSet(*cols)


def closed_set_accuracy(model: Model, data: LabeledImageSet, fusion_mode: str = "gating") -> float:
    scored = score_images(model, data.images, 0.0, fusion_mode)
    return float(np.mean(np.argmax(scored.fused_logits, axis=1) == data.labels))


def mean_pairwise_cam_cosine(model: Model, data: LabeledImageSet, fusion_mode: str = "gating",
                             batch_size: int = 256) -> float:
    """Average over samples of the mean pairwise cosine of post-processed CAMs at the true label."""
    N = model.num_experts
    if N < 2:
        return 0.0
    x = normalize(data.images, model.norm_mean, model.norm_std)
    vals = []
    for start in range(0, x.shape[0], batch_size):
        y = data.labels[start:start + batch_size]
        bundle = forward(model, x[start:start + batch_size], label_for_cam=y, fusion_mode=fusion_mode)
        cams = [cam_postprocess(o.cam_for_label) for o in bundle.expert_outputs]
        pair = [ad.cosine_similarity(cams[i], cams[j], batch_dims=1).data
                for i in range(N - 1) for j in range(i + 1, N)]
        vals.append(np.mean(pair, axis=0))
    return float(np.concatenate(vals).mean())


# ----------------------------------------------------------------------------
# train


@dataclass
class TrainResult:
    model: Model
    rows: list[tuple]
    best_path: Path
    final_path: Path
    log_path: Path
    best_accuracy: float


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def train(cfg: ExperimentConfig, split: Split | None = None,
          progress: Callable[[str], None] | None = None) -> TrainResult:
    """Epoch loop: forward, total loss, backward, SGD step; checkpoints best and final."""
    cfg.validate()
    out = Path(cfg.out_dir)
    split = split if split is not None else load_split(cfg)
    train_set, test_known = split.train_known, split.test_known
    if len(train_set) == 0:
        raise ConfigError("training split is empty")
    if np.any(train_set.labels >= cfg.model.num_classes):
        raise ConfigError("training labels exceed model.num_classes")

    model = build_model(dataclasses.replace(cfg.model, seed=cfg.seed))
    model.norm_mean, model.norm_std = channel_stats(train_set.images)
    x_train = normalize(train_set.images, model.norm_mean, model.norm_std)
    xs = LabeledImageSet(x_train, train_set.labels)

    mode = cfg.ablation.fusion_mode
    beta1, beta2 = cfg.model.beta1, cfg.effective_beta2
    params = model.trainable(mode)
    state = ad.SgdMomentumState(cfg.optimizer.lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay)

    rows = []
    best_acc = -1.0
    best_path, final_path = out / "best.ckpt", out / "final.ckpt"
    for epoch in range(cfg.data.epochs):
        state.learning_rate = cfg.optimizer.lr_at(epoch)
        sums = np.zeros(4)
        seen = 0
        for xb, yb in batches(xs, cfg.data.batch_size, seed=cfg.seed * 100_003 + epoch):
            with ad.Tape() as tape:
                bundle = forward(model, xb, label_for_cam=yb, fusion_mode=mode)
                loss = total_loss(bundle, yb, beta1, beta2)
            parts = loss.as_row()
            if not all(math.isfinite(v) for v in parts):
                raise TrainingError(f"non-finite loss at epoch {epoch}: {parts}")
            tape.backward(loss.total)
            ad.sgd_step(params, state)
            sums += np.array(parts) * len(yb)
            seen += len(yb)
        acc = closed_set_accuracy(model, test_known, mode) if len(test_known) else float("nan")
        means = sums / seen
        rows.append((epoch, *map(float, means), acc))
        if progress:
            progress(f"epoch {epoch:3d}  loss {means[3]:.4f}  (ce_g {means[0]:.4f}, "
                     f"ce_exp {means[1]:.4f}, div {means[2]:.4f})  acc {acc:.4f}")
        if acc > best_acc:
            best_acc = acc
            ckpt.save(model, best_path)
    ckpt.save(model, final_path)
    log_path = ckpt.atomic_write(out / "loss_log.csv", _rows_csv(LOSS_LOG_HEADER, rows))
    ckpt.atomic_write(out / "config.json", cfg.to_json())
    return TrainResult(model, rows, best_path, final_path, log_path, best_acc)


# ----------------------------------------------------------------------------
# calibrate / evaluate


def calibrate(cfg: ExperimentConfig, model: Model | str | Path,
              calibration_set: LabeledImageSet | None = None, write: bool = True) -> ThresholdCalibration:
    """Threshold at ``target_tpr`` known acceptance; defaults to the known test split."""
    model = ckpt.load(model) if isinstance(model, (str, Path)) else model
    if calibration_set is None:
        calibration_set = load_split(cfg).test_known
    if len(calibration_set) == 0:
        raise ArgumentError("calibration set is empty")
    scored = score_images(model, calibration_set.images, cfg.scoring.gamma, cfg.ablation.fusion_mode)
    cal = calibrate_threshold(scored.s_total, cfg.scoring.target_tpr)
    if write:
        payload = dict(asdict(cal), gamma=cfg.scoring.gamma, fusion_mode=cfg.ablation.fusion_mode)
        ckpt.atomic_write(Path(cfg.out_dir) / "calibration.json",
                          json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return cal


def read_calibration(path) -> ThresholdCalibration:
    d = json.loads(Path(path).read_text())
    return ThresholdCalibration(d["tau"], d["target_tpr"], d["n_known_used"], d["achieved_acceptance"])


@dataclass
class EvalResult:
    report: MetricsReport
    dump_rows: list[tuple]
    known: ScoredSet
    unknown: ScoredSet | None


def evaluate(cfg: ExperimentConfig, model: Model | str | Path, tau: float | None,
             split: Split | None = None, write: bool = True) -> EvalResult:
    """Score known and unknown test sets; write ``scores.csv``, ``report.txt``, ``report.json``."""
    model = ckpt.load(model) if isinstance(model, (str, Path)) else model
    split = split if split is not None else load_split(cfg)
    gamma, mode = cfg.scoring.gamma, cfg.ablation.fusion_mode
    K = cfg.model.num_classes

    known = score_images(model, split.test_known.images, gamma, mode)
    unknown = None
    if len(split.test_unknown):
        unknown = score_images(model, split.test_unknown.images, gamma, mode)

    truths = [split.test_known.labels]
    sets = [known]
    if unknown is not None:
        truths.append(np.full(len(split.test_unknown), UNKNOWN))
        sets.append(unknown)
    truth = np.concatenate(truths)
    s_lg = np.concatenate([s.s_lg for s in sets])
    s_ft = np.concatenate([s.s_ft for s in sets])
    s_tot = np.concatenate([s.s_total for s in sets])
    logits = np.concatenate([s.fused_logits for s in sets])
    if tau is not None:
        decisions = decide_batch(s_tot, tau, logits)
    else:
        decisions = np.argmax(logits, axis=1)

    acc = float(np.mean(np.argmax(known.fused_logits, axis=1) == split.test_known.labels))
    report = build_report(
        known.s_total, None if unknown is None else unknown.s_total,
        tpr_target=cfg.scoring.target_tpr,
        decisions=decisions if tau is not None else None, truths=truth, num_classes=K,
        closed_set_accuracy=acc,
        known_acceptance=None if tau is None else float(np.mean(known.s_total >= tau)),
        tau=tau, gamma=gamma,
    )
    rows = list(zip(range(len(truth)), truth, s_lg, s_ft, s_tot, decisions))
    if write:
        out = Path(cfg.out_dir)
        ckpt.atomic_write(out / "scores.csv", score_dump_text(rows))
        ckpt.atomic_write(out / "report.txt", report.to_text())
        ckpt.atomic_write(out / "report.json", report.to_json())
    return EvalResult(report, rows, known, unknown)


# ----------------------------------------------------------------------------
# CAM export


def quantize_map(m: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 (rounded); a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.floor((m - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def upsample_nearest(m: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = (np.arange(height) * m.shape[0]) // height
    cols = (np.arange(width) * m.shape[1]) // width
    return m[rows][:, cols]


def write_pgm(path, pixels: np.ndarray) -> Path:
    h, w = pixels.shape
    return ckpt.atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ArgumentError(f"{path} is not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def export_cams(model: Model | str | Path, images: np.ndarray, out_dir, class_index: int | None = None,
                sample_ids: Sequence[int] | None = None, fusion_mode: str = "gating") -> list[Path]:
    """One PGM per expert plus the across-expert mean, per image.

    Maps are post-processed CAMs at ``class_index`` (or the fused prediction),
    min-max scaled and nearest-neighbour upsampled to the input size.
    """
    model = ckpt.load(model) if isinstance(model, (str, Path)) else model
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArgumentError(f"cannot create {out_dir}: {exc}") from None
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    ids = list(range(len(images))) if sample_ids is None else list(sample_ids)
    H, W = images.shape[-2:]
    x = normalize(images, model.norm_mean, model.norm_std)
    bundle = forward(model, x, fusion_mode=fusion_mode)
    K = model.config.num_classes
    if class_index is not None and not 0 <= class_index < K:
        raise ArgumentError(f"class {class_index} out of range for {K} classes")
    classes = (np.full(len(images), class_index) if class_index is not None
               else np.argmax(bundle.fused_logits.data, axis=1))
    paths = []
    for b, sid in enumerate(ids):
        k = int(classes[b])
        maps = [cam_postprocess(ad.Tensor(o.feature_map.data[b, k])).data
                for o in bundle.expert_outputs]
        for i, m in enumerate(maps):
            img = upsample_nearest(quantize_map(m), H, W)
            paths.append(write_pgm(out_dir / f"sample{sid:05d}_expert{i}_class{k}.pgm", img))
        mean_map = upsample_nearest(quantize_map(np.mean(maps, axis=0)), H, W)
        paths.append(write_pgm(out_dir / f"sample{sid:05d}_mean_class{k}.pgm", mean_map))
    return paths


# ----------------------------------------------------------------------------
# grids


@dataclass
class RunSummary:
    name: str
    seed: int
    num_experts: int
    auroc: float | None
    closed_set_accuracy: float
    macro_f1: float | None
    tnr_at_tpr95: float | None
    dtacc: float | None
    cam_cosine: float
    known_acceptance: float | None


def run_pipeline(cfg: ExperimentConfig, name: str = "run", split: Split | None = None,
                 progress: Callable[[str], None] | None = None) -> RunSummary:
    """train -> calibrate -> evaluate on the final checkpoint."""
    split = split if split is not None else load_split(cfg)
    res = train(cfg, split, progress)
    cal = calibrate(cfg, res.model, split.test_known)
    ev = evaluate(cfg, res.model, cal.tau, split)
    cos = mean_pairwise_cam_cosine(res.model, split.test_known, cfg.ablation.fusion_mode)
    r = ev.report
    return RunSummary(name, cfg.seed, cfg.model.num_experts, r.auroc, r.closed_set_accuracy,
                      r.macro_f1, r.tnr_at_tpr95, r.dtacc, cos, r.known_acceptance)


def ablation_variants(cfg: ExperimentConfig) -> dict[str, dict]:
    """Overrides for each ablation row, applied on top of ``cfg``."""
    beta2 = cfg.model.beta2 if cfg.model.beta2 > 0 else 0.1
    return {
        "baseline": {"model.num_experts": 1, "model.beta1": 0.0, "model.beta2": 0.0,
                     "scoring.gamma": 0.0, "ablation.fusion_mode": "gating"},
        "single_expert": {"model.beta2": 0.0, "ablation.fusion_mode": "single_expert_0"},
        "no_diversity": {"model.beta2": 0.0, "ablation.fusion_mode": "gating"},
        "mean_fusion": {"model.beta2": beta2, "ablation.fusion_mode": "mean"},
        "medaf": {"model.beta2": beta2, "ablation.fusion_mode": "gating"},
    }


SUMMARY_HEADER = tuple(f.name for f in fields(RunSummary))


def summaries_csv(rows: Sequence[RunSummary]) -> str:
    return _rows_csv(SUMMARY_HEADER, [tuple(asdict(r).values()) for r in rows])


def ablate(cfg: ExperimentConfig, seeds: Sequence[int], variants: Sequence[str] | None = None,
           progress: Callable[[str], None] | None = None) -> list[RunSummary]:
    table = ablation_variants(cfg)
    names = list(variants) if variants else list(table)
    unknown = set(names) - set(table)
    if unknown:
        raise ConfigError(f"unknown ablation variants {sorted(unknown)}; choose from {list(table)}")
    split = load_split(cfg)
    rows = []
    for seed in seeds:
        for name in names:
            run_cfg = cfg.replace(seed=seed, out_dir=str(Path(cfg.out_dir) / f"{name}_seed{seed}"),
                                  **table[name])
            rows.append(run_pipeline(run_cfg, name, split))
            if progress:
                progress(f"{name} seed={seed} auroc={rows[-1].auroc:.4f} "
                         f"acc={rows[-1].closed_set_accuracy:.4f} cam_cos={rows[-1].cam_cosine:.4f}")
    ckpt.atomic_write(Path(cfg.out_dir) / "ablation.csv", summaries_csv(rows))
    return rows


def sweep_experts(cfg: ExperimentConfig, expert_counts: Sequence[int] = (1, 2, 3, 4, 5),
                  progress: Callable[[str], None] | None = None) -> list[RunSummary]:
    """One full pipeline per expert count; ``N=1`` degenerates to a plain CNN."""
    split = load_split(cfg)
    rows = []
    for n in expert_counts:
        mode = cfg.ablation.fusion_mode
        if n == 1 or mode.startswith("single_expert"):
            mode = "gating"
        run_cfg = cfg.replace(**{"model.num_experts": n, "ablation.fusion_mode": mode,
                                 "out_dir": str(Path(cfg.out_dir) / f"experts{n}")})
        rows.append(run_pipeline(run_cfg, f"experts{n}", split))
        if progress:
            progress(f"N={n} auroc={rows[-1].auroc:.4f} acc={rows[-1].closed_set_accuracy:.4f}")
    ckpt.atomic_write(Path(cfg.out_dir) / "sweep_experts.csv", summaries_csv(rows))
    return rows
