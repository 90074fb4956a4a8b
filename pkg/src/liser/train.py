"""Training loop, lambda search, checkpoint selection, inference and metrics."""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .audio import SEGMENT_SAMPLES, cut_segment, log_mel, segment_starts
from .checkpoint import CheckpointError, load_container, save_checkpoint, save_container, write_atomic
from .data import (Batch, DataError, FoldPlan, make_batches, make_folds, split_by_fold,
                   subset_labeled)
from .losses import LossWeights, ce_loss, conf_batch_loss, confidence_weight, distill_ce_loss, mae_loss
from .model import StudentParams, forward, init_student
from .optim import AdamState, adamw_step

log = logging.getLogger(__name__)

CONFIGURATIONS = ("no-dstl", "vid-dstl", "sp-dstl", "vid-sp-dstl", "conf-vid-sp-dstl")
ABLATION_CONFIGURATIONS = ("distill-ce", "two-stage-train")
LAMBDA_GRID = (0.1, 0.5, 1.0, 5.0, 10.0)
EVAL_CHUNK = 64


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    configuration: str = "vid-sp-dstl"
    lambda_sd: float = 1.0
    lambda_vd: float = 1.0
    lambda_grid: tuple = LAMBDA_GRID
    max_epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 25
    labeled_per_batch: int = 13
    seed: int = 0
    labeled_fraction: float = 1.0
    # teacher set used by the distill-ce and two-stage-train variants
    base: str = "vid-sp-dstl"
    n_folds: int = 5
    keep_epoch_checkpoints: bool = True

    def __post_init__(self):
        if self.configuration not in CONFIGURATIONS + ABLATION_CONFIGURATIONS:
            raise ValueError(f"unknown configuration {self.configuration!r}")
        if self.base not in CONFIGURATIONS[1:]:
            raise ValueError(f"ablation base must be a distillation configuration, got {self.base!r}")
        self.lambda_grid = tuple(float(x) for x in self.lambda_grid)
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if not 0 <= self.labeled_per_batch <= self.batch_size:
            raise ValueError("labeled_per_batch must lie in [0, batch_size]")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @property
    def teacher_config(self) -> str:
        return self.base if self.configuration in ABLATION_CONFIGURATIONS else self.configuration

    @property
    def active(self) -> tuple[bool, bool]:
        """Whether the speech and the video distillation terms are in use."""
        c = self.teacher_config
        return c in ("sp-dstl", "vid-sp-dstl", "conf-vid-sp-dstl"), c in ("vid-dstl", "vid-sp-dstl", "conf-vid-sp-dstl")

    @property
    def weights(self) -> LossWeights:
        sd, vd = self.active
        return LossWeights(self.lambda_sd if sd else 0.0, self.lambda_vd if vd else 0.0)

    @property
    def uses_teachers(self) -> bool:
        w = self.weights
        return w.lambda_sd > 0 or w.lambda_vd > 0

    @property
    def confidence(self) -> bool:
        return self.teacher_config == "conf-vid-sp-dstl"

    @property
    def distill_loss(self) -> str:
        return "ce" if self.configuration == "distill-ce" else "mae"

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda_grid"] = list(self.lambda_grid)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ metrics

@dataclass
class EvalReport:
    confusion: np.ndarray
    uar: float
    war: float

    def to_dict(self) -> dict:
        return {"uar": self.uar, "war": self.war, "confusion": self.confusion.astype(int).tolist()}


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    support = cm.sum(axis=1)
    seen = support > 0
    if not seen.any():
        raise ValueError("empty confusion matrix")
    recalls = np.diag(cm)[seen] / support[seen]
    return EvalReport(cm, float(recalls.mean()), float(np.trace(cm) / cm.sum()))


def report_from_predictions(y_true, y_pred, n_classes: int) -> EvalReport:
    return report_from_confusion(confusion_matrix(y_true, y_pred, n_classes))


# ----------------------------------------------------------------- features

class FeatureCache:
    """Log-Mel inputs per utterance id; crops of long utterances are recomputed."""

    def __init__(self):
        self._short: dict[str, np.ndarray] = {}
        self._eval: dict[str, np.ndarray] = {}
        self._wave: dict[str, np.ndarray] = {}

    def samples(self, item) -> np.ndarray:
        s = self._wave.get(item.id)
        if s is None:
            s = self._wave[item.id] = item.load().samples
        return s

    def train_input(self, item, rng) -> tuple[np.ndarray, int]:
        """(log-Mel, window start) for one random training crop."""
        s = self.samples(item)
        if len(s) <= SEGMENT_SAMPLES:
            f = self._short.get(item.id)
            if f is None:
                f = self._short[item.id] = log_mel(cut_segment(s, 0))
            return f, 0
        (start,) = segment_starts(len(s), "train", rng)
        return log_mel(cut_segment(s, start)), start

    def eval_windows(self, item) -> np.ndarray:
        f = self._eval.get(item.id)
        if f is None:
            s = self.samples(item)
            f = np.stack([log_mel(cut_segment(s, st)) for st in segment_starts(len(s), "eval")])
            self._eval[item.id] = f
        return f

    def save(self, path, items) -> None:
        """Write the eval-window stacks of ``items`` to a LISR1 container keyed by id."""
        blocks = {u.id: self.eval_windows(u) for u in items}
        short = [u.id for u in items if len(self.samples(u)) <= SEGMENT_SAMPLES]
        save_container(path, {"kind": "features", "short": short}, blocks)

    @classmethod
    def load(cls, path) -> "FeatureCache":
        header, blocks = load_container(path)
        if header.get("kind") != "features":
            raise CheckpointError(f"{path}: not a feature cache")
        cache = cls()
        cache._eval.update(blocks)
        for uid in header["short"]:
            cache._short[uid] = blocks[uid][0]
        return cache


# ---------------------------------------------------------------- inference

def window_logits(params: StudentParams, windows: np.ndarray) -> np.ndarray:
    """g_sup logits for a W x 64 x 90 stack, computed in eval mode."""
    out = []
    for i in range(0, len(windows), EVAL_CHUNK):
        chunk = windows[i:i + EVAL_CHUNK][:, None]
        out.append(forward(params, chunk, "eval").sup.data)
    return np.concatenate(out)


def _decide(mean_logits: np.ndarray) -> tuple[int, np.ndarray]:
    z = mean_logits - mean_logits.max()
    p = np.exp(z) / np.exp(z).sum()
    return int(np.argmax(mean_logits)), p


def predict_utterance(params: StudentParams, waveform) -> tuple[int, np.ndarray]:
    """Class index and distribution from logits averaged over all eval windows."""
    from .audio import featurize_eval

    if len(waveform) == 0:
        raise ValueError("empty audio")
    return _decide(window_logits(params, featurize_eval(waveform)).mean(axis=0))


def evaluate(params: StudentParams, items, cache: FeatureCache | None = None) -> EvalReport:
    if not items:
        raise ValueError("empty evaluation set")
    cache = cache or FeatureCache()
    wins = [cache.eval_windows(u) for u in items]
    logits = window_logits(params, np.concatenate(wins))
    preds = []
    pos = 0
    for w in wins:
        preds.append(_decide(logits[pos:pos + len(w)].mean(axis=0))[0])
        pos += len(w)
    return report_from_predictions([u.label for u in items], preds, params.n_speech)


# ----------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_uar: float | None
    val_war: float | None

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    params: StudentParams
    history: list
    best_epoch: int
    best_val_uar: float | None
    stage_digests: dict = field(default_factory=dict)


def batch_loss_tensor(params, batch: Batch, cfg: TrainConfig, cache: FeatureCache, rng,
                      update_stats: bool = True):
    """Forward a mixed mini-batch in train mode and return the scalar loss tensor."""
    feats, q_sd, q_vd = [], [], []
    for u in batch.labeled:
        feats.append(cache.train_input(u, rng)[0])
    for u in batch.unlabeled:
        f, start = cache.train_input(u, rng)
        feats.append(f)
        sp, vd = u.teachers_for_window(start)
        q_sd.append(sp)
        q_vd.append(vd)
    n_l, n_u = batch.n_labeled, batch.n_unlabeled
    out = forward(params, np.stack(feats)[:, None], "train", update_stats=update_stats)
    sup = ce_loss(T.take_rows(out.sup, np.arange(n_l)), [u.label for u in batch.labeled]) \
        if n_l else np.zeros(0)
    w = cfg.weights
    rows = np.arange(n_l, n_l + n_u)
    terms = []
    for lam, head, q in ((w.lambda_sd, out.sd, q_sd), (w.lambda_vd, out.vd, q_vd)):
        if n_u == 0 or lam == 0:
            terms.append(np.zeros(n_u))
        elif cfg.distill_loss == "ce":
            terms.append(distill_ce_loss(T.take_rows(head, rows), np.stack(q)))
        else:
            terms.append(mae_loss(T.softmax(T.take_rows(head, rows)), np.stack(q)))
    inst = None
    if cfg.confidence and n_u:
        inst = np.array([[confidence_weight(a), confidence_weight(b)] for a, b in zip(q_sd, q_vd)])
    loss = conf_batch_loss(sup, terms[0], terms[1], w, inst)
    return T.as_tensor(loss)


def _epoch_batches(cfg: TrainConfig, labeled, unlabeled, stage: str, epoch: int):
    if stage == "distill":
        return make_batches([], unlabeled, cfg.batch_size, 0, cfg.seed, epoch)
    if stage == "supervised" or not cfg.uses_teachers:
        return make_batches(labeled, [], cfg.batch_size, cfg.batch_size, cfg.seed, epoch)
    return make_batches(labeled, unlabeled, cfg.batch_size, cfg.labeled_per_batch, cfg.seed, epoch)


def train(cfg: TrainConfig, labeled, val, unlabeled, n_speech: int, n_video: int,
          out_dir=None, init: StudentParams | None = None, stage: str = "joint",
          cache: FeatureCache | None = None, class_names=None, callback=None) -> TrainResult:
    """Run up to ``cfg.max_epochs`` epochs and return the selected checkpoint.

    ``callback(record, params)`` runs after every epoch; a true return value
    stops training early.

    Selection is by validation UAR (ties keep the earlier epoch); the
    distillation-only stage, which has no supervised signal, selects by the
    lowest mean training loss.
    """
    if stage not in ("joint", "distill", "supervised"):
        raise ValueError(f"unknown stage {stage!r}")
    if cfg.uses_teachers and stage != "supervised" and not unlabeled:
        raise DataError("configuration needs unlabeled data with teacher outputs")
    cache = cache or FeatureCache()
    params = init.copy() if init is not None else init_student(n_speech, n_video, cfg.seed)
    names = params.names()
    state = AdamState()
    out_dir = Path(out_dir) if out_dir is not None else None
    class_names = class_names or [str(i) for i in range(n_speech)]
    history: list[EpochRecord] = []
    best = None  # (key, epoch, params)
    by_loss = stage == "distill" or not val
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for b, batch in enumerate(_epoch_batches(cfg, labeled, unlabeled, stage, epoch)):
            rng = np.random.default_rng([cfg.seed, epoch, b])
            with T.Tape() as tape:
                loss = batch_loss_tensor(params, batch, cfg, cache, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            grads = tape.backward(loss, [params[n] for n in names])
            adamw_step(params.tensors, dict(zip(names, grads)), state, lr=cfg.lr,
                       weight_decay=cfg.weight_decay)
            losses.append(value)
        rec = EpochRecord(epoch, float(np.mean(losses)), None, None)
        if val:
            rep = evaluate(params, val, cache)
            rec.val_uar, rec.val_war = rep.uar, rep.war
        history.append(rec)
        log.info("epoch %d loss %.5f val_uar %s", epoch, rec.train_loss, rec.val_uar)
        key = -rec.train_loss if by_loss else rec.val_uar
        if best is None or key > best[0]:
            best = (key, epoch, params.copy())
        if out_dir is not None:
            if cfg.keep_epoch_checkpoints:
                save_checkpoint(out_dir / f"epoch_{epoch:03d}.lisr", params, class_names, cfg.digest(),
                                {"epoch": epoch, "stage": stage})
            write_atomic(out_dir / "history.jsonl",
                         "".join(json.dumps(r.to_dict()) + "\n" for r in history))
        if callback is not None and callback(rec, params):
            break
    _, best_epoch, best_params = best
    if out_dir is not None:
        save_checkpoint(out_dir / "best.lisr", best_params, class_names, cfg.digest(),
                        {"epoch": best_epoch, "stage": stage})
    best_uar = history[best_epoch - 1].val_uar
    return TrainResult(best_params, history, best_epoch, best_uar)


def train_two_stage(cfg: TrainConfig, labeled, val, unlabeled, n_speech: int, n_video: int,
                    out_dir=None, cache=None, class_names=None) -> TrainResult:
    """Distillation-only training on unlabeled data, then supervised fine-tuning."""
    if not labeled or not unlabeled:
        raise DataError("two-stage training needs both labeled and unlabeled data")
    cache = cache or FeatureCache()
    out_dir = Path(out_dir) if out_dir is not None else None
    init = init_student(n_speech, n_video, cfg.seed)
    digests = {"init": init.digest()}
    if cfg.uses_teachers:
        first = train(cfg, [], None, unlabeled, n_speech, n_video,
                      out_dir / "stage1" if out_dir else None, init, "distill", cache, class_names)
        stage1_params, hist1 = first.params, first.history
    else:
        # nothing to distill: stage 1 leaves the parameters untouched
        stage1_params, hist1 = init, []
    digests["stage1"] = stage1_params.digest()
    second = train(cfg, labeled, val, unlabeled, n_speech, n_video,
                   out_dir / "stage2" if out_dir else None, stage1_params, "supervised", cache, class_names)
    digests["stage2_init"] = digests["stage1"]
    second.stage_digests = digests
    second.history = [dict(r.to_dict(), stage=1) for r in hist1] + \
                     [dict(r.to_dict(), stage=2) for r in second.history]
    return second


def _fit(cfg, labeled, val, unlabeled, n_speech, n_video, out_dir, cache, class_names):
    fn = train_two_stage if cfg.configuration == "two-stage-train" else train
    return fn(cfg, labeled, val, unlabeled, n_speech, n_video, out_dir=out_dir, cache=cache,
              class_names=class_names)


def lambda_candidates(cfg: TrainConfig) -> list[tuple[float, float]]:
    sd, vd = cfg.active
    axis_sd = sorted(cfg.lambda_grid) if sd else [0.0]
    axis_vd = sorted(cfg.lambda_grid) if vd else [0.0]
    return list(itertools.product(axis_sd, axis_vd))


@dataclass
class GridResult:
    best: tuple
    cells: list
    result: TrainResult


def grid_search_lambda(cfg: TrainConfig, labeled, val, unlabeled, n_speech: int, n_video: int,
                       out_dir=None, cache=None, class_names=None) -> GridResult:
    """Exhaustive search over the active lambda axes by best validation UAR.

    Candidates are visited in ascending order and only a strictly better UAR
    replaces the incumbent, so ties resolve to the smaller lambda.
    """
    if not val:
        raise DataError("lambda search needs a non-empty validation set")
    cache = cache or FeatureCache()
    cells = []
    best = None
    for lsd, lvd in lambda_candidates(cfg):
        cell_cfg = cfg.replace(lambda_sd=lsd, lambda_vd=lvd)
        cell_dir = Path(out_dir) / f"sd{lsd:g}_vd{lvd:g}" if out_dir is not None else None
        res = _fit(cell_cfg, labeled, val, unlabeled, n_speech, n_video, cell_dir, cache, class_names)
        cells.append({"lambda_sd": lsd, "lambda_vd": lvd, "val_uar": res.best_val_uar,
                      "best_epoch": res.best_epoch})
        if best is None or res.best_val_uar > best[0]:
            best = (res.best_val_uar, (lsd, lvd), res)
    return GridResult(best[1], cells, best[2])


# ----------------------------------------------------------------- protocol

@dataclass
class FoldResult:
    fold: int
    lambda_sd: float
    lambda_vd: float
    best_epoch: int
    val_uar: float | None
    test: EvalReport
    grid: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def to_dict(self):
        return {"fold": self.fold, "lambda_sd": self.lambda_sd, "lambda_vd": self.lambda_vd,
                "best_epoch": self.best_epoch, "val_uar": self.val_uar, "test": self.test.to_dict(),
                "grid": self.grid}


@dataclass
class ProtocolReport:
    configuration: str
    labeled_fraction: float
    folds: list
    config: dict = field(default_factory=dict)

    @property
    def mean_uar(self) -> float:
        return float(np.mean([f.test.uar for f in self.folds]))

    @property
    def mean_war(self) -> float:
        return float(np.mean([f.test.war for f in self.folds]))

    def to_dict(self):
        return {"configuration": self.configuration, "labeled_fraction": self.labeled_fraction,
                "mean_uar": self.mean_uar, "mean_war": self.mean_war,
                "folds": [f.to_dict() for f in self.folds], "config": self.config}


def run_fold(cfg: TrainConfig, f: int, fold, labeled, unlabeled, n_speech, n_video,
             out_dir=None, grid_search: bool = True, class_names=None, cache=None) -> FoldResult:
    cache = cache or FeatureCache()
    train_items, val_items, test_items = split_by_fold(labeled, fold)
    train_items = subset_labeled(train_items, cfg.labeled_fraction, cfg.seed)
    fold_dir = Path(out_dir) / f"fold{f}" if out_dir is not None else None
    unl = unlabeled if cfg.uses_teachers else []
    if grid_search and cfg.uses_teachers:
        g = grid_search_lambda(cfg, train_items, val_items, unl, n_speech, n_video,
                               fold_dir / "grid" if fold_dir else None, cache, class_names)
        res, (lsd, lvd), cells = g.result, g.best, g.cells
    else:
        res = _fit(cfg, train_items, val_items, unl, n_speech, n_video, fold_dir, cache, class_names)
        lsd, lvd = cfg.weights.lambda_sd, cfg.weights.lambda_vd
        cells = []
    test = evaluate(res.params, test_items, cache)
    if fold_dir is not None:
        save_checkpoint(fold_dir / "selected.lisr", res.params, class_names or [], cfg.digest(),
                        {"fold": f, "lambda_sd": lsd, "lambda_vd": lvd, "epoch": res.best_epoch})
    hist = [r if isinstance(r, dict) else r.to_dict() for r in res.history]
    return FoldResult(f, lsd, lvd, res.best_epoch, res.best_val_uar, test, cells, hist)


def _run_fold_job(job):
    args, kw = job
    return run_fold(*args, **kw)


def run_protocol(cfg: TrainConfig, labeled, unlabeled, class_names, n_video: int,
                 out_dir=None, grid_search: bool = True, threads: int = 1,
                 plan: FoldPlan | None = None, cache: FeatureCache | None = None) -> ProtocolReport:
    """Speaker-disjoint cross-validation of one configuration."""
    if cfg.uses_teachers and not unlabeled:
        raise DataError(f"{cfg.configuration} needs unlabeled data with teacher outputs")
    n_speech = len(class_names)
    plan = plan or make_folds([u.speaker for u in labeled], cfg.n_folds, cfg.seed)
    kw = {"out_dir": out_dir, "grid_search": grid_search, "class_names": list(class_names)}
    jobs = [((cfg, f, fold, labeled, unlabeled, n_speech, n_video), kw) for f, fold in enumerate(plan)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            folds = list(ex.map(_run_fold_job, jobs))
    else:
        cache = cache or FeatureCache()
        folds = [run_fold(*args, cache=cache, **kw) for args, kw in jobs]
    report = ProtocolReport(cfg.configuration, cfg.labeled_fraction, folds, cfg.to_dict())
    if out_dir is not None:
        write_atomic(Path(out_dir) / "report.json", json.dumps(report.to_dict(), indent=2))
    return report


# ---------------------------------------------------------------- ablations

ABLATION_KINDS = ("distill-ce", "two-stage", "labeled-fraction")
DEFAULT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


def ablation_variants(kind: str, base: TrainConfig, fractions=DEFAULT_FRACTIONS) -> list[tuple[str, TrainConfig]]:
    """(row name, config) pairs; the first entry is the baseline."""
    if kind == "distill-ce":
        return [(base.configuration, base),
                ("distill-ce", base.replace(configuration="distill-ce", base=base.teacher_config))]
    if kind == "two-stage":
        return [(base.configuration, base),
                ("two-stage-train", base.replace(configuration="two-stage-train", base=base.teacher_config))]
    if kind == "labeled-fraction":
        rows = []
        if base.configuration != "no-dstl":
            rows.append(("no-dstl@1", base.replace(configuration="no-dstl", labeled_fraction=1.0)))
        rows += [(f"{base.configuration}@{fr:g}", base.replace(labeled_fraction=float(fr))) for fr in fractions]
        return rows
    raise ValueError(f"unknown ablation kind {kind!r}")


def run_ablation(kind: str, base: TrainConfig, labeled, unlabeled, class_names, n_video: int,
                 out_dir=None, grid_search: bool = True, fractions=DEFAULT_FRACTIONS,
                 threads: int = 1, cache: FeatureCache | None = None) -> dict:
    """Run baseline and variant(s) on shared folds; one row per (variant, fold)."""
    plan = make_folds([u.speaker for u in labeled], base.n_folds, base.seed)
    rows, reports = [], {}
    cache = cache or FeatureCache()
    for name, cfg in ablation_variants(kind, base, fractions):
        sub = Path(out_dir) / name.replace("@", "_frac") if out_dir is not None else None
        rep = run_protocol(cfg, labeled, unlabeled, class_names, n_video, sub, grid_search, threads, plan, cache)
        reports[name] = rep
        for f in rep.folds:
            rows.append({"variant": name, "fold": f.fold, "labeled_fraction": cfg.labeled_fraction,
                         "uar": f.test.uar, "war": f.test.war})
    summary = {"kind": kind, "rows": rows,
               "mean": {n: {"uar": r.mean_uar, "war": r.mean_war} for n, r in reports.items()}}
    if out_dir is not None:
        write_atomic(Path(out_dir) / "ablation.json", json.dumps(summary, indent=2))
    return summary
