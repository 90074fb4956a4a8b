"""Manifests, teacher outputs, speaker folds, mixed batching and synthetic data."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, SEGMENT_SAMPLES, Waveform, read_wav, resample, write_wav

DIST_TOL = 1e-5
SPEECH_SEGMENT_S = 0.5
VIDEO_FPS = 30.0
VIDEO_WINDOW = 16
VIDEO_CLASSES = ("angry", "disgust", "fear", "happy", "neutral", "sad", "surprise")


class DataError(ValueError):
    """Invalid manifest, teacher file or dataset configuration."""


@dataclass
class LabeledUtterance:
    id: str
    speaker: str
    path: Path | None
    label: int
    waveform: Waveform | None = field(default=None, repr=False)

    def load(self) -> Waveform:
        if self.waveform is not None:
            return self.waveform
        return resample(read_wav(self.path))


@dataclass
class UnlabeledUtterance:
    id: str
    path: Path | None
    speech_teacher: np.ndarray  # segments x K_S
    video_teacher: np.ndarray  # segments x K_V
    waveform: Waveform | None = field(default=None, repr=False)

    def load(self) -> Waveform:
        if self.waveform is not None:
            return self.waveform
        return resample(read_wav(self.path))

    def teachers_for_window(self, start: int) -> tuple[np.ndarray, np.ndarray]:
        """Segment-averaged speech and video teacher distributions for the 3 s
        window starting at sample ``start``."""
        t0 = start / SAMPLE_RATE
        t1 = t0 + SEGMENT_SAMPLES / SAMPLE_RATE
        speech = _window_mean(self.speech_teacher, SPEECH_SEGMENT_S, SPEECH_SEGMENT_S, t0, t1)
        video = _window_mean(self.video_teacher, VIDEO_WINDOW / VIDEO_FPS, VIDEO_WINDOW / VIDEO_FPS, t0, t1)
        return speech, video


def _window_mean(segs, length, stride, t0, t1):
    starts = np.arange(len(segs)) * stride
    inside = (starts >= t0 - 1e-9) & (starts + length <= t1 + 1e-9)
    if not inside.any():
        # window shorter than every segment grid slot: fall back to overlapping ones
        inside = (starts < t1) & (starts + length > t0)
    if not inside.any():
        inside[:] = True
    return segs[inside].mean(axis=0)


# ------------------------------------------------------------------ loading

def _read_table(path: Path) -> list[dict]:
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    dialect = "excel-tab" if "\t" in text.splitlines()[0] else "excel"
    return list(csv.DictReader(text.splitlines(), dialect=dialect))


def load_labeled_manifest(path, class_names=None, check_files: bool = True):
    """Read an ``id,speaker,path,label`` manifest (CSV or TSV, header required).

    Labels map to indices in sorted class-name order unless ``class_names`` is
    given (e.g. from a checkpoint), in which case unknown labels are errors.
    """
    path = Path(path)
    rows = _read_table(path)
    if not rows:
        raise DataError(f"{path}: manifest is empty, no classes")
    missing = {"id", "speaker", "path", "label"} - set(rows[0])
    if missing:
        raise DataError(f"{path}: header lacks column(s) {sorted(missing)}")
    names = sorted({r["label"].strip() for r in rows}) if class_names is None else list(class_names)
    index = {n: i for i, n in enumerate(names)}
    seen = set()
    items = []
    for line, r in enumerate(rows, start=2):
        uid = r["id"].strip()
        if uid in seen:
            raise DataError(f"{path}:{line}: duplicate id {uid!r}")
        seen.add(uid)
        label = r["label"].strip()
        if label not in index:
            raise DataError(f"{path}:{line}: unknown label {label!r}")
        audio = (path.parent / r["path"].strip()).resolve()
        if check_files and not audio.is_file():
            raise DataError(f"{path}:{line}: missing audio file {audio}")
        items.append(LabeledUtterance(uid, r["speaker"].strip(), audio, index[label]))
    return items, names


def _check_distribution(vec, where):
    v = np.asarray(vec, dtype=np.float64)
    if v.ndim != 1 or not np.all(np.isfinite(v)) or np.any(v < -DIST_TOL):
        raise DataError(f"{where}: not a probability vector")
    total = v.sum()
    if abs(total - 1.0) > DIST_TOL:
        raise DataError(f"{where}: probabilities sum to {total:.6g}, expected 1")
    v = np.clip(v, 0.0, None)
    return v / v.sum()


def load_teacher_outputs(path, n_speech=None, n_video=None) -> dict[str, dict[str, np.ndarray]]:
    """Parse a JSON-lines teacher file into ``{id: {"speech": S x K_S, "video": S x K_V}}``.

    Rows are validated to sum to 1 within 1e-5 and then renormalized.
    """
    path = Path(path)
    declared = {"speech": n_speech, "video": n_video}
    out: dict[str, dict[str, np.ndarray]] = {}
    with path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            where = f"{path}:{line_no}"
            try:
                rec = json.loads(line)
                uid, teacher, segs = str(rec["id"]), rec["teacher"], rec["segments"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{where}: malformed record ({e})") from None
            if teacher not in declared:
                raise DataError(f"{where}: teacher must be 'speech' or 'video', got {teacher!r}")
            if not isinstance(segs, list) or not segs:
                raise DataError(f"{where}: segments must be a non-empty list")
            rows = [_check_distribution(s, f"{where} segment {k}") for k, s in enumerate(segs)]
            k = {len(r) for r in rows}
            if len(k) != 1:
                raise DataError(f"{where}: segments have differing class counts {sorted(k)}")
            k = k.pop()
            if declared[teacher] is None:
                declared[teacher] = k
            elif k != declared[teacher]:
                raise DataError(f"{where}: {teacher} teacher has {k} classes, expected {declared[teacher]}")
            entry = out.setdefault(uid, {})
            if teacher in entry:
                raise DataError(f"{where}: duplicate {teacher} record for id {uid!r}")
            entry[teacher] = np.stack(rows)
    for uid, entry in out.items():
        for teacher in ("speech", "video"):
            if teacher not in entry:
                raise DataError(f"{path}: id {uid!r} has no {teacher} teacher output")
    return out


def load_unlabeled(manifest, teacher_file, n_speech=None, n_video=None,
                   check_files: bool = True) -> list[UnlabeledUtterance]:
    """Join an ``id,path`` manifest with its teacher outputs."""
    manifest = Path(manifest)
    rows = _read_table(manifest)
    if rows and not {"id", "path"} <= set(rows[0]):
        raise DataError(f"{manifest}: header must contain id and path")
    teachers = load_teacher_outputs(teacher_file, n_speech, n_video)
    items = []
    for line, r in enumerate(rows, start=2):
        uid = r["id"].strip()
        if uid not in teachers:
            raise DataError(f"{manifest}:{line}: no teacher outputs for id {uid!r}")
        audio = (manifest.parent / r["path"].strip()).resolve()
        if check_files and not audio.is_file():
            raise DataError(f"{manifest}:{line}: missing audio file {audio}")
        t = teachers[uid]
        items.append(UnlabeledUtterance(uid, audio, t["speech"], t["video"]))
    return items


# -------------------------------------------------------------------- folds

@dataclass(frozen=True)
class Fold:
    train: frozenset
    val: frozenset
    test: frozenset


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, i) -> Fold:
        return self.folds[i]


def make_folds(speakers, n: int = 5, seed: int = 0) -> FoldPlan:
    """Speaker-disjoint folds: group f tests, group f+1 validates, the rest train."""
    spk = sorted(set(speakers))
    if len(spk) < n:
        raise DataError(f"need at least {n} speakers for {n} folds, got {len(spk)}")
    order = np.random.default_rng(seed).permutation(len(spk))
    groups = [frozenset(spk[i] for i in g) for g in np.array_split(order, n)]
    folds = []
    for f in range(n):
        test, val = groups[f], groups[(f + 1) % n]
        train = frozenset().union(*(g for i, g in enumerate(groups) if i not in (f, (f + 1) % n)))
        folds.append(Fold(train, val, test))
    return FoldPlan(tuple(folds))


def split_by_fold(items, fold: Fold):
    pick = lambda s: [u for u in items if u.speaker in s]  # noqa: E731
    return pick(fold.train), pick(fold.val), pick(fold.test)


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    labeled: list
    unlabeled: list

    @property
    def n_labeled(self) -> int:
        return len(self.labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled)


def _stream(n_items, per_batch, n_batches, exhaust_once, seed, epoch, source):
    """Indices for ``n_batches`` batches; cycles with a fresh shuffle per wrap."""
    if per_batch == 0:
        return [[] for _ in range(n_batches)]
    order = []
    wrap = 0
    need = n_items if exhaust_once else n_batches * per_batch
    while len(order) < need:
        rng = np.random.default_rng([seed, epoch, source, wrap])
        order.extend(rng.permutation(n_items).tolist())
        wrap += 1
    order = order[:need]
    return [order[b * per_batch:(b + 1) * per_batch] for b in range(n_batches)]


def make_batches(labeled, unlabeled, batch_size: int = 25, n_labeled: int = 13,
                 seed: int = 0, epoch: int = 0) -> list[Batch]:
    """Mixed mini-batches of ``n_labeled`` labeled and ``batch_size - n_labeled``
    unlabeled items. The epoch ends when the source needing the most batches
    has been seen once; the other source cycles."""
    n_unlabeled = batch_size - n_labeled
    if not 0 <= n_labeled <= batch_size:
        raise DataError(f"labeled count {n_labeled} outside [0, {batch_size}]")
    if n_labeled > 0 and not labeled:
        raise DataError("batches need labeled items but the labeled set is empty")
    if n_unlabeled > 0 and not unlabeled:
        raise DataError("batches need unlabeled items but the unlabeled set is empty")
    need_l = math.ceil(len(labeled) / n_labeled) if n_labeled else 0
    need_u = math.ceil(len(unlabeled) / n_unlabeled) if n_unlabeled else 0
    n_batches = max(need_l, need_u)
    li = _stream(len(labeled), n_labeled, n_batches, need_l == n_batches, seed, epoch, 0)
    ui = _stream(len(unlabeled), n_unlabeled, n_batches, need_u == n_batches, seed, epoch, 1)
    return [Batch([labeled[i] for i in a], [unlabeled[i] for i in b]) for a, b in zip(li, ui)]


def subset_labeled(labeled, fraction: float, seed: int = 0) -> list:
    """Speaker-stratified subset keeping ceil(fraction * n) utterances per speaker.

    Selection is a prefix of a fixed per-speaker permutation, so smaller
    fractions give subsets of larger ones under the same seed.
    """
    if not 0 < fraction <= 1:
        raise DataError(f"labeled fraction must be in (0, 1], got {fraction}")
    by_spk: dict[str, list[int]] = {}
    for i, u in enumerate(labeled):
        by_spk.setdefault(u.speaker, []).append(i)
    keep = []
    for k, spk in enumerate(sorted(by_spk)):
        idx = by_spk[spk]
        n_keep = math.ceil(round(fraction * len(idx), 9))
        perm = np.random.default_rng([seed, k]).permutation(len(idx))
        keep.extend(idx[j] for j in perm[:n_keep])
    return [labeled[i] for i in sorted(keep)]


# ----------------------------------------------------------------- synthetic

@dataclass
class SynthData:
    labeled: list
    unlabeled: list
    class_names: list
    video_class_names: list
    video_map: np.ndarray  # speech class -> video class


def class_carriers(n_classes: int) -> np.ndarray:
    """Carrier frequency (Hz) of each synthetic class, log-spaced 300 Hz - 3 kHz."""
    return 300.0 * 10.0 ** (np.arange(n_classes) / max(n_classes - 1, 1))


def synth_audio(c: int, n_classes: int, rng, duration: float = 3.0, noise: float = 0.05) -> Waveform:
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    carrier = class_carriers(n_classes)[c] * rng.uniform(0.97, 1.03)
    mod = 2.0 + 1.5 * c
    amp = rng.uniform(0.2, 0.4)
    env = 1.0 + 0.8 * np.sin(2 * np.pi * mod * t + rng.uniform(0, 2 * np.pi))
    x = amp * env * np.sin(2 * np.pi * carrier * t + rng.uniform(0, 2 * np.pi))
    # class-independent distractor tone
    x += rng.uniform(0.05, 0.2) * np.sin(2 * np.pi * rng.uniform(200, 4000) * t)
    x += noise * rng.standard_normal(n)
    return Waveform(np.clip(x, -1.0, 1.0), SAMPLE_RATE)


def oracle_teacher(c: int, k: int, n_segments: int, noise: float, rng) -> np.ndarray:
    """Per-segment softmax(onehot(c) / noise + N(0, 1)); exactly one-hot at noise 0."""
    onehot = np.zeros((n_segments, k))
    onehot[:, c] = 1.0
    if noise <= 0:
        return onehot
    z = onehot / noise + rng.standard_normal((n_segments, k))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def gen_synth(n_labeled: int, n_unlabeled: int, n_speech: int = 4, n_video: int = 3,
              teacher_noise: float = 0.3, seed: int = 0, n_speakers: int = 10,
              duration: float = 3.0) -> SynthData:
    """Desk-scale stand-in for labeled speech plus teacher-annotated unlabeled audio."""
    if n_speech < 2 or n_video < 2:
        raise DataError("need at least two speech and two video classes")
    rng = np.random.default_rng(seed)
    video_map = np.arange(n_speech) % n_video
    n_speech_segs = int(round(duration / SPEECH_SEGMENT_S))
    n_video_segs = (int(round(duration * VIDEO_FPS)) - VIDEO_WINDOW) // VIDEO_WINDOW + 1
    labeled = []
    for i in range(n_labeled):
        c = int(rng.integers(n_speech))
        w = synth_audio(c, n_speech, rng, duration)
        labeled.append(LabeledUtterance(f"L{i:05d}", f"spk{i % n_speakers:02d}", None, c, w))
    unlabeled = []
    for j in range(n_unlabeled):
        c = int(rng.integers(n_speech))
        w = synth_audio(c, n_speech, rng, duration)
        sp = oracle_teacher(c, n_speech, n_speech_segs, teacher_noise, rng)
        vd = oracle_teacher(int(video_map[c]), n_video, n_video_segs, teacher_noise, rng)
        unlabeled.append(UnlabeledUtterance(f"U{j:05d}", None, sp, vd, w))
    names = [f"class{c:02d}" for c in range(n_speech)]
    vnames = [f"video{v:02d}" for v in range(n_video)]
    return SynthData(labeled, unlabeled, names, vnames, video_map)


def write_synth(data: SynthData, out_dir) -> dict[str, Path]:
    """Materialize a synthetic set as WAVs, manifests and a teacher JSON-lines file."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    lab_path, unl_path, teach_path = out / "labeled.csv", out / "unlabeled.csv", out / "teachers.jsonl"
    with lab_path.open("w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(["id", "speaker", "path", "label"])
        for u in data.labeled:
            rel = f"audio/{u.id}.wav"
            write_wav(out / rel, u.waveform)
            wr.writerow([u.id, u.speaker, rel, data.class_names[u.label]])
    with unl_path.open("w", newline="", encoding="utf-8") as f, \
            teach_path.open("w", encoding="utf-8") as tf:
        wr = csv.writer(f)
        wr.writerow(["id", "path"])
        for u in data.unlabeled:
            rel = f"audio/{u.id}.wav"
            write_wav(out / rel, u.waveform)
            wr.writerow([u.id, rel])
            for teacher, segs in (("speech", u.speech_teacher), ("video", u.video_teacher)):
                tf.write(json.dumps({"id": u.id, "teacher": teacher, "segments": segs.tolist()}) + "\n")
    return {"labeled": lab_path, "unlabeled": unl_path, "teachers": teach_path}
