"""Probe training on frozen representations and multi-label tagging metrics."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .autodiff import Adam, Tensor, binary_cross_entropy_with_logits
from .autodiff.functional import _sigmoid
from .errors import (EmptyClip, EmptySplit, EmptySubset, NoPositives, ShapeMismatch,
                     SingleClass)
from .model import ModelParams, ProbeHead, encode, probe_forward

log = logging.getLogger(__name__)

LABEL_FRACTIONS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
EXTRACT_BATCH = 64


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeMismatch(f"{scores.size} scores vs {labels.size} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    return scores, labels.astype(bool)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the normalised Mann-Whitney U statistic.

    Ties between a positive and a negative count one half.
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC-AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision: mean over positives of the precision at their score threshold."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of every run of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall_gain = np.diff(np.r_[0, tp_at])
    return float((recall_gain * precision).sum() / n_pos)


def tagwise_metrics(scores: np.ndarray, labels: np.ndarray, tags: Sequence[str] | None = None):
    """Per-tag ROC-AUC / PR-AUC and their macro averages.

    Tags without both classes are skipped.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeMismatch(f"scores {scores.shape} vs labels {labels.shape}")
    tags = list(tags) if tags is not None else [str(i) for i in range(labels.shape[1])]
    per_tag = {}
    for j, tag in enumerate(tags):
        column = labels[:, j]
        if column.min() == column.max():
            continue
        per_tag[tag] = (roc_auc(scores[:, j], column), pr_auc(scores[:, j], column))
    if not per_tag:
        return float("nan"), float("nan"), per_tag
    rocs, prs = zip(*per_tag.values())
    return float(np.mean(rocs)), float(np.mean(prs)), per_tag


def aggregate_clip(fragment_scores: np.ndarray, fragment_clips: Sequence, clips: Sequence | None = None):
    """Mean fragment score per clip.

    Returns ``(clip_ids, clip_scores)``; ``clips`` fixes the output order and
    every listed clip must own at least one fragment.
    """
    fragment_scores = np.asarray(fragment_scores, dtype=np.float64)
    if len(fragment_clips) != fragment_scores.shape[0]:
        raise EmptyClip(f"{fragment_scores.shape[0]} fragments but {len(fragment_clips)} map entries")
    if any(c is None for c in fragment_clips):
        raise EmptyClip("fragment without a clip")
    if clips is None:
        clips = list(dict.fromkeys(fragment_clips))
    index = {c: i for i, c in enumerate(clips)}
    sums = np.zeros((len(clips),) + fragment_scores.shape[1:])
    counts = np.zeros(len(clips))
    for row, c in enumerate(fragment_clips):
        if c not in index:
            raise EmptyClip(f"fragment {row} maps to unknown clip {c!r}")
        sums[index[c]] += fragment_scores[row]
        counts[index[c]] += 1
    if np.any(counts == 0):
        empty = [c for c, n in zip(clips, counts) if n == 0]
        raise EmptyClip(f"clips without fragments: {empty}")
    return list(clips), sums / counts.reshape((-1,) + (1,) * (sums.ndim - 1))


# ---------------------------------------------------------------------------
# representations and probes
# ---------------------------------------------------------------------------

def extract_representations(params: ModelParams, fragments: np.ndarray,
                            batch_size: int = EXTRACT_BATCH) -> np.ndarray:
    """Frozen eval-mode encoder output for every row of ``fragments`` [n, L]."""
    fragments = np.asarray(fragments, dtype=np.float32)
    if fragments.ndim != 2 or fragments.shape[1] != params.config.input_length:
        raise ShapeMismatch(f"fragments must be [n, {params.config.input_length}], "
                            f"got {fragments.shape}")
    out = np.zeros((fragments.shape[0], params.config.representation_dim), dtype=np.float32)
    for lo in range(0, fragments.shape[0], batch_size):
        chunk = fragments[lo:lo + batch_size, None, :]
        out[lo:lo + batch_size] = encode(params, Tensor(chunk), mode="eval").data
    return out


@dataclass
class ProbeConfig:
    head: str = "linear"
    lr: float = 3e-4
    weight_decay: float = 1e-6
    patience: int = 5
    max_epochs: int = 200
    seeds: int = 3
    batch_size: int = 64
    standardize: bool = False
    hidden: int = 512

    def __post_init__(self):
        if self.head not in ("linear", "mlp"):
            raise ValueError(f"head must be 'linear' or 'mlp', got {self.head!r}")
        if self.patience < 1 or self.seeds < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, seeds, max_epochs and batch_size must be >= 1")


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly better score."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score``; return True when training should stop."""
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class ProbeResult:
    head: ProbeHead
    mean: np.ndarray
    scale: np.ndarray
    best_epoch: int
    epochs_run: int
    history: list[float] = field(default_factory=list)

    def predict(self, reps: np.ndarray) -> np.ndarray:
        """Sigmoid tag scores for representations ``reps``."""
        x = (np.asarray(reps, dtype=np.float32) - self.mean) / self.scale
        return _sigmoid(probe_forward(self.head, Tensor(x.astype(np.float32))).data)


def _validation_score(scores: np.ndarray, labels: np.ndarray, logits: np.ndarray) -> float:
    roc, _, per_tag = tagwise_metrics(scores, labels)
    if per_tag:
        return roc
    # every tag is single-class in validation: fall back to negative BCE
    return -float(binary_cross_entropy_with_logits(Tensor(logits), labels).data)


def train_probe(train_reps: np.ndarray, train_labels: np.ndarray, val_reps: np.ndarray,
                val_labels: np.ndarray, config: ProbeConfig,
                rng: np.random.Generator) -> ProbeResult:
    """Fit a probe with per-tag BCE and Adam, early-stopped on validation ROC-AUC.

    Returns the parameters from the best validation epoch.
    """
    train_reps = np.asarray(train_reps, dtype=np.float32)
    val_reps = np.asarray(val_reps, dtype=np.float32)
    train_labels = np.asarray(train_labels, dtype=np.float32)
    val_labels = np.asarray(val_labels, dtype=np.float32)
    if train_reps.shape[0] == 0:
        raise EmptySplit("no training examples")
    if val_reps.shape[0] == 0:
        raise EmptySplit("no validation examples")
    if train_reps.shape[0] != train_labels.shape[0] or val_reps.shape[0] != val_labels.shape[0]:
        raise ShapeMismatch("representation and label row counts differ")
    n_tags = train_labels.shape[1]
    if config.standardize:
        mean = train_reps.mean(axis=0)
        scale = train_reps.std(axis=0) + 1e-6
    else:
        mean = np.zeros(train_reps.shape[1], dtype=np.float32)
        scale = np.ones(train_reps.shape[1], dtype=np.float32)
    mean, scale = mean.astype(np.float32), scale.astype(np.float32)
    x_train = (train_reps - mean) / scale
    x_val = Tensor((val_reps - mean) / scale)

    head = ProbeHead.init(config.head, train_reps.shape[1], n_tags, rng, hidden=config.hidden)
    optimizer = Adam(head.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    stopper = EarlyStopping(config.patience)
    best = head.copy()
    history = []
    epoch = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(x_train.shape[0])
        for lo in range(0, order.size, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            optimizer.zero_grad()
            logits = probe_forward(head, Tensor(x_train[idx]))
            binary_cross_entropy_with_logits(logits, train_labels[idx]).backward()
            optimizer.step()
        val_logits = probe_forward(head, x_val).data
        score = _validation_score(_sigmoid(val_logits), val_labels, val_logits)
        history.append(score)
        improved = score > stopper.best
        stop = stopper.update(epoch, score)
        if improved:
            best = head.copy()
        if stop:
            break
    return ProbeResult(best, mean, scale, stopper.best_epoch, epoch + 1, history)


def label_subset(song_ids: Sequence[str], fraction: float, rng: np.random.Generator) -> list[str]:
    """Whole songs sampled without replacement; smaller fractions nest in larger ones."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    count = int(round(fraction * len(song_ids)))
    if count < 1:
        raise EmptySubset(f"{fraction:.0%} of {len(song_ids)} songs is empty")
    order = rng.permutation(len(song_ids))
    return [song_ids[i] for i in order[:count]]


# ---------------------------------------------------------------------------
# full protocol
# ---------------------------------------------------------------------------

@dataclass
class SplitData:
    """Fragments of one split with their clip ids and clip-level labels."""

    fragments: np.ndarray        # [n_fragments, L]
    fragment_clips: list[str]    # clip id per fragment
    clip_ids: list[str]
    clip_labels: np.ndarray      # [n_clips, n_tags]

    def fragment_labels(self) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.clip_ids)}
        return self.clip_labels[[index[c] for c in self.fragment_clips]]

    def subset(self, clip_ids: Sequence[str]) -> "SplitData":
        keep = set(clip_ids)
        rows = [i for i, c in enumerate(self.fragment_clips) if c in keep]
        clips = [c for c in self.clip_ids if c in keep]
        index = {c: i for i, c in enumerate(self.clip_ids)}
        return SplitData(self.fragments[rows], [self.fragment_clips[i] for i in rows], clips,
                         self.clip_labels[[index[c] for c in clips]])


@dataclass
class EvalData:
    train: SplitData
    valid: SplitData
    test: SplitData
    tags: list[str]


@dataclass
class EvalReport:
    tag_roc_auc: float
    tag_pr_auc: float
    clip_roc_auc: float
    clip_pr_auc: float
    per_tag: dict[str, tuple[float, float]]
    runs: int
    run_metrics: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checkpoint_hash: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_tag"] = {t: {"roc_auc": r, "pr_auc": p} for t, (r, p) in self.per_tag.items()}
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_metrics(result: ProbeResult, test_reps: np.ndarray, test: SplitData, tags) -> dict:
    scores = result.predict(test_reps)
    tag_roc, tag_pr, per_tag = tagwise_metrics(scores, test.fragment_labels(), tags)
    _, clip_scores = aggregate_clip(scores, test.fragment_clips, test.clip_ids)
    clip_roc, clip_pr, _ = tagwise_metrics(clip_scores, test.clip_labels, tags)
    return {"tag_roc_auc": tag_roc, "tag_pr_auc": tag_pr, "clip_roc_auc": clip_roc,
            "clip_pr_auc": clip_pr, "per_tag": per_tag, "best_epoch": result.best_epoch,
            "epochs_run": result.epochs_run}


def evaluate(params: ModelParams, data: EvalData, config: ProbeConfig, seed: int = 0,
             train_fraction: float = 1.0, checkpoint_hash: str | None = None,
             probes: list | None = None) -> EvalReport:
    """Train ``config.seeds`` probes on frozen representations and average test metrics.

    With ``train_fraction < 1`` each run trains on a nested subset of the
    training songs drawn from its own seed.  Trained probes are appended to
    ``probes`` when a list is given.
    """
    reps = {name: extract_representations(params, getattr(data, name).fragments)
            for name in ("train", "valid", "test")}
    runs = []
    for run in range(config.seeds):
        rng = np.random.default_rng([seed, run])
        train = data.train
        train_reps = reps["train"]
        if train_fraction < 1.0:
            keep = set(label_subset(train.clip_ids, train_fraction,
                                    np.random.default_rng([seed, run, 1])))
            rows = [i for i, c in enumerate(train.fragment_clips) if c in keep]
            train = train.subset(keep)
            train_reps = train_reps[rows]
        result = train_probe(train_reps, train.fragment_labels(), reps["valid"],
                             data.valid.fragment_labels(), config, rng)
        if probes is not None:
            probes.append(result)
        runs.append(_run_metrics(result, reps["test"], data.test, data.tags))
        log.info("probe run %d: tag ROC-AUC %.4f PR-AUC %.4f", run, runs[-1]["tag_roc_auc"],
                 runs[-1]["tag_pr_auc"])
    per_tag_keys = runs[0]["per_tag"].keys()
    per_tag = {t: (float(np.mean([r["per_tag"][t][0] for r in runs])),
                   float(np.mean([r["per_tag"][t][1] for r in runs]))) for t in per_tag_keys}
    mean = {k: float(np.mean([r[k] for r in runs]))
            for k in ("tag_roc_auc", "tag_pr_auc", "clip_roc_auc", "clip_pr_auc")}
    run_metrics = [{k: v for k, v in r.items() if k != "per_tag"} for r in runs]
    return EvalReport(per_tag=per_tag, runs=len(runs), run_metrics=run_metrics,
                      config={**asdict(config), "seed": seed, "train_fraction": train_fraction},
                      checkpoint_hash=checkpoint_hash, **mean)


def build_eval_data(manifest, crop_length: int, sample_rate: int | None = None,
                    n_tags: int = 50) -> EvalData:
    """Load every split of ``manifest`` and tile it into evaluation fragments."""
    from .datasets import build_vocabulary, cut_fragments, fragment_index, load_song

    vocab, labels = build_vocabulary(manifest, n_tags)
    splits = {}
    for name in ("train", "valid", "test"):
        idx = manifest.indices(name)
        if not idx:
            raise EmptySplit(f"manifest has no {name!r} songs")
        audio = [load_song(manifest.songs[i], sample_rate) for i in idx]
        table = fragment_index([len(a) for a in audio], crop_length)
        ids = [manifest.songs[i].source_id for i in idx]
        splits[name] = SplitData(cut_fragments(audio, table), [ids[c] for c in table.clip],
                                 ids, labels[idx])
    return EvalData(splits["train"], splits["valid"], splits["test"], list(vocab.tags))
