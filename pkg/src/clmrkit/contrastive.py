"""NT-Xent loss, batch composition and the self-supervised pre-training loop."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .audio_io import AudioBuffer
from .augment import ExamplePair, TransformChain, make_pair
from .autodiff import Adam, Tensor, l2_normalize, logsumexp
from .errors import BatchTooSmall, InsufficientSongs, ZeroVector
from .model import ModelParams, encode, project, save_checkpoint

log = logging.getLogger(__name__)

_MASK = -1e9


@dataclass
class LossConfig:
    temperature: float = 0.5
    batch_size: int = 96

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 96
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    temperature: float = 0.5
    seed: int = 0
    checkpoint_interval: int = 10
    asymmetric_augmentation: bool = False
    workers: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def default_pairing(n_views: int) -> np.ndarray:
    """Rows ``k`` and ``k + N`` are the two views of the same song."""
    n = n_views // 2
    return np.concatenate([np.arange(n, 2 * n), np.arange(n)])


def nt_xent(z: Tensor, pair_index: Sequence[int] | None = None,
            temperature: float = 0.5) -> Tensor:
    """Mean NT-Xent loss over all 2N anchors of ``z`` [2N, d].

    ``pair_index[k]`` is the row holding the positive for anchor ``k``.
    """
    if not isinstance(z, Tensor):
        z = Tensor(z)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n_views = z.shape[0]
    if z.ndim != 2 or n_views < 4 or n_views % 2:
        raise BatchTooSmall(f"NT-Xent needs [2N, d] with N >= 2, got {z.shape}")
    if np.any(np.linalg.norm(z.data.astype(np.float64), axis=1) == 0):
        raise ZeroVector("NT-Xent input contains a zero row")
    pair = default_pairing(n_views) if pair_index is None else np.asarray(pair_index)
    if sorted(pair.tolist()) != list(range(n_views)) or np.any(pair[pair] != np.arange(n_views)) \
            or np.any(pair == np.arange(n_views)):
        raise ValueError("pair_index must be an involution without fixed points")

    unit = l2_normalize(z, axis=1)
    logits = (unit @ unit.T) * (1.0 / temperature)
    masked = logits + Tensor(np.eye(n_views, dtype=z.dtype) * _MASK)
    positives = np.zeros((n_views, n_views), dtype=z.dtype)
    positives[np.arange(n_views), pair] = 1.0
    positive_logit = (logits * Tensor(positives)).sum(axis=1)
    return (logsumexp(masked, axis=1) - positive_logit).mean()


def compose_batch(songs: Sequence[AudioBuffer], n: int, rng: np.random.Generator,
                  chain: TransformChain, asymmetric: bool = False) -> list[ExamplePair]:
    """``n`` positive pairs from ``n`` distinct songs."""
    if len({s.source_id for s in songs}) < n or len(songs) < n:
        raise InsufficientSongs(f"need {n} distinct songs, have {len(songs)}")
    chosen = rng.choice(len(songs), size=n, replace=False)
    return [make_pair(songs[i], chain, rng, asymmetric) for i in chosen]


def pair_seed(base_seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent, reproducible generator for one training example."""
    return np.random.default_rng(np.random.SeedSequence([base_seed, epoch, index]))


def views_to_batch(pairs: Sequence[ExamplePair]) -> np.ndarray:
    """Stack pairs as [x_i of every pair..., x_j of every pair...] -> [2N, 1, L]."""
    views = [p.x_i.samples for p in pairs] + [p.x_j.samples for p in pairs]
    return np.stack(views)[:, None, :].astype(np.float32)


@dataclass
class PretrainResult:
    losses: list[tuple[int, int, float]] = field(default_factory=list)   # (step, epoch, loss)
    checkpoints: list[Path] = field(default_factory=list)
    best_checkpoint: Path | None = None

    @property
    def loss_curve(self) -> np.ndarray:
        return np.array([l for _, _, l in self.losses])


def write_loss_csv(path, losses, meta: dict | None = None) -> Path:
    """Loss curve as CSV; ``meta`` goes in a leading ``#`` comment line as JSON."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True, default=str) + "\n")
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss"])
        for step, epoch, loss in losses:
            w.writerow([step, epoch, repr(float(loss))])
    return path


def pretrain(songs: Sequence[AudioBuffer], params: ModelParams, config: TrainConfig,
             chain: TransformChain, out_dir=None, meta: dict | None = None,
             max_steps: int | None = None,
             on_step: Callable[[int, int, float], None] | None = None) -> PretrainResult:
    """Contrastive pre-training of ``params`` in place.

    An epoch is one pass over a fresh permutation of the songs in batches
    of ``config.batch_size`` distinct songs (remainder dropped).  Every view
    is augmented from a generator seeded by (seed, epoch, example index),
    so the run is reproducible regardless of ``workers``.
    """
    n = config.batch_size
    if len(songs) < n:
        raise InsufficientSongs(f"batch of {n} needs {n} songs, dataset has {len(songs)}")
    if params.config.input_length != chain.crop_length:
        raise ValueError(f"crop length {chain.crop_length} != encoder input "
                         f"{params.config.input_length}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = Adam(params.parameters(), lr=config.lr, betas=config.betas)
    result = PretrainResult()
    meta = {"train_config": asdict(config), **(meta or {})}
    batches_per_epoch = len(songs) // n
    best_loss = np.inf
    step = 0
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    def build(args):
        epoch, index, song_idx = args
        return make_pair(songs[song_idx], chain, pair_seed(config.seed, epoch, index),
                         config.asymmetric_augmentation)

    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(songs))
            for b in range(batches_per_epoch):
                idx = order[b * n:(b + 1) * n]
                jobs = [(epoch, b * n + k, int(i)) for k, i in enumerate(idx)]
                pairs = list(pool.map(build, jobs)) if pool else [build(j) for j in jobs]
                batch = views_to_batch(pairs)
                optimizer.zero_grad()
                z = project(params, encode(params, batch, mode="train"))
                loss = nt_xent(z, temperature=config.temperature)
                loss.backward()
                optimizer.step()
                value = loss.item()
                result.losses.append((step, epoch, value))
                if on_step is not None:
                    on_step(step, epoch, value)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            log.info("epoch %d: mean loss %.4f", epoch,
                     np.mean([l for _, e, l in result.losses if e == epoch]))
            last_epoch = epoch == config.epochs - 1 or (max_steps is not None and step >= max_steps)
            if out_dir is not None and ((epoch + 1) % config.checkpoint_interval == 0 or last_epoch):
                trailing = float(np.mean([l for _, e, l in result.losses if e == epoch]))
                path = save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1:05d}.bin", params,
                                       {**meta, "epoch": epoch + 1, "step": step,
                                        "trailing_loss": trailing})
                result.checkpoints.append(path)
                if trailing < best_loss:
                    best_loss = trailing
                    result.best_checkpoint = save_checkpoint(
                        out_dir / "best.bin", params,
                        {**meta, "epoch": epoch + 1, "step": step, "trailing_loss": trailing})
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    if out_dir is not None:
        write_loss_csv(out_dir / "loss.csv", result.losses, meta)
    return result


def similarity_gap(params: ModelParams, songs: Sequence[AudioBuffer], chain: TransformChain,
                   rng: np.random.Generator, n_pairs: int | None = None) -> tuple[float, float]:
    """Mean cosine similarity of h between positive pairs and between negatives.

    Each song contributes one augmented pair; negatives are all cross-song view pairs.
    """
    n_pairs = min(n_pairs or len(songs), len(songs))
    chosen = rng.choice(len(songs), size=n_pairs, replace=False)
    pairs = [make_pair(songs[i], chain, rng) for i in chosen]
    h = encode(params, views_to_batch(pairs), mode="eval").data.astype(np.float64)
    h /= np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
    sim = h @ h.T
    pair = default_pairing(2 * n_pairs)
    views = np.arange(2 * n_pairs)
    song_of = views % n_pairs
    positive = sim[views, pair].mean()
    negative_mask = song_of[:, None] != song_of[None, :]
    negative = sim[negative_mask].mean()
    return float(positive), float(negative)
