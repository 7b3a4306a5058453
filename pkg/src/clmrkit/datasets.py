"""Manifest-driven corpora, tag vocabularies, fragment tiling and a synthetic corpus."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .audio_io import AudioBuffer, concat_fragments, decode_wav, encode_wav, resample
from .errors import BadSplit, DuplicateId, MissingFile, TooFewTags

SPLITS = ("train", "valid", "test")
MANIFEST_FIELDS = ("path", "source_id", "split", "tags")


@dataclass
class Song:
    source_id: str
    split: str
    tags: list[str]
    paths: list[Path]


@dataclass
class Manifest:
    songs: list[Song]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.songs)

    def split(self, name: str) -> list[Song]:
        return [s for s in self.songs if s.split == name]

    def indices(self, name: str) -> list[int]:
        return [i for i, s in enumerate(self.songs) if s.split == name]


def load_manifest(path) -> Manifest:
    """Parse and validate a ``path,source_id,split,tags[,order]`` CSV.

    Tags are pipe-separated.  Rows sharing a ``source_id`` are fragments of one
    song and need an ``order`` column; they are concatenated in that order.
    """
    path = Path(path)
    root = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing_cols = [c for c in MANIFEST_FIELDS if c not in header]
        if missing_cols:
            raise ValueError(f"{path}: manifest lacks columns {missing_cols}")
        has_order = "order" in header
        rows = list(reader)

    grouped: dict[str, list[tuple[int, int, dict]]] = {}
    missing = []
    for lineno, row in enumerate(rows, start=2):
        if row["split"] not in SPLITS:
            raise BadSplit(f"{path}:{lineno}: split {row['split']!r} not in {SPLITS}")
        sid = row["source_id"]
        if sid in grouped and not has_order:
            raise DuplicateId(f"{path}:{lineno}: duplicate source_id {sid!r}")
        order = int(row["order"]) if has_order and row["order"] else 0
        if not (root / row["path"]).is_file():
            missing.append(f"row {lineno}: {row['path']}")
        grouped.setdefault(sid, []).append((order, lineno, row))
    if missing:
        raise MissingFile(f"{path}: missing audio files: " + "; ".join(missing))

    songs = []
    for sid, entries in grouped.items():
        entries.sort(key=lambda e: e[0])
        orders = [e[0] for e in entries]
        if len(set(orders)) != len(orders):
            raise DuplicateId(f"{path}: source_id {sid!r} repeats order values {orders}")
        splits = {e[2]["split"] for e in entries}
        if len(splits) > 1:
            raise BadSplit(f"{path}: source_id {sid!r} appears in splits {sorted(splits)}")
        tags = sorted({t for e in entries for t in e[2]["tags"].split("|") if t})
        songs.append(Song(sid, splits.pop(), tags, [root / e[2]["path"] for e in entries]))
    return Manifest(songs, root)


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for song in manifest.songs:
            for p in song.paths:
                rel = Path(p).relative_to(path.parent) if Path(p).is_absolute() else p
                w.writerow([str(rel), song.source_id, song.split, "|".join(song.tags)])
    return path


def load_song(song: Song, sample_rate: int | None = None) -> AudioBuffer:
    parts = [decode_wav(p, source_id=song.source_id) for p in song.paths]
    audio = concat_fragments(parts)
    if sample_rate is not None and audio.sample_rate != sample_rate:
        audio = resample(audio, sample_rate)
    return audio


def load_songs(manifest: Manifest, split: str | None = None,
               sample_rate: int | None = None) -> list[AudioBuffer]:
    songs = manifest.songs if split is None else manifest.split(split)
    return [load_song(s, sample_rate) for s in songs]


@dataclass
class TagVocabulary:
    tags: list[str]

    def __len__(self):
        return len(self.tags)

    def encode(self, tags: Sequence[str]) -> np.ndarray:
        index = {t: i for i, t in enumerate(self.tags)}
        row = np.zeros(len(self.tags), dtype=np.int8)
        for t in tags:
            if t in index:
                row[index[t]] = 1
        return row


def build_vocabulary(manifest: Manifest, k: int = 50) -> tuple[TagVocabulary, np.ndarray]:
    """Top-``k`` training tags and the multi-hot label matrix for every song.

    Tags are ranked by training-split frequency, ties broken alphabetically.
    """
    train = manifest.split("train")
    if not train:
        raise ValueError("manifest has no training songs")
    counts = Counter(t for s in train for t in s.tags)
    if len(counts) < k:
        raise TooFewTags(f"only {len(counts)} distinct training tags, {k} requested")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[:k]
    vocab = TagVocabulary(ranked)
    labels = np.stack([vocab.encode(s.tags) for s in manifest.songs])
    return vocab, labels


@dataclass
class FragmentTable:
    """Evaluation fragments: ``clip[i]`` is the song index of fragment ``i``."""

    clip: np.ndarray
    start: np.ndarray
    crop_length: int

    def __len__(self):
        return self.clip.size


def fragment_index(lengths: Sequence[int], crop_length: int, hop: int | None = None) -> FragmentTable:
    """Tile each clip with fragments of ``crop_length``; the last one is zero-padded."""
    hop = crop_length if hop is None else hop
    clips, starts = [], []
    for ci, n in enumerate(lengths):
        count = max(1, math.ceil((n - crop_length) / hop) + 1) if n > crop_length else 1
        for j in range(count):
            clips.append(ci)
            starts.append(j * hop)
    return FragmentTable(np.array(clips, dtype=np.int64), np.array(starts, dtype=np.int64),
                         crop_length)


def cut_fragments(songs: Sequence[AudioBuffer], table: FragmentTable) -> np.ndarray:
    """Materialise ``table`` as a float32 array [n_fragments, crop_length]."""
    out = np.zeros((len(table), table.crop_length), dtype=np.float32)
    for row, (ci, start) in enumerate(zip(table.clip, table.start)):
        piece = songs[ci].samples[start:start + table.crop_length]
        out[row, :piece.size] = piece
    return out


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

RECIPES = ("tone", "harmonic", "noise", "am")
BASE_FREQ = {"tone": 440.0, "harmonic": 220.0, "noise": 2000.0, "am": 660.0}
DETUNE = 0.01
AM_RATE = 25.0
SHARED_TAG = "synthetic"


def class_names(n_classes: int) -> list[str]:
    names = []
    for c in range(n_classes):
        recipe = RECIPES[c % len(RECIPES)]
        freq = BASE_FREQ[recipe] * 2.0 ** (7 * (c // len(RECIPES)) / 12.0)
        names.append(f"{recipe}-{int(round(freq))}")
    return names


def _render(recipe: str, freq: float, n: int, sample_rate: int, rng: np.random.Generator):
    t = np.arange(n) / sample_rate
    f = freq * (1.0 + rng.uniform(-DETUNE, DETUNE))
    if recipe == "tone":
        x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif recipe == "harmonic":
        x = sum(np.sin(2 * np.pi * k * f * t + rng.uniform(0, 2 * np.pi)) / k
                for k in range(1, 7) if k * f < sample_rate / 2)
    elif recipe == "noise":
        lo, hi = f / 2, min(f * 1.5, 0.45 * sample_rate)
        sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
        x = signal.sosfilt(sos, rng.standard_normal(n))
    elif recipe == "am":
        envelope = 0.5 * (1 + np.sin(2 * np.pi * AM_RATE * t + rng.uniform(0, 2 * np.pi)))
        x = envelope * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    else:
        raise ValueError(recipe)
    x = x / np.max(np.abs(x))
    return x * rng.uniform(0.3, 0.8)


def synthesize_corpus(out_dir, n_songs: int = 40, n_classes: int = 4, duration: float = 10.0,
                      sample_rate: int = 22050, seed: int = 0,
                      split_fractions=(0.7, 0.1, 0.2)) -> tuple[Manifest, Path]:
    """Write a balanced toy corpus of generated WAVs and its manifest.

    Each song is tagged with its class name and the shared ``synthetic`` tag.
    Songs of a class differ by detune, phase, noise realisation and level.
    Splits are assigned per class so every split sees every class.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = class_names(n_classes)
    n = int(round(duration * sample_rate))
    per_class: dict[int, int] = Counter()
    songs = []
    for i in range(n_songs):
        c = i % n_classes
        rng = np.random.default_rng([seed, i])
        recipe = RECIPES[c % len(RECIPES)]
        freq = BASE_FREQ[recipe] * 2.0 ** (7 * (c // len(RECIPES)) / 12.0)
        x = _render(recipe, freq, n, sample_rate, rng)
        sid = f"song{i:04d}"
        wav = out_dir / f"{sid}.wav"
        encode_wav(AudioBuffer(x, sample_rate, sid), wav)
        class_total = n_songs // n_classes + (1 if c < n_songs % n_classes else 0)
        k = per_class[c]
        per_class[c] += 1
        n_train = int(round(split_fractions[0] * class_total))
        n_valid = int(round(split_fractions[1] * class_total))
        if class_total >= 3:    # keep every split populated for small corpora
            n_valid = max(n_valid, 1)
            n_train = min(n_train, class_total - n_valid - 1)
        split = "train" if k < n_train else "valid" if k < n_train + n_valid else "test"
        songs.append(Song(sid, split, sorted([names[c], SHARED_TAG]), [Path(wav.name)]))
    manifest = Manifest(songs, out_dir)
    path = write_manifest(manifest, out_dir / "manifest.csv")
    return load_manifest(path), path
