import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clmrkit.audio_io import AudioBuffer, encode_wav
from clmrkit.datasets import (SHARED_TAG, build_vocabulary, class_names, cut_fragments,
                              fragment_index, load_manifest, load_song, synthesize_corpus)
from clmrkit.errors import BadSplit, DuplicateId, MissingFile, TooFewTags


def write(tmp_path, rows, header="path,source_id,split,tags"):
    text = header + "\n" + "\n".join(rows) + "\n"
    (tmp_path / "m.csv").write_text(text)
    return tmp_path / "m.csv"


def wav(tmp_path, name, values, sr=8000):
    encode_wav(AudioBuffer(np.asarray(values, dtype=np.float32), sr), tmp_path / name)


def test_manifest_parsing(tmp_path):
    wav(tmp_path, "a.wav", [0.1])
    wav(tmp_path, "b.wav", [0.2])
    m = load_manifest(write(tmp_path, ["a.wav,s1,train,rock|guitar", "b.wav,s2,test,"]))
    assert [s.source_id for s in m.songs] == ["s1", "s2"]
    assert m.songs[0].tags == ["guitar", "rock"]
    assert m.songs[1].tags == []
    assert m.indices("test") == [1]


def test_manifest_errors(tmp_path):
    wav(tmp_path, "a.wav", [0.1])
    with pytest.raises(BadSplit):
        load_manifest(write(tmp_path, ["a.wav,s1,dev,x"]))
    with pytest.raises(DuplicateId):
        load_manifest(write(tmp_path, ["a.wav,s1,train,x", "a.wav,s1,train,x"]))
    with pytest.raises(MissingFile) as err:
        load_manifest(write(tmp_path, ["a.wav,s1,train,x", "gone.wav,s2,train,x", "nope.wav,s3,test,y"]))
    assert "row 3" in str(err.value) and "row 4" in str(err.value)
    with pytest.raises(BadSplit):
        load_manifest(write(tmp_path, ["a.wav,s1,train,x,0", "a.wav,s1,test,x,1"],
                            header="path,source_id,split,tags,order"))


def test_fragments_concatenate_in_order(tmp_path):
    wav(tmp_path, "p0.wav", [0.1, 0.2])
    wav(tmp_path, "p1.wav", [0.3])
    m = load_manifest(write(tmp_path, ["p1.wav,s,train,x,1", "p0.wav,s,train,x,0"],
                            header="path,source_id,split,tags,order"))
    np.testing.assert_array_equal(load_song(m.songs[0]).samples,
                                  np.float32([0.1, 0.2, 0.3]))


def test_vocabulary_ranking(tmp_path):
    for n in "abcd":
        wav(tmp_path, f"{n}.wav", [0.1])
    rows = ["a.wav,s1,train,x|y", "b.wav,s2,train,y|z", "c.wav,s3,train,y|x", "d.wav,s4,test,w|x"]
    m = load_manifest(write(tmp_path, rows))
    vocab, labels = build_vocabulary(m, k=2)
    assert vocab.tags == ["y", "x"]             # y:3, x:2 (test-split counts ignored)
    np.testing.assert_array_equal(labels, [[1, 1], [1, 0], [1, 1], [0, 1]])
    vocab, _ = build_vocabulary(m, k=3)
    assert vocab.tags == ["y", "x", "z"]
    with pytest.raises(TooFewTags):
        build_vocabulary(m, k=4)


def test_fragment_examples():
    assert len(fragment_index([3 * 59049], 59049)) == 3
    t = fragment_index([59049 + 1], 59049)
    assert len(t) == 2 and t.start.tolist() == [0, 59049]
    assert len(fragment_index([10], 59049)) == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=8), st.integers(1, 60))
def test_fragment_count_property(lengths, crop):
    table = fragment_index(lengths, crop)
    assert len(table) == sum(math.ceil(n / crop) for n in lengths)
    songs = [AudioBuffer(np.arange(1, n + 1, dtype=np.float32), 8000) for n in lengths]
    frags = cut_fragments(songs, table)
    # every sample appears exactly once; padding is zero
    total = sum(float(np.sum(s.samples)) for s in songs)
    assert float(frags.sum()) == pytest.approx(total)
    assert np.count_nonzero(frags) == sum(lengths)


def test_synthetic_corpus(tmp_path):
    m, path = synthesize_corpus(tmp_path, n_songs=8, n_classes=4, duration=0.2, seed=3)
    assert path.name == "manifest.csv"
    assert len(m) == 8
    names = class_names(4)
    assert names == ["tone-440", "harmonic-220", "noise-2000", "am-660"]
    for i, song in enumerate(m.songs):
        assert SHARED_TAG in song.tags and names[i % 4] in song.tags
        audio = load_song(song)
        assert len(audio) == int(0.2 * 22050) and audio.sample_rate == 22050
        assert 0.29 < np.max(np.abs(audio.samples)) < 0.81
    again, _ = synthesize_corpus(tmp_path / "again", n_songs=8, n_classes=4, duration=0.2, seed=3)
    for s, t in zip(m.songs, again.songs):
        np.testing.assert_array_equal(load_song(s).samples, load_song(t).samples)


def test_synthetic_split_sizes(tmp_path):
    m, _ = synthesize_corpus(tmp_path, n_songs=40, duration=0.05)
    assert [len(m.split(s)) for s in ("train", "valid", "test")] == [28, 4, 8]
    for split in ("train", "valid", "test"):
        assert {t for s in m.split(split) for t in s.tags} >= set(class_names(4))


def test_tone_class_has_expected_pitch(tmp_path):
    from conftest import peak_hz
    m, _ = synthesize_corpus(tmp_path, n_songs=1, n_classes=1, duration=1.0)
    audio = load_song(m.songs[0])
    assert abs(peak_hz(audio.samples, 22050) / 440 - 1) <= 0.011
