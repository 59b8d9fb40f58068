import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from haca.data import (RESERVED, DataFormatError, Dataset, ModalityStream, Sample, SynthConfig,
                       Vocabulary, load_dataset, make_batch, read_captions, read_features,
                       save_dataset, synth_dataset, write_features)
from haca.model import BOS, EOS, PAD, UNK


def test_reserved_ids():
    v = Vocabulary(["a", "b"])
    assert [v.id(t) for t in RESERVED] == [PAD, BOS, EOS, UNK] == [0, 1, 2, 3]
    assert v.id("a") == 4 and v.token(5) == "b"
    assert v.encode(["b", "a"]) == [5, 4, EOS]
    assert v.encode(["zz"], allow_unk=True) == [UNK, EOS]
    assert v.decode([BOS, 4, 5, EOS, 4]) == ["a", "b"]
    with pytest.raises(KeyError):
        v.id("zz")


def test_vocab_round_trip(tmp_path):
    v = Vocabulary(["x", "y", "z"])
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v
    (tmp_path / "dup.txt").write_text("x\nx\n")
    with pytest.raises(DataFormatError, match="line 2"):
        Vocabulary.load(tmp_path / "dup.txt")


def test_synth_vocabulary_size():
    ds = synth_dataset(SynthConfig(train=4, val=0, test=0, events=3, modifiers=2))
    assert len(ds.vocab) == 4 + 3 + 2


def test_noiseless_enumerable_case():
    cfg = SynthConfig(train=200, val=0, test=0, events=2, modifiers=2, sigma=0.0,
                      min_events=1, max_events=1)
    ds = synth_dataset(cfg, seed=1)
    programs = {s.program for s in ds.train}
    assert programs == {(m, (e,)) for m in range(2) for e in range(2)}
    for s in ds.train:
        assert len(s.references[0]) == 3
        assert set(np.unique(s.streams["visual"].features)) <= {0.0, 1.0}


def test_modifier_only_in_audio():
    ds = synth_dataset(SynthConfig(train=64, val=0, test=0, sigma=0.0), seed=4)
    by_visual = {}
    for s in ds.train:
        mod, events = s.program
        assert s.streams["audio"].features.argmax(axis=1).tolist() == [mod] * s.streams["audio"].length
        # identical visual programs occur with different modifiers: vision cannot tell them apart
        by_visual.setdefault(events, set()).add(mod)
        assert s.references[0][0] == ds.vocab.id(f"mod{mod}")
    assert any(len(mods) > 1 for mods in by_visual.values())


def test_captions_are_function_of_program():
    ds = synth_dataset(SynthConfig(train=300, val=0, test=0, events=2, modifiers=2,
                                   max_events=2), seed=0)
    seen = {}
    for s in ds.train:
        assert seen.setdefault(s.program, s.references) == s.references
        _, events = s.program
        assert all(a != b for a, b in zip(events, events[1:]))
        assert 2 <= len(events) <= 2


def test_splits_disjoint_by_program():
    ds = synth_dataset(SynthConfig(), seed=0)
    train = {s.program for s in ds.train}
    assert not train & {s.program for s in ds.val}
    assert not train & {s.program for s in ds.test}


def test_synth_deterministic():
    a = synth_dataset(SynthConfig(train=20, val=5, test=5), seed=9)
    b = synth_dataset(SynthConfig(train=20, val=5, test=5), seed=9)
    for split in ("train", "val", "test"):
        for x, y in zip(a.splits[split], b.splits[split]):
            assert x.references == y.references and x.program == y.program
            for m in ("visual", "audio"):
                assert np.array_equal(x.streams[m].features, y.streams[m].features)


def test_invalid_synth_config():
    with pytest.raises(ValueError, match="visual_dim"):
        synth_dataset(SynthConfig(events=9, visual_dim=8))
    with pytest.raises(ValueError):
        synth_dataset(SynthConfig(sigma=-1))


def assert_same(a: Dataset, b: Dataset):
    assert a.vocab == b.vocab and a.modalities == b.modalities
    assert a.splits.keys() == b.splits.keys()
    for split in a.splits:
        for x, y in zip(a.splits[split], b.splits[split], strict=True):
            assert x.id == y.id and x.references == y.references
            for m in a.modalities:
                assert np.array_equal(x.streams[m].features, y.streams[m].features)


def test_single_sample_round_trip(tmp_path):
    vocab = Vocabulary(["hello", "world"])
    s = Sample("s0", {"visual": ModalityStream("visual", np.array([[0.1, -2.5e-7], [3.0, 1 / 3]]))},
               [vocab.encode(["hello", "world"]), vocab.encode(["world"])])
    ds = Dataset(vocab, ["visual"], {"train": [s]})
    save_dataset(ds, tmp_path)
    assert_same(ds, load_dataset(tmp_path / "manifest.tsv"))


def test_synthetic_round_trip(tmp_path):
    ds = synth_dataset(SynthConfig(train=10, val=3, test=3), seed=5)
    save_dataset(ds, tmp_path)
    assert_same(ds, load_dataset(tmp_path))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 5), d=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_feature_file_round_trip(tmp_path_factory, n, d, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, d)) * 10.0 ** r.integers(-8, 8)
    path = tmp_path_factory.mktemp("f") / "x.txt"
    write_features(path, x)
    assert np.array_equal(read_features(path), x)


def test_malformed_feature_row(tmp_path):
    rows = ["3 8"] + [" ".join(["0.5"] * 8)] * 2 + [" ".join(["0.5"] * 7)]
    (tmp_path / "f.txt").write_text("\n".join(rows) + "\n")
    with pytest.raises(DataFormatError, match=r"f\.txt line 4: expected 8 values"):
        read_features(tmp_path / "f.txt")
    (tmp_path / "g.txt").write_text("two 8\n")
    with pytest.raises(DataFormatError, match="line 1"):
        read_features(tmp_path / "g.txt")
    with pytest.raises(FileNotFoundError):
        read_features(tmp_path / "missing.txt")


def test_unknown_caption_token(tmp_path):
    (tmp_path / "c.txt").write_text("hello\nhello there\n")
    with pytest.raises(DataFormatError, match="line 2.*there"):
        read_captions(tmp_path / "c.txt", Vocabulary(["hello"]))


def test_manifest_column_count(tmp_path):
    ds = synth_dataset(SynthConfig(train=2, val=0, test=0), seed=0)
    manifest = save_dataset(ds, tmp_path)
    lines = manifest.read_text().splitlines()
    lines[2] = lines[2].rsplit("\t", 1)[0]
    manifest.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataFormatError, match="line 3"):
        load_dataset(manifest)


def test_make_batch_pads():
    ds = synth_dataset(SynthConfig(train=6, val=0, test=0), seed=0)
    batch = make_batch(ds.train, ["visual", "audio"])
    lengths = [s.streams["visual"].length for s in ds.train]
    assert batch.features["visual"].shape[1] == max(lengths)
    assert batch.lengths["visual"].tolist() == lengths
    for i, s in enumerate(ds.train):
        ref = s.references[0]
        assert batch.targets[i, :len(ref)].tolist() == ref
        assert (batch.targets[i, len(ref):] == PAD).all()
        assert (batch.features["visual"][i, lengths[i]:] == 0).all()
