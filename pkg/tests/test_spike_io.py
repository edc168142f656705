import struct

import numpy as np
import pytest

from spikeiaa.normalize import bin_edges, bin_labels
from spikeiaa.spike_io import (FormatError, InfeasibleSplitError, LengthError, MetadataRecord,
                               SpikeRecording, SplitSpec, VersionError, decode_container,
                               encode_container, few_shot_spec, gen_center_out, gen_kinematics,
                               poisson_dispersion, read_container, read_corpus, split,
                               split_indices, write_container, write_corpus)


def recording(meta, T=6, C=3, label=None, seed=0):
    counts = np.random.default_rng(seed).poisson(1.5, (T, C)).astype(np.uint32)
    return SpikeRecording(counts, 1000.0, meta, label)


# ---------------------------------------------------------------------------
# records


def test_metadata_fields_non_empty():
    with pytest.raises(ValueError):
        MetadataRecord("Macaque", "", "B", "M1", "co", "s")


def test_negative_counts_rejected(meta):
    with pytest.raises(ValueError):
        SpikeRecording(np.array([[1, -1]]), 1000.0, meta)


def test_label_sequence_leading_extent(meta):
    with pytest.raises(ValueError):
        SpikeRecording(np.zeros((4, 2), np.uint32), 1000.0, meta, np.zeros((3, 2)))


# ---------------------------------------------------------------------------
# container


def test_round_trip_file(tmp_path, meta):
    rec = recording(meta, label=3)
    write_container(rec, tmp_path / "a.spkt")
    assert read_container(tmp_path / "a.spkt").equals(rec)


def test_round_trip_sequence_label(meta):
    lab = np.random.default_rng(0).standard_normal((6, 2))
    rec = recording(meta, label=lab)
    back = decode_container(encode_container(rec))
    assert back.equals(rec)
    assert back.label.tobytes() == lab.tobytes()


def test_round_trip_no_label(meta):
    rec = recording(meta)
    assert decode_container(encode_container(rec)).label is None


def test_bytes_are_stable(meta):
    rec = recording(meta, label=1)
    buf = encode_container(rec)
    assert encode_container(decode_container(buf)) == buf


def test_header_layout(meta):
    rec = SpikeRecording(np.arange(6, dtype=np.uint32).reshape(2, 3), 250.0, meta, 0)
    buf = encode_container(rec)
    assert buf[:4] == b"SPKT"
    version, T, C, rate, n_meta = struct.unpack_from("<HIIdI", buf, 4)
    assert (version, T, C, rate) == (1, 2, 3, 250.0)
    payload = buf[4 + 22 + n_meta:]
    assert len(payload) == 24
    assert np.frombuffer(payload, "<u4").tolist() == list(range(6))


def test_metadata_json_keys(meta):
    import json
    buf = encode_container(recording(meta, label=2))
    n_meta = struct.unpack_from("<I", buf, 4 + 18)[0]
    doc = json.loads(buf[26:26 + n_meta])
    assert list(doc) == ["species", "dataset", "subject", "region", "task", "session", "label"]
    assert doc["label"] == 2


def test_bad_magic(meta):
    buf = encode_container(recording(meta))
    with pytest.raises(FormatError):
        decode_container(b"SPKX" + buf[4:])


def test_bad_version(meta):
    buf = bytearray(encode_container(recording(meta)))
    buf[4:6] = struct.pack("<H", 2)
    with pytest.raises(VersionError):
        decode_container(bytes(buf))


@pytest.mark.parametrize("cut", [2, 10, 30, 1])
def test_truncation(meta, cut):
    buf = encode_container(recording(meta, label=np.ones((6, 1))))
    with pytest.raises(LengthError):
        decode_container(buf[:len(buf) - cut] if cut != 2 else buf[:2])


def test_trailing_bytes(meta):
    with pytest.raises(LengthError):
        decode_container(encode_container(recording(meta)) + b"\0")


def test_corpus_manifest_order(tmp_path, meta):
    corpus = [recording(meta, seed=s, label=s) for s in range(5)]
    names = write_corpus(corpus, tmp_path / "c")
    assert (tmp_path / "c" / "manifest.txt").read_text().split() == names
    back = read_corpus(tmp_path / "c")
    assert all(a.equals(b) for a, b in zip(corpus, back))


# ---------------------------------------------------------------------------
# generators


def test_center_out_empty():
    assert gen_center_out(0, 10, 100) == []


def test_center_out_deterministic():
    a = gen_center_out(6, 12, 200, seed=3)
    b = gen_center_out(6, 12, 200, seed=3)
    assert all(x.equals(y) for x, y in zip(a, b))


def test_center_out_negative_rate():
    with pytest.raises(ValueError):
        gen_center_out(4, 4, 100, base_rate=5, mod_depth=10)


def test_center_out_labels_balanced():
    labels = [r.label for r in gen_center_out(32, 4, 50, seed=1)]
    assert np.bincount(labels).tolist() == [4] * 8


def test_center_out_no_modulation_matches_base_rate():
    corpus = gen_center_out(16, 25, 1000, base_rate=20, mod_depth=0, seed=2)
    counts = np.concatenate([r.counts.ravel() for r in corpus]).astype(float)
    lam = 20 / 1000
    n = counts.size
    assert n >= 10**4
    assert abs(counts.mean() - lam) < 3 * np.sqrt(lam / n)
    per_class = [np.mean([r.counts.mean() for r in corpus if r.label == k]) for k in range(8)]
    # identical statistics across classes: every class mean within 4 sigma of the rate
    sigma = np.sqrt(lam / (2 * 1000 * 25))
    assert max(abs(m - lam) for m in per_class) < 4 * sigma


def test_poisson_dispersion():
    assert 0.9 <= poisson_dispersion(1.0, 10**5, seed=0) <= 1.1


def test_kinematics_zero_walk_constant_labels():
    corpus = gen_kinematics(3, 8, 100, walk_std=0.0)
    for r in corpus:
        assert np.all(r.label == r.label[0])


def test_kinematics_deterministic():
    a = gen_kinematics(3, 8, 100, seed=4)
    b = gen_kinematics(3, 8, 100, seed=4)
    assert all(x.equals(y) for x, y in zip(a, b))
    assert a[0].label.shape == (100, 2)


def ridge_r2(corpus, T_norm=20, lam=1.0, seed=0):
    """Closed-form ridge from binned counts to binned velocity, held-out R^2."""
    X, Y = [], []
    for r in corpus:
        edges = bin_edges(r.T_raw, T_norm)
        X.append(np.add.reduceat(r.counts.astype(float), edges[:-1], axis=0))
        Y.append(bin_labels(r.label, edges))
    n_tr = int(0.8 * len(corpus))
    Xtr, Ytr = np.concatenate(X[:n_tr]), np.concatenate(Y[:n_tr])
    Xte, Yte = np.concatenate(X[n_tr:]), np.concatenate(Y[n_tr:])
    mu, sd = Xtr.mean(0), Xtr.std(0) + 1e-9
    Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
    Xtr, Xte = np.c_[Xtr, np.ones(len(Xtr))], np.c_[Xte, np.ones(len(Xte))]
    W = np.linalg.solve(Xtr.T @ Xtr + lam * np.eye(Xtr.shape[1]), Xtr.T @ Ytr)
    pred = Xte @ W
    ss_res = ((Yte - pred) ** 2).sum(0)
    ss_tot = ((Yte - Yte.mean(0)) ** 2).sum(0)
    return float(np.mean(1 - ss_res / ss_tot))


def test_kinematics_ridge_decodable():
    assert ridge_r2(gen_kinematics(200, 40, 1000, seed=0)) > 0.3


# ---------------------------------------------------------------------------
# splits


def test_split_fractions(meta):
    corpus = [recording(meta, seed=i) for i in range(10)]
    tr, te = split(corpus, SplitSpec("multi_day", 0.8, 0))
    assert (len(tr), len(te)) == (8, 2)
    tr, te = split(corpus, few_shot_spec(0))
    assert (len(tr), len(te)) == (2, 8)


@pytest.mark.parametrize("mode", ["multi_day", "within_session", "few_shot"])
def test_trial_split_disjoint_exhaustive(mode):
    corpus = gen_center_out(30, 4, 20, n_sessions=3, seed=0)
    tr, te = split_indices(corpus, SplitSpec(mode, 0.6, 5))
    assert not set(tr) & set(te)
    assert sorted(tr + te) == list(range(30))
    assert split_indices(corpus, SplitSpec(mode, 0.6, 5)) == (tr, te)


def test_cross_day_holds_out_sessions():
    corpus = gen_center_out(40, 4, 20, n_sessions=5, seed=0)
    tr, te = split_indices(corpus, SplitSpec("cross_day", 0.6, 1))
    s_tr = {corpus[i].meta.session for i in tr}
    s_te = {corpus[i].meta.session for i in te}
    assert s_tr and s_te and not s_tr & s_te
    assert sorted(tr + te) == list(range(40))


def test_cross_day_single_session(meta):
    corpus = [recording(meta, seed=i) for i in range(4)]
    with pytest.raises(InfeasibleSplitError):
        split(corpus, SplitSpec("cross_day", 0.5, 0))


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec("random", 0.5)
    with pytest.raises(ValueError):
        SplitSpec("multi_day", 1.0)
    with pytest.raises(ValueError):
        split([], SplitSpec())
