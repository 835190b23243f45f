import logging

import numpy as np
import pytest
import torch

from iotsynth.adversary import (FAKE, REAL, UNK, AdversaryConfig, AdversaryVocab, EvaluationReport, cross_validate,
                                encode_features, null_calibration, read_report_csv, render_table, train_device_classifier,
                                train_realfake, uniform_random_windows, write_report_csv)
from iotsynth.errors import DataError
from iotsynth.ingest import Direction, PacketRecord, TrafficWindow, flags_from_names

OUT, IN = Direction.OUTGOING, Direction.INCOMING
TCP = flags_from_names(["IP", "TCP", "HTTPS"])
UDP = flags_from_names(["IP", "UDP", "DNS"])
FAST = AdversaryConfig(epochs=15, hidden=32)


def stochastic_windows(n, L=10, seed=0, lengths=(66, 120, 309, 1514), device="dev", tag="w"):
    """Windows from a small random device: request/response pairs with jittered timing."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        pkts = []
        for i in range(L):
            tcp = rng.random() < 0.8
            pkts.append(PacketRecord(int(rng.choice(lengths)), OUT if i % 2 == 0 else IN,
                                     float(rng.exponential(0.05)), 50000 + int(rng.integers(4)) if tcp else 53,
                                     443 if tcp else 5353, TCP if tcp else UDP, f"{tag}{k}", device))
        out.append(TrafficWindow(device, pkts, f"{tag}{k}", 0))
    return out


def constant_windows(n, L=10, length=60):
    return [TrafficWindow("dev", [PacketRecord(length, IN, 0.0, None, None, (0,) * 16, f"z{k}", "dev")] * L,
                          f"z{k}", 0) for k in range(n)]


# --- encoding -----------------------------------------------------------------------

def test_equal_lengths_equal_ids_and_unseen_unk():
    ws = stochastic_windows(3)
    vocab = AdversaryVocab.fit(ws)
    x = encode_features(ws, vocab)
    flat_len = [p.frame_length for w in ws for p in w.packets]
    ids = x.length.reshape(-1).tolist()
    for a, b in zip(flat_len, ids):
        assert ids[flat_len.index(a)] == b and b != UNK
    odd = stochastic_windows(1, lengths=(777,))
    assert encode_features(odd, vocab).unk_rate("length") == 1.0


def test_direction_and_ports():
    ws = stochastic_windows(2)
    x = encode_features(ws, AdversaryVocab.fit(ws))
    assert x.direction[0].tolist() == [1, 0] * 5
    assert (x.src_port != UNK).all() and (x.dst_port != UNK).all()


def test_timing_standardization():
    pk = lambda d: PacketRecord(100, OUT, d, 1, 2, TCP, "c", "dev")  # noqa: E731
    vocab = AdversaryVocab.fit([TrafficWindow("dev", [pk(0.5), pk(1.5)], "c", 0)])
    assert (vocab.timing_mean, vocab.timing_std) == (1.0, 0.5)
    x = encode_features([TrafficWindow("dev", [pk(2.0)], "c", 0)], vocab)
    assert x.timing.item() == pytest.approx(2.0)


def test_zero_variance_timing_is_safe():
    vocab = AdversaryVocab.fit(constant_windows(2))
    assert vocab.timing_std == 1.0


# --- real vs fake --------------------------------------------------------------------

def test_empty_class_rejected():
    with pytest.raises(DataError):
        train_realfake([], stochastic_windows(3), FAST)
    with pytest.raises(DataError):
        train_realfake(stochastic_windows(3), [], FAST)


def test_imbalance_downsampled(caplog):
    with caplog.at_level(logging.INFO, logger="iotsynth.adversary"):
        train_realfake(stochastic_windows(100), stochastic_windows(50, seed=1), AdversaryConfig(epochs=1), 0)
    assert "real 100, fake 50 -> 50 each" in caplog.text


def test_shuffled_copies_are_indistinguishable():
    real = stochastic_windows(120, seed=3)
    rng = np.random.default_rng(0)
    train, test = real[:80], real[80:]
    adv = train_realfake(train, [train[i] for i in rng.permutation(80)], FAST, 0)
    fake_test = [test[i] for i in rng.permutation(40)]
    acc = adv.accuracy(test + fake_test, [REAL] * 40 + [FAKE] * 40)
    assert acc == 0.5     # every held-out window appears once under each label


def test_uniform_fake_is_trivially_detected():
    real = stochastic_windows(120, seed=4)
    fake = uniform_random_windows(real, seed=0)
    adv = train_realfake(real[:80], fake[:80], FAST, 0)
    assert adv.accuracy(real[80:] + fake[80:], [REAL] * 40 + [FAKE] * 40) >= 0.95


def test_uniform_baseline_generator():
    like = stochastic_windows(5)
    a, b = uniform_random_windows(like, 3), uniform_random_windows(like, 3)
    assert a == b and len(a) == 5 and all(len(w.packets) == 10 for w in a)
    assert all(42 <= p.frame_length <= 1514 for w in a for p in w.packets)


# --- cross validation ------------------------------------------------------------------

def test_cross_validate_preconditions():
    with pytest.raises(DataError):
        cross_validate(stochastic_windows(10), stochastic_windows(10), folds=1, cfg=FAST)
    with pytest.raises(DataError):
        cross_validate(stochastic_windows(4), stochastic_windows(10), folds=5, cfg=FAST)


def test_degenerate_fake_scores_high_and_mean_is_average():
    real = stochastic_windows(60, seed=5)
    rep = cross_validate(real, constant_windows(60), 5, FAST, seed=0, device_id="dev", method="zeros")
    assert rep.mean_accuracy >= 0.95
    assert rep.mean_accuracy == sum(rep.fold_accuracies) / len(rep.fold_accuracies)
    assert len(rep.fold_accuracies) == 5 and all(0 <= a <= 1 for a in rep.fold_accuracies)
    assert all(r == f for r, f in rep.fold_train_counts)
    assert (rep.n_real, rep.n_fake) == (60, 60)


def test_folds_balanced_after_downsampling():
    rep = cross_validate(stochastic_windows(70, seed=6), constant_windows(50), 5, AdversaryConfig(epochs=1))
    assert (rep.n_real, rep.n_fake) == (50, 50)
    assert rep.fold_train_counts == [(40, 40)] * 5


def test_fold_vocabularies_do_not_leak():
    real = [stochastic_windows(1, lengths=(1000 + k,), tag=f"r{k}")[0] for k in range(20)]
    fake = [stochastic_windows(1, lengths=(2000 + k,), tag=f"f{k}")[0] for k in range(20)]
    rep = cross_validate(real, fake, 5, AdversaryConfig(epochs=1), seed=0)
    assert rep.fold_unk_rates == [1.0] * 5


def test_cross_validation_reproducible():
    real, fake = stochastic_windows(30, seed=7), uniform_random_windows(stochastic_windows(30, seed=8), 0)
    cfg = AdversaryConfig(epochs=3, hidden=16)
    assert cross_validate(real, fake, 3, cfg, 4) == cross_validate(real, fake, 3, cfg, 4)


def test_null_calibration_near_chance():
    accs = [null_calibration(stochastic_windows(200, seed=s), 5, FAST, seed=s).mean_accuracy for s in range(2)]
    assert all(0.40 <= a <= 0.60 for a in accs), accs


# --- device classifier ----------------------------------------------------------------------

def test_device_classifier_separable():
    corpora = {"a": stochastic_windows(60, lengths=(100, 110, 120), device="a", seed=1),
               "b": stochastic_windows(60, lengths=(900, 950, 1000), device="b", seed=2)}
    adv, per = train_device_classifier(corpora, FAST, seed=0)
    assert adv.labels == ["a", "b"] and all(v >= 0.9 for v in per.values())


def test_device_classifier_identical_corpora():
    ws = stochastic_windows(100, seed=9)
    _, per = train_device_classifier({"a": ws, "b": ws}, FAST, seed=0)
    assert 0.2 <= np.mean(list(per.values())) <= 0.8


def test_device_classifier_single_label():
    with pytest.raises(DataError):
        train_device_classifier({"a": stochastic_windows(10)}, FAST)


# --- reports --------------------------------------------------------------------------------

def test_report_csv_and_table(tmp_path):
    reps = [EvaluationReport("cam", "iotsynth", [0.5, 0.6], 0.55, 10, 10),
            EvaluationReport("cam", "uniform", [1.0, 1.0], 1.0, 10, 10),
            EvaluationReport("plug", "iotsynth", [0.7, 0.7], 0.7, 10, 10)]
    write_report_csv(reps, tmp_path / "r.csv")
    rows = read_report_csv(tmp_path / "r.csv")
    assert rows[0] == {"device": "cam", "method": "iotsynth", "mean_accuracy": "0.550000",
                       "fold_accuracies": "0.500000 0.600000", "n_real": "10", "n_fake": "10"}
    table = render_table(rows)
    assert table == render_table(reps)
    assert "55.0%" in table and "100.0%" in table and "70.0%" in table
    plug = next(line for line in table.splitlines() if "plug" in line)
    assert "-" in plug.split("|")[3]


def test_seeded_torch_state_does_not_matter():
    real, fake = stochastic_windows(20, seed=1), constant_windows(20)
    torch.manual_seed(123)
    a = train_realfake(real, fake, AdversaryConfig(epochs=2), 5).curve
    torch.manual_seed(999)
    assert train_realfake(real, fake, AdversaryConfig(epochs=2), 5).curve == a
