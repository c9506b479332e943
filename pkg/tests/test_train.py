from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

from finmine import model as mdl, train as trn
from finmine.errors import ClassTooSmall, EmptyDataset, InvalidConfig, SingleClassDataset

DETECT_TABLE = (("dolphin", "noise"), [[83, 10], [5, 347]])
CLASSIFY_TABLE = (("noise", "echo", "burst", "whistle"),
            [[291, 27, 15, 1], [35, 434, 9, 7], [38, 30, 207, 8], [8, 12, 5, 181]])


class ScriptedClassifier:
    """Predicts whatever class index is written into each window."""

    def __init__(self, classes, task="classify"):
        self.head = SimpleNamespace(task=task, classes=tuple(classes))

    def predict_proba(self, X):
        idx = np.asarray(X)[:, 0, 0].astype(int)
        if self.head.task == "detect":
            return idx[:, None].astype(float)
        return np.eye(len(self.head.classes))[idx]


def scripted_test_set(classes, counts):
    items = []
    for i, row in enumerate(counts):
        for j, n in enumerate(row):
            items += [(np.full((1, 1), float(j)), classes[i])] * n
    return items


@pytest.mark.parametrize("table,expected", [(DETECT_TABLE, Fraction(430, 445)), (CLASSIFY_TABLE, Fraction(1113, 1308))])
def test_evaluate_reproduces_published_tables(table, expected):
    classes, counts = table
    cm = trn.evaluate(ScriptedClassifier(classes), scripted_test_set(classes, counts))
    assert cm.counts.tolist() == counts
    assert Fraction(int(np.trace(cm.counts)), cm.total) == expected
    assert cm.accuracy == float(expected)


def test_published_accuracies_truncate_to_reported_percentages():
    assert int(430 / 445 * 100) == 96
    assert int(1113 / 1308 * 100) == 85


def test_detect_threshold_convention():
    clf = ScriptedClassifier(("noise", "signal"), task="detect")
    test = [(np.full((1, 1), 1.0), "signal"), (np.full((1, 1), 0.0), "noise")]
    assert trn.evaluate(clf, test, threshold=1.0).counts.tolist() == [[1, 0], [0, 1]]


def test_perfect_predictor():
    classes = ("a", "b", "c")
    test = [(np.full((1, 1), float(i % 3)), classes[i % 3]) for i in range(5)]
    cm = trn.evaluate(ScriptedClassifier(classes), test)
    assert cm.counts.tolist() == [[2, 0, 0], [0, 2, 0], [0, 0, 1]] and cm.accuracy == 1.0


def test_confusion_csv_roundtrip(tmp_path):
    cm = trn.ConfusionMatrix(CLASSIFY_TABLE[1], CLASSIFY_TABLE[0])
    cm.to_csv(tmp_path / "cm.csv")
    assert (tmp_path / "cm.csv").read_text().splitlines()[0] == "truth/prediction,noise,echo,burst,whistle"
    back = trn.ConfusionMatrix.from_csv(tmp_path / "cm.csv")
    assert back.counts.tolist() == CLASSIFY_TABLE[1] and back.classes == CLASSIFY_TABLE[0]
    with pytest.raises(InvalidConfig):
        trn.ConfusionMatrix([[1, 2]], ("a", "b"))


def test_split_arithmetic_and_determinism():
    data = [(i, "A") for i in range(10)] + [(i, "B") for i in range(10, 20)]
    train, test = trn.split_dataset(data, 0.6, seed=3)
    assert sorted(l for _, l in train) == ["A"] * 6 + ["B"] * 6
    assert sorted(l for _, l in test) == ["A"] * 4 + ["B"] * 4
    assert trn.split_dataset(data, 0.6, seed=3) == (train, test)
    assert {i for i, _ in train}.isdisjoint(i for i, _ in test)
    with pytest.raises(ClassTooSmall):
        trn.split_dataset(data + [(99, "C")], 0.6)
    with pytest.raises(InvalidConfig):
        trn.split_dataset(data, 1.0)


def test_batches_cover_every_index_once():
    cfg = trn.TrainConfig(batch_size=10, seed=4)
    for epoch in range(3):
        parts = trn.batches(31, cfg, epoch, min_last=2)
        assert sorted(np.concatenate(parts).tolist()) == list(range(31))
        assert min(len(p) for p in parts) >= 2
    assert [p.tolist() for p in trn.batches(31, cfg, 1)] == [p.tolist() for p in trn.batches(31, cfg, 1)]


def test_default_training_settings():
    cfg = trn.TrainConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.learning_rate) == (50, 128, 1e-3)
    head = trn.TrainConfig.for_head()
    assert (head.batch_size, head.epochs) == (10, 25)


def _tiny_ae():
    cfg = mdl.EncoderConfig(num_filters=2, bilstm_hidden=4, embedding_dim=4, decoder_hidden=4)
    return mdl.build_autoencoder(cfg, 16, seed=0)


def test_training_errors():
    ae = _tiny_ae()
    with pytest.raises(EmptyDataset):
        trn.train_autoencoder([], ae)
    clf = mdl.attach_head(ae, mdl.HeadConfig(), seed=0)
    one = [(np.zeros((128, 16), np.float32), "noise")] * 4
    with pytest.raises(SingleClassDataset):
        trn.train_head(one, clf)


def test_autoencoder_loss_decreases_and_csv(tmp_path):
    X = np.random.default_rng(0).normal(size=(4, 32, 16)).astype(np.float32)
    _, history = trn.train_autoencoder(X, _tiny_ae(), trn.TrainConfig(batch_size=2, epochs=8))
    assert len(history) == 8 and history[-1] < history[0]
    trn.write_loss_csv(tmp_path / "loss.csv", history)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss" and len(lines) == 9
    assert float(lines[-1].split(",")[1]) == history[-1]


def test_separable_embeddings_reach_full_training_accuracy():
    # windows whose first bin encodes the class: a hand-fit threshold separates them
    rng = np.random.default_rng(0)
    data = []
    for i in range(40):
        label = ("noise", "signal")[i % 2]
        w = rng.normal(0, 0.1, size=(32, 16)).astype(np.float32)
        w[:, :4] += 2.0 if label == "signal" else -2.0
        data.append((w, label))
    clf = mdl.attach_head(_tiny_ae(), mdl.HeadConfig(), seed=0)
    clf, history = trn.train_head(data, clf, trn.TrainConfig.for_head(freeze_policy="none"))
    assert trn.evaluate(clf, data).accuracy == 1.0
    assert len(history) == 25
