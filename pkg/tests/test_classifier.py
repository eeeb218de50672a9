import numpy as np
import pytest

from singerid import classifier as clf
from singerid import nn
from singerid import signal as sg
from singerid.classifier import ClassifierConfig, LabelMap
from singerid.pipeline import aggregate


def test_zero_spectrogram_features():
    f = clf.features_from_spectrogram(np.zeros((257, 30)))
    assert f.data.shape == (30, 39)
    assert np.all(f.data == f.data[0])
    assert np.all(f.data[:, 13:] == 0)


def test_features_are_mfcc_plus_deltas():
    mag = np.abs(np.random.default_rng(0).normal(size=(257, 44)))
    expected = sg.add_deltas(sg.mfcc(mag)).data
    assert np.array_equal(clf.features_from_spectrogram(mag).data, expected)


def test_features_reject_bad_input():
    with pytest.raises(ValueError, match="257 bins"):
        clf.features_from_spectrogram(np.zeros((128, 10)))
    with pytest.raises(ValueError, match="nonnegative"):
        clf.features_from_spectrogram(-np.ones((257, 10)))


def test_classnet_distribution_valid_and_deterministic():
    cfg = ClassifierConfig(num_singers=6)
    params = clf.init_classnet(cfg, 0)
    rng = np.random.default_rng(1)
    for T in (1, 7, 50):
        x = rng.normal(size=(T, 39)) * 5
        p = clf.classnet_forward(x, params, cfg)
        assert p.shape == (6,)
        assert np.all(p >= 0)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(p, clf.classnet_forward(x, params, cfg))


def test_classnet_rejects_wrong_dims():
    cfg = ClassifierConfig(num_singers=3)
    with pytest.raises(ValueError, match="dimension 39"):
        clf.classnet_forward(np.zeros((10, 13)), clf.init_classnet(cfg), cfg)


def test_untrained_classnet_is_near_uniform():
    cfg = ClassifierConfig(num_singers=6)
    rng = np.random.default_rng(2)
    maxima = [clf.classnet_forward(rng.normal(size=(20, 39)), clf.init_classnet(cfg, seed), cfg).max()
              for seed in range(100)]
    assert max(maxima) < 3 / 6


def test_classnet_gradients_reduced_size():
    cfg = ClassifierConfig(num_singers=3, feature_dims=4, layers=3, hidden=3)
    params = clf.init_classnet(cfg, 0)
    rng = np.random.default_rng(3)
    params["norm.mean"].data = rng.normal(size=4)
    params["norm.std"].data = rng.uniform(0.5, 2.0, 4)
    x = rng.normal(size=(2, 5, 4))
    y = np.array([2, 0])

    def build():
        return nn.softmax_xent(clf.classnet_logits(x, params, cfg), y)[0]

    tensors = {n: t for n, t in params.items() if params.trainable(n)}
    report = nn.grad_check(build, tensors)
    assert report.passed(1e-4), report.per_tensor


def _toy_data(num_classes=3, per_class=4, T=60, seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.normal(scale=1.5, size=(num_classes, 39))
    return [(sg.FeatureMatrix(centres[c] + rng.normal(size=(T, 39))), c)
            for c in range(num_classes) for _ in range(per_class)]


def test_training_reduces_loss_and_is_deterministic():
    cfg = ClassifierConfig(num_singers=3, batch=16)
    data = _toy_data()
    a = clf.train_classifier(data, cfg, epochs=4, seed=0)
    b = clf.train_classifier(data, cfg, epochs=4, seed=0)
    assert a.losses[-1] < a.losses[0]
    for name, t in a.params.items():
        assert np.array_equal(t.data, b.params[name].data)
    preds = [int(np.argmax(clf.classnet_forward(f, a.params, cfg))) for f, _ in data]
    assert np.mean(np.array(preds) == np.array([y for _, y in data])) == 1.0


def test_training_needs_two_classes():
    data = [(f, 0) for f, _ in _toy_data()]
    with pytest.raises(ValueError, match="at least two singers"):
        clf.train_classifier(data, ClassifierConfig(num_singers=3), epochs=1)


def test_kfold_divisible_case():
    labels = [f"s{c}" for c in range(18) for _ in range(10)]
    folds = clf.stratified_kfold(labels, k=5, seed=1)
    assert len(folds) == 5
    seen = []
    for train, test in folds:
        assert set(train).isdisjoint(test)
        assert len(train) + len(test) == len(labels)
        counts = {}
        for i in test:
            counts[labels[i]] = counts.get(labels[i], 0) + 1
        assert set(counts.values()) == {2} and len(counts) == 18
        seen += test
    assert sorted(seen) == list(range(len(labels)))
    assert folds == clf.stratified_kfold(labels, k=5, seed=1)
    assert folds != clf.stratified_kfold(labels, k=5, seed=2)


def test_kfold_uneven_balance():
    labels = ["a"] * 7 + ["b"] * 11 + ["c"] * 5
    folds = clf.stratified_kfold(labels, k=5, seed=0)
    for name in "abc":
        per_fold = [sum(labels[i] == name for i in test) for _, test in folds]
        assert max(per_fold) - min(per_fold) <= 1
    sizes = [len(test) for _, test in folds]
    assert max(sizes) - min(sizes) <= 1


def test_kfold_rejects_small_class():
    with pytest.raises(ValueError, match="'rare'"):
        clf.stratified_kfold(["common"] * 10 + ["rare"] * 3, k=5)


def test_prf_perfect_and_hand_confusion():
    m = clf.prf_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert m["macro"] == {"precision": 1.0, "recall": 1.0, "f1": 1.0, "accuracy": 1.0}
    # class 0: TP=2 FP=1 FN=1; class 1: TP=1 FP=1 FN=1
    pred = [0, 0, 1, 0, 1]
    true = [0, 0, 0, 1, 1]
    m = clf.prf_metrics(pred, true, 2)
    c0 = m["per_class"][0]
    assert c0["precision"] == pytest.approx(2 / 3)
    assert c0["recall"] == pytest.approx(2 / 3)
    assert c0["f1"] == pytest.approx(2 / 3)


def test_prf_constant_predictor():
    m = clf.prf_metrics([0, 0, 0, 0], [0, 0, 1, 1], 2)
    assert m["macro"]["f1"] == pytest.approx(1 / 3)


def test_prf_label_range():
    with pytest.raises(ValueError, match="out of range"):
        clf.prf_metrics([0, 3], [0, 1], 2)


def test_aggregate_mean_and_ties():
    d = np.array([0.2, 0.5, 0.3])
    single = aggregate([d])
    assert np.array_equal(single.distribution, d) and single.singer == 1
    rng = np.random.default_rng(0)
    dists = [nn.softmax(rng.normal(size=4)) for _ in range(5)]
    a, b = aggregate(dists), aggregate(dists[::-1])
    assert a.singer == b.singer
    assert np.allclose(a.distribution, b.distribution, atol=1e-15)
    assert aggregate([[0.4, 0.4, 0.2]]).singer == 0


def test_label_map():
    lm = LabelMap.from_labels(["b", "a", "b", "c"])
    assert lm.names == ("a", "b", "c") and lm.index("c") == 2
    with pytest.raises(KeyError, match="zed"):
        lm.index("zed")


def test_bundle_roundtrip(tmp_path):
    cfg = ClassifierConfig(num_singers=3)
    params = clf.init_classnet(cfg, 5)
    labels = LabelMap(("x", "y", "z"))
    clf.save_classifier(params, tmp_path / "cls", cfg, labels)
    p2, cfg2, labels2 = clf.load_classifier(tmp_path / "cls")
    assert cfg2 == cfg and labels2 == labels
    for name, t in params.items():
        assert np.array_equal(p2[name].data, t.data)
    with pytest.raises(ValueError, match="label map"):
        clf.save_classifier(params, tmp_path / "bad", cfg, LabelMap(("x", "y")))
