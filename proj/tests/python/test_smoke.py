"""End-to-end smoke tests of the Python surface.

Everything here runs on toy sizes (16x16 canvases, a couple of dozen images)
so the whole file finishes in well under a minute.
"""

import numpy as np
import pytest

import attnet


@pytest.fixture(scope="module")
def data():
    train = attnet.synth_clutter(num=24, classes=4, canvas=16, object_size=8,
                                 density=0.3, seed=5)
    test = attnet.synth_clutter(num=12, classes=4, canvas=16, object_size=8,
                                density=0.3, seed=6)
    return train, test


@pytest.fixture(scope="module")
def net(data):
    train, test = data
    model = attnet.Network.build("vgg-mini-att2-pc-concat", classes=4, input_hw=16,
                                 seed=3)
    scale, shift = attnet.fit_channel_stats(train["images"])
    model.set_input_normalization(scale, shift)
    attnet.train(model, train["images"], train["labels"], test["images"],
                 test["labels"], epochs=1, batch_size=8, lr0=0.05, seed=3)
    return model


def test_version():
    assert attnet.__version__ == "0.1.0"


def test_synth_clutter_is_coherent(data):
    train, _ = data
    images = train["images"]
    assert images.shape == (24, 3, 16, 16)
    assert images.min() >= 0.0 and images.max() <= 1.0
    assert set(train["labels"]) <= set(range(4))
    assert train["boxes"].shape == (24, 4)
    x, y, w, h = train["boxes"][0]
    assert 0 <= x and 0 <= y and x + w <= 16 and y + h <= 16
    mask = train["masks"][0]
    assert mask.shape == (16, 16)
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_predict_is_normalized(net, data):
    _, test = data
    probs, maps = net.predict(test["images"])
    assert probs.shape == (12, 4)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert len(maps) == 2  # two attention heads
    for m in maps:
        assert m.shape[0] == 12
        np.testing.assert_allclose(m.reshape(12, -1).sum(axis=1), 1.0, atol=1e-9)
        assert (m >= 0.0).all()


def test_training_is_deterministic(data):
    train, test = data

    def one_run():
        model = attnet.Network.build("vgg-mini-att2-pc-concat", 4, 16, seed=3)
        report = attnet.train(model, train["images"], train["labels"],
                              test["images"], test["labels"], epochs=1,
                              batch_size=8, lr0=0.05, seed=3)
        return report

    a, b = one_run(), one_run()
    assert a["final_test_error"] == b["final_test_error"]
    assert len(a["epochs"]) == 1
    assert a["epochs"][0]["train_loss"] == b["epochs"][0]["train_loss"]


def test_evaluate_range(net, data):
    _, test = data
    err = attnet.evaluate(net, test["images"], test["labels"])
    assert 0.0 <= err <= 100.0


def test_fgsm_budget_and_zero_epsilon(net, data):
    _, test = data
    images = test["images"][:6]
    assert attnet.fooling_rate(net, images, 0.0) == 0.0
    adv = attnet.fgsm(net, images, 4.0)
    assert adv.shape == images.shape
    assert (np.abs(adv - images) * 255.0).max() <= 4.0
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_segmentation_mask(net, data):
    _, test = data
    mask, threshold = attnet.segment(net, test["images"][0])
    assert mask.shape == (16, 16)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert 0 <= threshold <= 255
    fused = attnet.fused_map(net, test["images"][0])
    assert fused.shape == (16, 16)
    assert fused.min() >= 0.0 and fused.max() <= 1.0


def test_attention_mass_in_box():
    uniform = np.full((8, 8), 1.0 / 64.0)
    mass = attnet.attention_mass_in_box(uniform, (8, 8, 16, 16), 32, 32)
    assert mass == pytest.approx(0.25, abs=1e-12)


def test_jaccard_and_otsu():
    a = np.zeros((4, 4))
    a[1:3, 1:3] = 1.0
    assert attnet.jaccard(a, a) == 1.0
    assert attnet.jaccard(a, np.zeros((4, 4))) == 0.0
    two_level = np.zeros((2, 4))
    two_level[1, :] = 1.0
    assert attnet.otsu_threshold(two_level) == 0


def test_transfer_pipeline(net, data):
    train, _ = data
    feats = attnet.extract_features(net, train["images"])
    assert feats.shape[0] == 24
    result = attnet.linear_transfer(feats, train["labels"], folds=3, C=1.0,
                                    seed=0, iters=500)
    assert len(result["fold_accuracies"]) == 3
    assert 0.0 <= result["mean_accuracy"] <= 100.0


def test_query_swap_self_is_identity(net, data):
    _, test = data
    img = test["images"][0]
    swap = attnet.query_swap(net, img, img)
    assert len(swap["map_self"]) == 2
    for self_map, query_map, rel in zip(swap["map_self"], swap["map_query"],
                                        swap["rel_change"]):
        np.testing.assert_array_equal(self_map, query_map)
        assert (rel == 0.0).all()
        assert self_map.sum() == pytest.approx(1.0, abs=1e-9)


def test_checkpoint_roundtrip(net, data, tmp_path):
    _, test = data
    attnet.save_checkpoint(str(tmp_path / "ckpt"), net)
    clone = attnet.load_checkpoint(str(tmp_path / "ckpt"))
    p0, _ = net.predict(test["images"][:2])
    p1, _ = clone.predict(test["images"][:2])
    np.testing.assert_array_equal(p0, p1)
    assert clone.param_total() == net.param_total()
    assert clone.attention_taps == ["b3r2", "b4r2"]


def test_errors_surface_as_python_exceptions():
    with pytest.raises(ValueError):
        attnet.Network.build("no-such-preset", 4, 16, seed=1)
    with pytest.raises(ValueError):
        attnet.attention_mass_in_box(np.full((2, 2), 0.25), (0, 0, 0, 0), 8, 8)
    with pytest.raises(OSError):
        attnet.load_checkpoint("/nonexistent/checkpoint/dir")
