"""Tests for the identification pipeline and the defense report."""

import numpy as np
import pytest
import torch
import torch.nn as nn

from mempure.attacks import AttackSpec
from mempure.data import make_vein_dataset, split_per_class
from mempure.recognition import (
    CLASSIFIER_REGISTRY,
    DEFENSE_REPORT_COLUMNS,
    VeinCNN,
    cosine_match,
    enroll,
    evaluate_defense,
    identification_accuracy,
    load_classifier,
    predict_identity,
    read_defense_report,
    register_classifier,
    render_defense_table,
    save_classifier,
    train_classifier,
    write_defense_report,
)
from mempure.validation import to_nchw


@pytest.fixture(scope="module")
def tiny_dataset():
    images, labels = make_vein_dataset(3, 6, image_size=32, seed=11)
    return split_per_class(images, labels, 4)


@pytest.fixture(scope="module")
def trained(tiny_dataset):
    x_tr, y_tr, _, _ = tiny_dataset
    model = train_classifier(x_tr, y_tr, epochs=15, batch_size=8,
                             seed=0, embedding_dim=32)
    templates = enroll(model, x_tr, y_tr)
    return model, templates


class TestVeinCNN:
    def test_shapes(self):
        model = VeinCNN(n_classes=5, image_size=32, embedding_dim=16)
        x = torch.rand(4, 1, 32, 32)
        assert model.embed(x).shape == (4, 16)
        assert model(x).shape == (4, 5)

    def test_rejects_bad_image_size(self):
        with pytest.raises(ValueError, match="image_size"):
            VeinCNN(n_classes=2, image_size=30)

    def test_hparams_capture_constructor_args(self):
        model = VeinCNN(n_classes=7, image_size=32, embedding_dim=24)
        assert model.hparams == dict(n_classes=7, image_size=32,
                                     in_channels=1, embedding_dim=24)


class TestTrainClassifier:
    def test_same_seed_same_weights(self, tiny_dataset):
        x_tr, y_tr, _, _ = tiny_dataset
        a = train_classifier(x_tr, y_tr, epochs=2, seed=3, embedding_dim=16)
        b = train_classifier(x_tr, y_tr, epochs=2, seed=3, embedding_dim=16)
        for ka, kb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(ka, kb)

    def test_different_seed_differs(self, tiny_dataset):
        x_tr, y_tr, _, _ = tiny_dataset
        a = train_classifier(x_tr, y_tr, epochs=0, seed=3, embedding_dim=16)
        b = train_classifier(x_tr, y_tr, epochs=0, seed=4, embedding_dim=16)
        assert not torch.equal(a.conv1.weight, b.conv1.weight)

    def test_returns_eval_mode(self, tiny_dataset):
        x_tr, y_tr, _, _ = tiny_dataset
        model = train_classifier(x_tr, y_tr, epochs=0, seed=0)
        assert not model.training

    def test_learns_separable_classes(self, trained, tiny_dataset):
        model, templates = trained
        _, _, x_te, y_te = tiny_dataset
        acc = identification_accuracy(
            predict_identity(model, templates, x_te), y_te)
        assert acc >= 2 / 3

    def test_unknown_backbone_raises(self, tiny_dataset):
        x_tr, y_tr, _, _ = tiny_dataset
        with pytest.raises(ValueError, match="backbone"):
            train_classifier(x_tr, y_tr, epochs=0, backbone="nope")

    def test_registry_dispatch(self, tiny_dataset):
        @register_classifier("_test_backbone")
        class Tiny(VeinCNN):
            pass

        try:
            x_tr, y_tr, _, _ = tiny_dataset
            model = train_classifier(x_tr, y_tr, epochs=0,
                                     backbone="_test_backbone")
            assert isinstance(model, Tiny)
            assert model.backbone_name == "_test_backbone"
        finally:
            CLASSIFIER_REGISTRY.pop("_test_backbone")


class TestEnroll:
    def test_templates_are_per_class_embedding_means(self, trained, tiny_dataset):
        model, templates = trained
        x_tr, y_tr, _, _ = tiny_dataset
        with torch.no_grad():
            emb = model.embed(to_nchw(x_tr)).numpy()
        for cls in range(3):
            expected = emb[y_tr == cls].mean(axis=0)
            np.testing.assert_allclose(templates[cls], expected, rtol=1e-6)

    def test_shape_and_dtype(self, trained):
        _, templates = trained
        assert templates.shape == (3, 32)
        assert templates.dtype == np.float64

    def test_repeat_enrollment_is_identical(self, trained, tiny_dataset):
        model, templates = trained
        x_tr, y_tr, _, _ = tiny_dataset
        again = enroll(model, x_tr, y_tr)
        assert np.array_equal(templates, again)

    def test_missing_class_raises(self, trained, tiny_dataset):
        model, _ = trained
        x_tr, y_tr, _, _ = tiny_dataset
        keep = y_tr != 1
        with pytest.raises(ValueError, match="class 1"):
            enroll(model, x_tr[keep], y_tr[keep])


class TestCosineMatch:
    def test_hand_case(self):
        templates = np.eye(2)
        emb = np.array([[2.0, 0.1], [0.1, 0.5], [-1.0, 3.0]])
        assert np.array_equal(cosine_match(emb, templates), [0, 1, 1])

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        templates = rng.normal(size=(5, 8))
        emb = rng.normal(size=(10, 8))
        base = cosine_match(emb, templates)
        assert np.array_equal(cosine_match(emb * 37.5, templates), base)
        assert np.array_equal(cosine_match(emb, templates * 0.01), base)

    def test_tie_breaks_to_lowest_index(self):
        templates = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        emb = np.array([[3.0, 0.0]])
        assert cosine_match(emb, templates)[0] == 0

    def test_zero_norm_embedding_raises(self):
        with pytest.raises(ValueError, match="degenerate"):
            cosine_match(np.zeros((1, 3)), np.eye(3))

    def test_zero_norm_template_raises(self):
        templates = np.eye(3)
        templates[1] = 0.0
        with pytest.raises(ValueError, match="degenerate"):
            cosine_match(np.ones((1, 3)), templates)


class TestAccuracy:
    def test_hand_values(self):
        assert identification_accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75
        assert identification_accuracy([0], [0]) == 1.0
        assert identification_accuracy([1], [0]) == 0.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            identification_accuracy([0, 1], [0])


@pytest.fixture(scope="module")
def report(trained, tiny_dataset):
    model, templates = trained
    _, _, x_te, y_te = tiny_dataset
    specs = [AttackSpec(family="fgsm", epsilon=0.0),
             AttackSpec(family="fgsm", epsilon=0.05)]
    defenses = {"msmemorygan": lambda batch: batch,
                "cosine-ablation": lambda batch: np.clip(batch + 0.01, 0, 1)}
    return evaluate_defense(model, templates, x_te, y_te, specs, defenses,
                            classifier_id="veincnn", attack_batch=4)


class TestEvaluateDefense:
    def test_row_order_and_cardinality(self, report):
        assert len(report) == 1 + 2 * 3
        assert (report[0]["attack"], report[0]["defense"]) == ("none", "none")
        for base in (1, 4):
            assert report[base]["defense"] == "none"
            assert report[base + 1]["defense"] == "msmemorygan"
            assert report[base + 2]["defense"] == "cosine-ablation"
        assert all(r["attack"] == "fgsm" for r in report[1:])

    def test_zero_epsilon_attack_matches_clean(self, report):
        clean = report[0]["accuracy"]
        assert report[1]["epsilon"] == 0.0
        assert report[1]["accuracy"] == clean
        assert report[2]["accuracy"] == clean  # identity defense on identity attack

    def test_identity_defense_equals_undefended(self, report):
        # rows 4 (no defense) and 5 (identity purifier) see the same pixels
        assert report[5]["accuracy"] == report[4]["accuracy"]

    def test_row_metadata(self, report, tiny_dataset):
        _, _, x_te, _ = tiny_dataset
        assert all(r["classifier_id"] == "veincnn" for r in report)
        assert all(r["n_eval"] == len(x_te) for r in report)
        assert report[4]["epsilon"] == 0.05

    def test_csv_round_trip_and_stable_bytes(self, report, tmp_path):
        path_a = write_defense_report(tmp_path / "a.csv", report)
        path_b = write_defense_report(tmp_path / "b.csv", report)
        assert path_a.read_bytes() == path_b.read_bytes()
        loaded = read_defense_report(path_a)
        assert len(loaded) == len(report)
        for got, want in zip(loaded, report):
            assert got["classifier_id"] == want["classifier_id"]
            assert got["attack"] == want["attack"]
            assert got["defense"] == want["defense"]
            assert got["epsilon"] == want["epsilon"]
            assert got["accuracy"] == pytest.approx(want["accuracy"], abs=1e-6)
            assert got["n_eval"] == want["n_eval"]

    def test_csv_header(self, report, tmp_path):
        path = write_defense_report(tmp_path / "h.csv", report)
        header = path.read_text().splitlines()[0]
        assert header == ",".join(DEFENSE_REPORT_COLUMNS)

    def test_render_table(self, report):
        text = render_defense_table(report)
        lines = text.splitlines()
        assert len(lines) == 2 + len(report)
        assert lines[0].split() == list(DEFENSE_REPORT_COLUMNS)
        assert "msmemorygan" in text and "cosine-ablation" in text


class TestSaveLoadClassifier:
    def test_round_trip(self, trained, tiny_dataset, tmp_path):
        model, templates = trained
        _, _, x_te, _ = tiny_dataset
        path = save_classifier(tmp_path / "clf.pt", model, templates,
                               config_hash="abc123")
        loaded_model, loaded_templates = load_classifier(path)
        assert np.array_equal(loaded_templates, templates)
        assert not loaded_model.training
        for ka, kb in zip(model.state_dict().values(),
                          loaded_model.state_dict().values()):
            assert torch.equal(ka, kb)
        before = predict_identity(model, templates, x_te)
        after = predict_identity(loaded_model, loaded_templates, x_te)
        assert np.array_equal(before, after)

    def test_unregistered_backbone_rejected(self, trained, tmp_path):
        model, templates = trained
        model.backbone_name = "vanished"
        try:
            path = save_classifier(tmp_path / "bad.pt", model, templates)
        finally:
            model.backbone_name = "veincnn"
        with pytest.raises(ValueError, match="vanished"):
            load_classifier(path)
