"""
End-to-end checks on seeded synthetic data. Minutes of CPU; run with `pytest -m slow`.
"""

import statistics

import numpy as np
import pytest

from attention_export import attention_maps, mean_bce
from config import mslr_dir
from letor_data import Dataset, QueryGroup, align_feature_dims, normalize_query_minmax, read_letor_files
from metrics import evaluate
from model import ENCODER_KINDS, ModelConfig, init_params
from rsa_rank import CHECKPOINT_FILE, HISTORY_FILE, main
from synthetic import synthetic_splits
from trainer import TrainConfig, train

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
HIDDEN = 16
TRAIN_CONFIG = dict(learning_rate=3e-3, batch_size=16, max_epochs=40, patience=8)


def _fit(splits, variant, encoders, seed):
    train_ds, valid_ds, _ = splits
    model = init_params(ModelConfig(d=train_ds.feature_dim, d_h=HIDDEN, encoders=encoders,
                                    variant=variant, seed=seed))
    return train(model, train_ds, valid_ds, TrainConfig(seed=seed, **TRAIN_CONFIG))


@pytest.fixture(scope="module")
def fitted():
    """Per seed: ListNet, unregularized SA and regularized RSA trained on the same splits."""
    results = []
    for seed in SEEDS:
        splits = synthetic_splits(seed, 200, 50, 50, docs_per_query=20, num_features=10)
        runs = {
            "listnet": _fit(splits, "listnet", (), seed),
            "sa": _fit(splits, "listnet_sa", ENCODER_KINDS, seed),
            "rsa": _fit(splits, "listnet_rsa", ENCODER_KINDS, seed),
        }
        results.append((splits, runs))
    return results


def test_rsa_beats_listnet_on_test_ndcg(fitted):
    gaps = []
    for (_, _, test_ds), runs in fitted:
        rsa = evaluate(runs["rsa"][0], test_ds).mean("NDCG@10")
        listnet = evaluate(runs["listnet"][0], test_ds).mean("NDCG@10")
        gaps.append(rsa - listnet)
    assert statistics.median(gaps) >= 0.01


def test_regularized_validation_curve_is_above_unregularized(fitted):
    gaps = [runs["rsa"][1].best_valid_ndcg10 - runs["sa"][1].best_valid_ndcg10 for _, runs in fitted]
    assert statistics.median(gaps) > 0.0


def test_regularized_attention_is_closer_to_ideal(fitted):
    for (_, _, test_ds), runs in fitted:
        for kind in ENCODER_KINDS:
            per_model = {}
            for name in ("sa", "rsa"):
                model = runs[name][0]
                values = []
                for group in test_ds:
                    maps = attention_maps(model, group, test_ds.k_max)[kind]
                    values.append(mean_bce(maps["sigma"], maps["ideal"]))
                per_model[name] = float(np.mean(values))
            assert per_model["rsa"] < per_model["sa"], kind


def test_training_loss_decreases_over_first_epochs():
    decreasing = []
    for seed in SEEDS:
        splits = synthetic_splits(seed, 100, 20, 1, docs_per_query=20, num_features=10)
        model = init_params(ModelConfig(d=10, d_h=HIDDEN, seed=seed))
        _, history = train(model, splits[0], splits[1], TrainConfig(max_epochs=5, patience=5, seed=seed))
        losses = history.train_losses
        decreasing.append(all(b < a for a, b in zip(losses, losses[1:])))
    assert statistics.median(decreasing)


def test_linear_model_ranks_perfectly_when_features_encode_grades():
    rng = np.random.default_rng(0)
    groups = []
    for q in range(40):
        grades = rng.integers(0, 5, size=15)
        features = np.column_stack([grades.astype(float), rng.normal(size=15)])
        groups.append(QueryGroup(str(q + 1), features, grades))
    ds = Dataset(tuple(groups), 2, 4)
    model = init_params(ModelConfig(d=2, variant="listnet", seed=1))
    best, _ = train(model, ds, ds, TrainConfig(learning_rate=0.05, max_epochs=60, patience=20))
    assert evaluate(best, ds).mean("NDCG@10") >= 0.99


def test_training_twice_gives_identical_artifacts(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--seed", "11", "--train-queries", "30",
                 "--valid-queries", "10", "--test-queries", "10"]) == 0
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(["train", "--train", str(data / "train.txt"), "--valid", str(data / "vali.txt"),
                     "--out", str(out), "--hidden", "8", "--max-epochs", "4", "--workers", "2"]) == 0
        outputs.append(((out / CHECKPOINT_FILE).read_bytes(), (out / HISTORY_FILE).read_text()))
    assert outputs[0] == outputs[1]


def test_mslr_direction():
    root = mslr_dir()
    if root is None:
        pytest.skip("RSA_RANK_MSLR_DIR is not set")
    fold = root / "Fold1"
    train_ds, valid_ds, test_ds = align_feature_dims(
        read_letor_files([fold / "train.txt", fold / "vali.txt", fold / "test.txt"])
    )
    train_ds = Dataset(train_ds.groups[:1000], train_ds.feature_dim, train_ds.k_max)
    splits = [normalize_query_minmax(ds) for ds in (train_ds, valid_ds, test_ds)]
    config = TrainConfig(max_epochs=20, patience=5, workers=4)
    scores = {}
    for variant, encoders in (("listnet", ()), ("listnet_rsa", ENCODER_KINDS)):
        model = init_params(ModelConfig(d=train_ds.feature_dim, d_h=32, encoders=encoders, variant=variant))
        best, _ = train(model, splits[0], splits[1], config)
        scores[variant] = evaluate(best, splits[2]).mean("NDCG@10")
    assert scores["listnet_rsa"] > scores["listnet"]
