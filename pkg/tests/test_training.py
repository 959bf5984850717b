import numpy as np
import polars as pl
import pytest

from pnpmix.errors import FormatError, ParameterError, TrainingError
from pnpmix.predictor import (
    ToyConfig,
    ToyDenoiser,
    TrainingExample,
    gradient_check,
    load_dataset,
    make_blob_dataset,
    save_dataset,
    train_toy,
)
from pnpmix.tensor import LatentTensor


@pytest.fixture(scope="module")
def blobs():
    return make_blob_dataset(16, (1, 8, 8), seed=0)


def small_model(seed=0):
    return ToyDenoiser(ToyConfig(model_width=16), seed=seed)


def test_blob_dataset(blobs):
    assert len(blobs) == 16
    assert {ex.label for ex in blobs} == {0, 1}
    for ex in blobs:
        peak = ex.x_0.data.max() if ex.label == 0 else -ex.x_0.data.min()
        assert 0.5 < peak <= 1.0
    with pytest.raises(ParameterError):
        make_blob_dataset(0, (1, 8, 8), seed=0)


def test_initial_loss_on_zero_images(sched50):
    zeros = [TrainingExample(LatentTensor.zeros(1, 8, 8), i % 2) for i in range(8)]
    report = train_toy(small_model(), zeros, sched50, steps=5, lr=0.01, seed=1, batch_size=16)
    assert 0.8 < report.initial_loss < 1.2


def test_loss_decreases(blobs, sched50):
    report = train_toy(small_model(), blobs, sched50, steps=500, lr=0.02, seed=0, batch_size=8)
    assert report.losses.columns == ["step", "loss"]
    assert report.losses.height == 500
    assert report.window_mean(-50, 50) < 0.7 * report.window_mean(0, 10)


def test_training_is_reproducible(blobs, sched50, tmp_path):
    paths = []
    for k in range(2):
        model = small_model(seed=3)
        train_toy(model, blobs, sched50, steps=20, lr=0.02, seed=5, batch_size=4)
        paths.append(tmp_path / f"m{k}.pnpc")
        model.save(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_gradient_check(blobs, sched50):
    model = small_model(seed=2).init_parameters(2, zero_output=False)
    df = gradient_check(model, blobs, sched50, n_params=8, seed=1)
    assert df.height == 8
    assert set(df.columns) == {"parameter", "index", "analytic", "numeric", "rel_error"}
    assert df.get_column("rel_error").max() < 1e-3


def test_training_errors(blobs, sched50):
    with pytest.raises(TrainingError):
        train_toy(small_model(), [], sched50, steps=1, lr=0.1, seed=0)
    wrong = [TrainingExample(LatentTensor.zeros(1, 4, 4), 0)]
    with pytest.raises(TrainingError):
        train_toy(small_model(), wrong, sched50, steps=1, lr=0.1, seed=0)
    bad_label = [TrainingExample(LatentTensor.zeros(1, 8, 8), 5)]
    with pytest.raises(TrainingError):
        train_toy(small_model(), bad_label, sched50, steps=1, lr=0.1, seed=0)
    with pytest.raises(ParameterError):
        train_toy(small_model(), blobs, sched50, steps=0, lr=0.1, seed=0)


def test_divergence_reports_step(blobs, sched50):
    model = small_model().init_parameters(0, zero_output=False)
    with pytest.raises(TrainingError) as info:
        train_toy(model, blobs, sched50, steps=200, lr=1e12, seed=0, batch_size=4)
    assert info.value.step is not None


def test_dataset_roundtrip(blobs, tmp_path):
    save_dataset(blobs, tmp_path / "data")
    loaded = load_dataset(tmp_path / "data")
    assert [ex.label for ex in loaded] == [ex.label for ex in blobs]
    assert all(a.x_0.bit_equal(b.x_0) for a, b in zip(loaded, blobs))


def test_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
    pl.DataFrame({"name": ["a.pnpl"]}).write_csv(tmp_path / "labels.csv")
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_dataset_empty_labels(tmp_path):
    (tmp_path / "labels.csv").write_bytes(b"")
    with pytest.raises(FormatError, match="labels"):
        load_dataset(tmp_path)
