import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sadconv import ShadowRemover
from sadconv.dataio import SynthConfig, stack_batch, synth_triplets


@pytest.fixture(scope="module")
def batch():
    return stack_batch(synth_triplets(SynthConfig(seed=0, size=16), 3))


def _small(**kw):
    return ShadowRemover(epochs=2, batch_size=2, channels=4, n_blocks=1, warmup_epochs=1, **kw)


def test_fit_predict_score(batch):
    x, m, y = batch
    est = _small().fit(x, y, m)
    assert len(est.history_) == 2
    pred = est.predict(x, m)
    assert pred.shape == x.shape and pred.min() >= 0 and pred.max() <= 1
    assert est.score(x, y, m) <= 0


def test_predict_before_fit_raises(batch):
    x, m, _ = batch
    with pytest.raises(NotFittedError):
        _small().predict(x, m)


def test_params_round_trip_through_clone():
    est = _small(kappa=5, arm="shared-conv")
    params = clone(est).get_params()
    assert params == est.get_params() and params["kappa"] == 5


def test_fit_is_deterministic(batch):
    x, m, y = batch
    a = _small().fit(x, y, m).predict(x, m)
    b = _small().fit(x, y, m).predict(x, m)
    assert a.tobytes() == b.tobytes()


def test_uint8_input_and_single_mask_broadcast(batch):
    x, m, y = batch
    est = _small().fit((x * 255).round().astype(np.uint8), y, m)
    assert est.predict(x[0], m[0]).shape == (1,) + x.shape[1:]


@pytest.mark.parametrize("bad", ["range", "shape", "mask"])
def test_input_validation(batch, bad):
    x, m, y = batch
    if bad == "range":
        args = (x * 2, y, m)
    elif bad == "shape":
        args = (x[:, :2], y, m)
    else:
        args = (x, y, m.astype(np.uint8) * 3)
    with pytest.raises(ValueError):
        _small().fit(*args)
