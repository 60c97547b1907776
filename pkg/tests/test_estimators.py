import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from crrec import CRRRecommender, InteractionEncoder, NextItemRecommender
from crrec.errors import DataError

SMALL = dict(dim=16, n_blocks=1, n_heads=2)


@pytest.fixture(scope="module")
def fitted(small_sessions):
    _, _, ds = small_sessions
    base = NextItemRecommender(epochs=2, lr=3e-3, **SMALL).fit(ds)
    crr = CRRRecommender(init=base, iterations=10, eval_every=5, critic_hidden=16, batch_size=32,
                         **SMALL).fit(ds)
    return ds, base, crr


def test_params_and_clone():
    est = CRRRecommender(gamma=0.3, iterations=7)
    params = est.get_params()
    assert params["gamma"] == 0.3 and params["iterations"] == 7
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(beta=2.0)
    assert est.beta == 2.0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        NextItemRecommender().predict(np.zeros((1, 5), dtype=int))
    with pytest.raises(NotFittedError):
        InteractionEncoder().transform([])


def test_encoder(small_sessions):
    _, records, ds = small_sessions
    enc = InteractionEncoder(window=8, split=(0.8, 0.1, 0.1)).fit(records)
    out = enc.transform(records)
    assert enc.n_items_ == ds.n_items and enc.schema_ == "sessions"
    assert np.array_equal(out.train.states, ds.train.states)


def test_predict_shapes(fitted):
    ds, base, crr = fitted
    states = ds.test.states[:5]
    for est in (base, crr):
        top = est.predict(states, k=10)
        assert top.shape == (5, 10) and top.min() >= 1 and top.max() <= ds.n_items
        proba = est.predict_proba(states)
        assert proba.shape == (5, ds.n_items) and np.allclose(proba.sum(1), 1)
        # predict is consistent with the decision function
        dec = est.decision_function(states)
        assert np.all(dec[np.arange(5), top[:, 0] - 1] == dec.max(1))
        assert 0 <= est.score(ds) <= 1
    assert base.best_epoch_ in (1, 2) and len(crr.curve_) == 2


def test_crr_does_not_modify_init(small_sessions, fitted):
    ds, base, _ = fitted
    before = {k: v.clone() for k, v in base.policy_.state_dict().items()}
    CRRRecommender(init=base, iterations=3, eval_every=3, critic_hidden=16, lr=1e-2, **SMALL).fit(ds)
    assert all((before[k] == v).all() for k, v in base.policy_.state_dict().items())


def test_input_validation(fitted):
    ds, base, _ = fitted
    with pytest.raises(DataError):
        base.predict(np.zeros((2, 3), dtype=int))
    with pytest.raises(DataError):
        base.predict(np.full((1, ds.window), ds.n_items + 1))
    with pytest.raises(DataError):
        base.predict(ds.test.states[:1], k=0)
    with pytest.raises(DataError):
        base.fit([1, 2, 3])
