import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntprompt import metrics as M
from ntprompt import reference
from ntprompt.errors import ConfigError, DataError

pct = st.floats(0.0, 100.0)


def test_office31_amazon_drop_rates():
    auth = M.AccuracyPair(79.4, 79.4, "authorized")
    d_a, d_u = M.drop_rates(auth, [M.AccuracyPair(87.5, 7.5), M.AccuracyPair(88.8, 8.8)])
    assert d_u == pytest.approx(80.00, abs=0.005)
    assert d_a == pytest.approx(0.00, abs=0.005)


def test_equal_accuracies_give_zero_drops():
    auth = M.AccuracyPair(70.0, 70.0, "authorized")
    assert M.drop_rates(auth, [M.AccuracyPair(40.0, 40.0)] * 3) == (0.0, 0.0)


def test_drop_rates_hand_mean():
    auth = M.AccuracyPair(90.0, 85.5, "authorized")
    pairs = [M.AccuracyPair(80.25, 10.0), M.AccuracyPair(60.0, 12.5), M.AccuracyPair(77.0, 1.0)]
    d_a, d_u = M.drop_rates(auth, pairs)
    assert abs(d_a - 4.5) <= 1e-12
    assert abs(d_u - (70.25 + 47.5 + 76.0) / 3) <= 1e-12


def test_drop_rates_need_unauthorized_pairs():
    with pytest.raises(ConfigError):
        M.drop_rates(M.AccuracyPair(1.0, 1.0, "authorized"), [])


@pytest.mark.parametrize(
    "args, expected",
    [((79.4, 80.00, 0.00), 63.52), ((95.7, 86.25, 0.00), 82.54), ((94.4, 83.10, 0.00), 78.45)],
)
def test_weighted_drop_published_rows(args, expected):
    assert abs(M.weighted_drop(*args) - expected) <= 0.05


@pytest.mark.parametrize(
    "args, expected", [((80.0, 81.3, 3.8), 62.0), ((97.5, 97.5, 3.8), 91.4), ((95.0, 96.3, 1.3), 90.3)]
)
def test_ownership_published_rows(args, expected):
    assert abs(M.ownership_score(*args) - expected) <= 0.05 + 1e-9


@pytest.mark.parametrize("args, expected", [((95.80, 9.77), 82.42), ((63.00, 3.53), 37.46), ((83.30, 15.53), 56.45)])
def test_authorization_published_rows(args, expected):
    assert abs(M.authorization_score(*args) - expected) <= 0.05


@given(x=pct)
def test_scores_vanish_when_behaviour_coincides(x):
    assert M.weighted_drop(x, 0.0, 0.0) == 0.0
    assert M.ownership_score(x, 55.0, 55.0) == 0.0
    assert M.authorization_score(x, x) == 0.0


@given(a=st.floats(0.1, 100.0), d_u=st.floats(-100, 100), d_a=st.floats(-100, 100), step=st.floats(0.01, 50))
def test_weighted_drop_monotone(a, d_u, d_a, step):
    assert M.weighted_drop(a, d_u + step, d_a) > M.weighted_drop(a, d_u, d_a)
    assert M.weighted_drop(a, d_u, d_a + step) < M.weighted_drop(a, d_u, d_a)


def test_accuracy_edges():
    y = np.array([0, 1, 2, 1])
    assert M.accuracy(y, y) == 100.0
    assert M.accuracy((y + 1) % 3, y) == 0.0
    with pytest.raises(DataError):
        M.accuracy([], [])
    with pytest.raises(DataError):
        M.accuracy([0, 1], [0])


@settings(max_examples=30)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 200))
def test_accuracy_counting_oracle(seed, n):
    rng = np.random.default_rng(seed)
    pred, y = rng.integers(0, 4, n), rng.integers(0, 4, n)
    correct = 0
    for p, t in zip(pred, y):
        correct += int(p == t)
    assert M.accuracy(pred, y) == 100.0 * correct / n


@pytest.mark.parametrize("bad", [-0.1, 100.5, float("nan")])
def test_accuracy_pair_rejects_non_percentages(bad):
    with pytest.raises(ConfigError):
        M.AccuracyPair(bad, 50.0)


def test_report_from_pairs_and_mean_row():
    reports = reference.target_specified_reports()
    amazon = reports["Amazon"]
    assert set(amazon.per_domain) == {"Dslr", "Webcam"}
    assert amazon.O_ua is None and amazon.D_ua is None
    mean = M.mean_scores(reports.values())
    for key, expected in zip(("W_ua", "D_u", "D_a"), (74.84, 83.12, 0.00)):
        assert abs(mean[key] - expected) <= 0.05
    assert mean["O_ua"] is None
    assert set(amazon.to_dict()) >= {"W_ua", "D_u", "D_a", "O_ua", "D_ua", "authorized", "unauthorized"}


def test_every_published_score_reproduces():
    failed = [c for c in reference.reproduce_all() if not c.passed]
    assert not failed, failed
