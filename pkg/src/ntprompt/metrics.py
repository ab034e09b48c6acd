"""Accuracy, drop rates and the three weighted protection scores.

All inputs are percentages. The leading accuracy factor of each weighted
score is used as a fraction (value / 100), which puts the scores on the
same 0..100 scale as the accuracies.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ntprompt.errors import ConfigError, DataError

DOMAIN_TAGS = ("authorized", "unauthorized", "test")


@dataclass(frozen=True)
class AccuracyPair:
    a_sl: float
    a_ip: float
    domain_tag: str = "unauthorized"
    domain: str = ""

    def __post_init__(self):
        for name in ("a_sl", "a_ip"):
            v = getattr(self, name)
            if not (np.isfinite(v) and 0.0 <= v <= 100.0):
                raise ConfigError(f"{name}={v} is not a percentage in [0, 100]")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ConfigError(f"unknown domain tag {self.domain_tag!r}")

    @property
    def drop(self):
        return self.a_sl - self.a_ip


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DataError(f"{predictions.shape[0] if predictions.ndim else 0} predictions for {labels.size} labels")
    if labels.size == 0:
        raise DataError("accuracy of an empty prediction set is undefined")
    return 100.0 * float(np.count_nonzero(predictions == labels)) / labels.size


def drop_rates(auth: AccuracyPair, unauth) -> tuple[float, float]:
    """(D_a, D_u): authorized drop, and the mean drop over unauthorized pairs."""
    unauth = list(unauth)
    if not unauth:
        raise ConfigError("drop rates need at least one unauthorized accuracy pair")
    d_a = auth.a_sl - auth.a_ip
    d_u = float(np.mean([p.a_sl - p.a_ip for p in unauth]))
    return d_a, d_u


def weighted_drop(a_ip_auth, d_u, d_a) -> float:
    return a_ip_auth / 100.0 * (d_u - d_a)


def ownership_score(a_u_sl, a_a_method, a_u_method) -> float:
    return a_u_sl / 100.0 * (a_a_method - a_u_method)


def authorization_score(a_a, a_u) -> float:
    return a_a / 100.0 * (a_a - a_u)


@dataclass
class MetricsReport:
    """Scores for one protection run with a single authorized domain.

    ``O_ua`` / ``D_ua`` are only filled in by the scenarios that define them.
    """

    authorized: AccuracyPair
    unauthorized: list
    D_a: float
    D_u: float
    W_ua: float
    O_ua: float | None = None
    D_ua: float | None = None
    per_domain: dict = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, auth: AccuracyPair, unauth, o_ua=None, d_ua=None):
        unauth = list(unauth)
        d_a, d_u = drop_rates(auth, unauth)
        per = {p.domain or f"unauthorized_{i}": p.drop for i, p in enumerate(unauth)}
        return cls(auth, unauth, d_a, d_u, weighted_drop(auth.a_ip, d_u, d_a), o_ua, d_ua, per)

    def scores(self) -> dict:
        return {"W_ua": self.W_ua, "D_u": self.D_u, "D_a": self.D_a, "O_ua": self.O_ua, "D_ua": self.D_ua}

    def to_dict(self) -> dict:
        out = self.scores()
        out["authorized"] = asdict(self.authorized)
        out["unauthorized"] = [asdict(p) for p in self.unauthorized]
        out["per_domain"] = dict(self.per_domain)
        return out


def mean_scores(reports) -> dict:
    """Arithmetic mean of each score over reports; a score missing from any report stays None."""
    reports = list(reports)
    if not reports:
        raise ConfigError("no reports to average")
    out = {}
    for key in ("W_ua", "D_u", "D_a", "O_ua", "D_ua"):
        vals = [r.scores()[key] for r in reports]
        out[key] = None if any(v is None for v in vals) else float(np.mean(vals))
    return out
