"""End-to-end experiment orchestration and result tables.

A run trains the supervised baseline and the protected model on the same
scenario, evaluates both on every split, and writes::

    <output_dir>/
      config.yaml
      checkpoints/{baseline,protected}.npz/.json   tensor archives
      manifests/{baseline,protected}.json          RunManifest dumps
      logs/{baseline,protected}_loss.csv
      results.csv / results.json                   ResultTable
      metrics.csv / metrics.json                   weighted scores + mean row
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ntprompt import metrics as M
from ntprompt import toydata
from ntprompt import trainer as tr
from ntprompt.archive import atomic_write_text, load_archive, save_archive
from ntprompt.backbone import make_backbone
from ntprompt.config import RunConfig
from ntprompt.datasets import ingest_dataset, load_domain, split_domain, toy_domain
from ntprompt.errors import ConfigError, DataError, NTPromptError
from ntprompt.scenarios import build_scenario

log = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "scenario",
    "authorized",
    "domain",
    "role",
    "A_sl",
    "A_ip",
    "n_samples",
    "dataset_hash",
    "sl_checkpoint",
    "ip_checkpoint",
)
METRIC_COLUMNS = ("scenario", "authorized", "method", "W_ua", "D_u", "D_a", "O_ua", "D_ua")


class StageError(NTPromptError):
    """Wraps a failure with the name of the stage it happened in; keeps the original exit code."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


@contextlib.contextmanager
def stage(name):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# -- result tables -------------------------------------------------------------------


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)  # dicts keyed by RESULT_COLUMNS

    def add(self, **row):
        self.rows.append({k: row[k] for k in RESULT_COLUMNS})

    def by_domain(self):
        return {r["domain"]: r for r in self.rows}

    def to_csv(self) -> str:
        return _csv(RESULT_COLUMNS, self.rows)

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2, sort_keys=False)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def metric_rows(reports) -> list:
    """One row per (scenario, authorized, method) report plus a Mean row per (scenario, method).

    ``reports`` is a list of dicts with keys scenario, authorized, method, report.
    """
    if not reports:
        raise ConfigError("render_tables needs at least one report")
    rows = []
    groups = {}
    for item in reports:
        rep = item["report"]
        scores = rep.scores() if isinstance(rep, M.MetricsReport) else dict(rep)
        row = {"scenario": item["scenario"], "authorized": item["authorized"], "method": item["method"]}
        row.update({k: scores.get(k) for k in METRIC_COLUMNS[3:]})
        rows.append(row)
        groups.setdefault((item["scenario"], item["method"]), []).append(row)
    for (scenario, method), group in groups.items():
        mean = {"scenario": scenario, "authorized": "Mean", "method": method}
        for k in METRIC_COLUMNS[3:]:
            vals = [r[k] for r in group]
            mean[k] = None if any(v is None for v in vals) else float(np.mean(vals))
        rows.append(mean)
    return rows


def render_tables(reports, out_dir, stem="metrics") -> list:
    """Write ``<stem>.csv`` and ``<stem>.json`` (same rows, same column order); returns the rows."""
    rows = metric_rows(reports)
    out_dir = Path(out_dir)
    atomic_write_text(out_dir / f"{stem}.csv", _csv(METRIC_COLUMNS, rows))
    atomic_write_text(out_dir / f"{stem}.json", json.dumps([{c: r[c] for c in METRIC_COLUMNS} for r in rows], indent=2))
    return rows


def read_metric_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in METRIC_COLUMNS[3:]:
            r[k] = float(r[k]) if r[k] != "" else None
    return rows


# -- data ------------------------------------------------------------------------------


def materialize(config: RunConfig):
    """(train, test, class_names, concepts) for the configured data source."""
    data = config.data
    names = config.scenario.domain_names()
    if data.source == "toy":
        unknown = sorted(set(names) - set(toydata.STYLES))
        if unknown:
            raise ConfigError(f"toy data has styles {sorted(toydata.STYLES)}, scenario asks for {unknown}")
        seed = config.seed if data.seed is None else data.seed
        domains = {n: toy_domain(n, data.n_per_class, data.image_size, seed) for n in names}
        class_names = list(toydata.CLASS_NAMES)
        concepts = toydata.concept_images(size=data.image_size)
    else:
        index = ingest_dataset(data.root)
        domains = {n: load_domain(index, n, data.image_size) for n in names}
        class_names = list(index.classes)
        concepts = None
    train, test = {}, {}
    for n, d in domains.items():
        train[n], test[n] = split_domain(d, data.test_fraction, config.seed)
    return train, test, class_names, concepts


# -- run -------------------------------------------------------------------------------


@dataclass
class TrainedRun:
    config: RunConfig
    backbone: object
    class_names: list
    scenario: object
    baseline: tr.TrainResult | None
    protected: tr.TrainResult | None
    sl_model: tr.PromptLearner
    ip_model: tr.PromptLearner
    sl_hash: str
    ip_hash: str


def _train_protected(config, backbone, class_names, scenario, features):
    mode = config.scenario.mode
    d_a, d_u = scenario.train_authorized, scenario.train_unauthorized
    if mode == "target_free":
        return tr.train_target_free(
            config.train, backbone, class_names, d_a, config.scenario.n_aug, features=features, d_u=d_u
        )
    return tr.train_target_specified(config.train, backbone, class_names, d_a, d_u, features, kind=mode)


def train_run(config: RunConfig) -> TrainedRun:
    out = Path(config.output_dir)
    with stage("config"):
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "config.yaml", config.to_yaml())
    with stage("data"):
        train, test, class_names, concepts = materialize(config)
    with stage("scenario"):
        scenario = build_scenario(config.scenario, train, test, seed=config.seed, workers=config.workers)
    with stage("backbone"):
        backbone = make_backbone(config.backbone, concepts=concepts)
    features = {}
    with stage("train-baseline"):
        baseline = tr.train_baseline(config.train, backbone, class_names, scenario.train_authorized, features)
        _save_result(out, "baseline", baseline)
    protected = baseline
    if config.protect:
        with stage("train-protected"):
            protected = _train_protected(config, backbone, class_names, scenario, features)
            _save_result(out, "protected", protected)
    else:
        log.info("protection disabled: the protected model is the baseline")
    return TrainedRun(
        config,
        backbone,
        class_names,
        scenario,
        baseline,
        protected,
        baseline.model,
        protected.model,
        baseline.checkpoint_hash,
        protected.checkpoint_hash,
    )


def _save_result(out: Path, name, result: tr.TrainResult):
    manifest = result.manifest.to_dict()
    save_archive(out / "checkpoints" / name, tr.checkpoint_tensors(result.model), {"manifest": f"manifests/{name}.json"})
    atomic_write_text(out / "manifests" / f"{name}.json", json.dumps(manifest, indent=2, sort_keys=True))
    result.write_loss_log(out / "logs" / f"{name}_loss.csv")


def _load_model(out: Path, name, backbone, config) -> tuple:
    stem = out / "checkpoints" / name
    if not stem.with_suffix(".json").exists():
        raise DataError(f"checkpoint {stem}.npz/.json not found; run 'train' first")
    tensors, manifest = load_archive(stem)
    model = tr.build_model(backbone, config.train)
    model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    return model, manifest["content_hash"]


def load_run(config: RunConfig) -> TrainedRun:
    """Rebuild data/scenario/backbone from the config and load saved checkpoints."""
    out = Path(config.output_dir)
    with stage("data"):
        train, test, class_names, concepts = materialize(config)
    with stage("scenario"):
        scenario = build_scenario(config.scenario, train, test, seed=config.seed, workers=config.workers)
    with stage("backbone"):
        backbone = make_backbone(config.backbone, concepts=concepts)
    with stage("load-checkpoints"):
        sl_model, sl_hash = _load_model(out, "baseline", backbone, config)
        if config.protect:
            ip_model, ip_hash = _load_model(out, "protected", backbone, config)
        else:
            ip_model, ip_hash = sl_model, sl_hash
    return TrainedRun(config, backbone, class_names, scenario, None, None, sl_model, ip_model, sl_hash, ip_hash)


def _accuracy(model, backbone, domain, class_embeddings, config):
    ms = tr.encode_domain(backbone, domain)
    pred = tr.predict_domain(model, backbone, ms, class_embeddings, config.train.batch_size, seed=config.seed)
    return M.accuracy(pred, domain.labels)


def evaluate_run(run: TrainedRun):
    """ResultTable plus the scenario's MetricsReport."""
    config = run.config
    mode = config.scenario.mode
    table = ResultTable()
    with stage("evaluate"):
        ce = run.backbone.class_embeddings(run.class_names)
        for name, split in run.scenario.eval_splits.items():
            a_sl = _accuracy(run.sl_model, run.backbone, split.domain, ce, config)
            a_ip = _accuracy(run.ip_model, run.backbone, split.domain, ce, config)
            table.add(
                scenario=mode,
                authorized=config.scenario.authorized,
                domain=name,
                role=split.role,
                A_sl=a_sl,
                A_ip=a_ip,
                n_samples=len(split.domain),
                dataset_hash=split.domain.content_hash(),
                sl_checkpoint=run.sl_hash,
                ip_checkpoint=run.ip_hash,
            )
    with stage("metrics"):
        report = metrics_from_table(table, mode)
    return table, report


def metrics_from_table(table: ResultTable, mode: str) -> M.MetricsReport:
    """Weighted scores from accuracy rows.

    W_ua uses every non-authorized split as an unauthorized pair. Ownership
    runs add O_ua (patched split vs clean split); authorization runs add
    D_ua with A_u the mean protected accuracy over the test splits.
    """
    auth_rows = [r for r in table.rows if r["role"] == "authorized"]
    other = [r for r in table.rows if r["role"] != "authorized"]
    if len(auth_rows) != 1 or not other:
        raise DataError("metrics need exactly one authorized split and at least one other split")
    a = auth_rows[0]
    auth = M.AccuracyPair(a["A_sl"], a["A_ip"], "authorized", a["domain"])
    pairs = [M.AccuracyPair(r["A_sl"], r["A_ip"], r["role"], r["domain"]) for r in other]
    o_ua = d_ua = None
    if mode == "ownership":
        patched = [r for r in other if r["role"] == "unauthorized"][0]
        o_ua = M.ownership_score(patched["A_sl"], a["A_ip"], patched["A_ip"])
    if mode == "authorization":
        d_ua = M.authorization_score(a["A_ip"], float(np.mean([r["A_ip"] for r in other])))
    return M.MetricsReport.from_pairs(auth, pairs, o_ua, d_ua)


def write_results(config: RunConfig, table: ResultTable, report: M.MetricsReport) -> list:
    out = Path(config.output_dir)
    atomic_write_text(out / "results.csv", table.to_csv())
    atomic_write_text(out / "results.json", table.to_json())
    method = "IP" if config.protect else "SL"
    rows = render_tables(
        [{"scenario": config.scenario.mode, "authorized": config.scenario.authorized, "method": method, "report": report}],
        out,
    )
    atomic_write_text(out / "report.json", json.dumps(report.to_dict(), indent=2))
    return rows


@dataclass
class ExperimentResult:
    table: ResultTable
    report: M.MetricsReport
    metric_rows: list
    run: TrainedRun

    def summary(self) -> dict:
        return {
            "results_hash": self.table.content_hash(),
            "sl_checkpoint": self.run.sl_hash,
            "ip_checkpoint": self.run.ip_hash,
            **self.report.scores(),
        }


def run_experiment(config: RunConfig) -> ExperimentResult:
    run = train_run(config)
    table, report = evaluate_run(run)
    with stage("report"):
        rows = write_results(config, table, report)
    return ExperimentResult(table, report, rows, run)


def aggregate_reports(run_dirs, out_dir) -> list:
    """Collect ``metrics.csv`` data rows from several runs into one table with fresh Mean rows."""
    reports = []
    for d in run_dirs:
        path = Path(d) / "metrics.csv"
        if not path.exists():
            raise DataError(f"{path} not found; evaluate the run first")
        for r in read_metric_csv(path):
            if r["authorized"] != "Mean":
                reports.append(
                    {
                        "scenario": r["scenario"],
                        "authorized": r["authorized"],
                        "method": r["method"],
                        "report": {k: r[k] for k in METRIC_COLUMNS[3:]},
                    }
                )
    return render_tables(reports, out_dir)
