"""Evaluation reports and the three-variant ablation harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import joint_errors, link_errors
from .neural import canonical_json
from .pairing import filter_extreme
from .retarget import OneStageRetargeter, TrainConfig, TwoStageRetargeter, default_batch_size, split_by_seed, train

logger = logging.getLogger(__name__)

VARIANTS = ("proposed", "no_filter", "one_stage")
VARIANT_LABELS = {"proposed": "Proposed", "no_filter": "(- Pose Filter)", "one_stage": "(- Two-stage)"}


@dataclass
class EvalReport:
    joint_error_rad: float  # unclamped predictions
    link_error_cm: float
    joint_error_clamped_rad: float
    link_error_clamped_cm: float
    n_samples: int
    key_links: list
    per_motion: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(self.__dict__)

    def write_json(self, path):
        with open(path, "w") as f:
            f.write(canonical_json(self.to_dict()) + "\n")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["motion", "n", "joint_rad", "link_cm", "joint_clamped_rad", "link_clamped_cm"])
        w.writerow(["all", self.n_samples, self.joint_error_rad, self.link_error_cm,
                    self.joint_error_clamped_rad, self.link_error_clamped_cm])
        for name, row in sorted(self.per_motion.items()):
            w.writerow([name, row["n"], row["joint_rad"], row["link_cm"], row["joint_clamped_rad"], row["link_clamped_cm"]])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(self.to_csv())


def evaluate(model, profile, X, q_true, motions=None, provenance=None):
    """Joint and key-link errors of ``model`` on ``(X, q_true)``.

    ``motions`` optionally labels each sample for the per-motion
    breakdown. Headline numbers use unclamped predictions, the
    ``*_clamped`` ones what a robot would execute.
    """
    q_true = np.atleast_2d(np.asarray(q_true, dtype=float))
    if len(q_true) == 0:
        raise ValueError("empty evaluation set")
    q_raw = model.predict_raw(X)
    q_lo, q_hi = model.limits_[:, 0], model.limits_[:, 1]
    q_clamped = np.clip(q_raw, q_lo, q_hi)
    chain, keys = profile.chain, list(profile.key_links)
    cols = {
        "joint_rad": joint_errors(q_raw, q_true),
        "link_cm": link_errors(chain, keys, q_raw, q_true),
        "joint_clamped_rad": joint_errors(q_clamped, q_true),
        "link_clamped_cm": link_errors(chain, keys, q_clamped, q_true),
    }
    per_motion = {}
    if motions is not None:
        motions = np.asarray(motions)
        for name in np.unique(motions):
            sel = motions == name
            per_motion[str(name)] = {"n": int(sel.sum()), **{k: float(v[sel].mean()) for k, v in cols.items()}}
    prov = {"profile_hash": profile.source_hash, "model_profile_hash": getattr(model, "profile_hash_", None)}
    prov.update(provenance or {})
    return EvalReport(
        float(cols["joint_rad"].mean()),
        float(cols["link_cm"].mean()),
        float(cols["joint_clamped_rad"].mean()),
        float(cols["link_clamped_cm"].mean()),
        len(q_true),
        keys,
        per_motion,
        prov,
    )


def evaluate_dataset(model, profile, dataset, provenance=None):
    prov = {k: dataset.header.get(k) for k in ("prior_hash", "body_hash", "base_seed", "count")}
    prov.update(provenance or {})
    return evaluate(model, profile, dataset.H.reshape(len(dataset), -1), dataset.q, provenance=prov)


def match_iterations(n_reference, n_other, batch_size, epochs, tolerance=0.05):
    """Batch size and epoch count for ``n_other`` samples whose total
    iteration count matches ``n_reference`` samples at ``batch_size``
    and ``epochs``.

    Follows the rule "increase batch size and epochs": the batch scales
    with the sample ratio and the epoch count is bumped until the
    iteration totals agree within ``tolerance``.
    """
    target = epochs * math.ceil(n_reference / batch_size)
    batch = max(batch_size, math.ceil(batch_size * n_other / n_reference))
    best = None
    for b in range(batch, batch + batch_size + 1):
        for e in range(epochs, 2 * epochs + 1):
            its = e * math.ceil(n_other / b)
            gap = abs(its - target) / target
            if best is None or gap < best[0] - 1e-12:
                best = (gap, b, e, its)
        if best[0] == 0:
            break
    gap, b, e, its = best
    if gap > tolerance:
        raise ValueError(f"cannot match iterations within {tolerance:.0%} (best {gap:.1%})")
    return b, e


@dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2)
    epochs: int = 30
    batch_size: int | None = None
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    ik_cap: float | None = 0.10
    validation_fraction: float = 0.1

    def to_dict(self):
        d = dict(self.__dict__)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class AblationResult:
    rows: list  # one dict per (variant, seed)
    filter_report: dict
    config: dict
    provenance: dict = field(default_factory=dict)

    def summary(self):
        """Median errors per variant over seeds."""
        out = {}
        for v in VARIANTS:
            rs = [r for r in self.rows if r["variant"] == v]
            if rs:
                out[v] = {
                    "joint_rad": float(np.median([r["joint_rad"] for r in rs])),
                    "link_cm": float(np.median([r["link_cm"] for r in rs])),
                    "iterations": [r["iterations"] for r in rs],
                }
        return out

    def iteration_gap(self):
        """Worst relative gap between filtered and unfiltered iteration counts."""
        gaps = []
        for seed in {r["seed"] for r in self.rows}:
            its = {r["variant"]: r["iterations"] for r in self.rows if r["seed"] == seed}
            if "proposed" in its and "no_filter" in its:
                gaps.append(abs(its["no_filter"] - its["proposed"]) / its["proposed"])
        return max(gaps) if gaps else 0.0

    def format_table(self):
        lines = [f"{'Method':<18}{'Joint (rad)':>12}{'Link (cm)':>11}"]
        for v, row in self.summary().items():
            lines.append(f"{VARIANT_LABELS[v]:<18}{row['joint_rad']:>12.3f}{row['link_cm']:>11.3f}")
        return "\n".join(lines)

    def to_dict(self):
        return {
            "rows": self.rows,
            "summary": self.summary(),
            "iteration_gap": self.iteration_gap(),
            "filter_report": self.filter_report,
            "config": self.config,
            "provenance": self.provenance,
        }

    def to_csv(self):
        buf = io.StringIO()
        keys = ["variant", "seed", "joint_rad", "link_cm", "iterations", "batch_size", "epochs", "n_train"]
        w = csv.DictWriter(buf, fieldnames=keys, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
        if csv_path:
            with open(csv_path, "w") as f:
                f.write(self.to_csv())


def run_ablation(raw, profile, config=None, test=None):
    """Train and evaluate Proposed, (- Pose Filter) and (- Two-stage).

    ``raw`` is the unfiltered paired dataset. ``test`` is the evaluation
    set; without it the filtered seed-partition validation split is used
    (it is held out from every variant's training data).
    """
    cfg = config or AblationConfig()
    filtered, report = filter_extreme(raw, ik_cap=cfg.ik_cap)
    val_f = split_by_seed(filtered.seeds, cfg.validation_fraction)
    val_r = split_by_seed(raw.seeds, cfg.validation_fraction)
    n_f, n_r = int((~val_f).sum()), int((~val_r).sum())
    if n_f == 0:
        raise ValueError("filtering left no training samples")
    batch = cfg.batch_size or default_batch_size(n_f)
    batch_raw, epochs_raw = match_iterations(n_f, n_r, batch, cfg.epochs)
    if test is None:
        test = filtered.subset(val_f)
    X_test = test.H.reshape(len(test), -1)

    plans = {
        "proposed": (filtered, TwoStageRetargeter, batch, cfg.epochs, True),
        "no_filter": (raw, TwoStageRetargeter, batch_raw, epochs_raw, False),
        "one_stage": (filtered, OneStageRetargeter, batch, cfg.epochs, True),
    }
    rows = []
    for seed in cfg.seeds:
        for variant in VARIANTS:
            data, cls, b, e, resample = plans[variant]
            tc = TrainConfig(cfg.learning_rate, b, cfg.weight_decay, e, seed, cfg.validation_fraction, resample)
            model, log = train(data, profile, tc, model_cls=cls)
            rep = evaluate(model, profile, X_test, test.q)
            rows.append({
                "variant": variant,
                "seed": int(seed),
                "joint_rad": rep.joint_error_rad,
                "link_cm": rep.link_error_cm,
                "iterations": log["iterations"],
                "batch_size": b,
                "epochs": e,
                "n_train": log["n_train"],
                "best_epoch": log["best_epoch"],
            })
            logger.info("ablation %s seed %d: %.3f rad %.3f cm", variant, seed, rep.joint_error_rad, rep.link_error_cm)
    prov = {k: raw.header.get(k) for k in ("prior_hash", "body_hash", "profile_hash", "base_seed")}
    prov["test_count"] = len(test)
    return AblationResult(rows, report.to_dict(), cfg.to_dict(), prov)
