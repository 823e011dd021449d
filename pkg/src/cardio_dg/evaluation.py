"""Evaluation protocols: intra-source and leave-one-domain-out splits, stress tests, reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import CLASS_NAMES, N_CLASSES, Checkpoint, DatasetManifest
from .metrics import (
    EvalReport,
    auroc_macro,
    bootstrap_ci,
    confusion_and_metrics,
    wilcoxon_signed_rank,
)

INTRA_FRACTIONS = (0.70, 0.10, 0.20)
LODO_VAL_FRACTION = 0.10
ALPHA = 0.05


class LeakageError(RuntimeError):
    pass


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str  # "intra" or "lodo"
    domain: str  # source domain for intra ("all" pools every domain), target for lodo

    def __post_init__(self):
        if self.kind not in ("intra", "lodo"):
            raise ValueError(f"protocol must be intra or lodo, got {self.kind!r}")
        if not self.domain:
            raise ValueError("protocol needs a domain name")

    @classmethod
    def parse(cls, text: str) -> "ProtocolSpec":
        kind, sep, domain = text.partition(":")
        if not sep:
            raise ValueError(f"protocol must look like intra:DOMAIN or lodo:TARGET, got {text!r}")
        return cls(kind.strip().lower(), domain.strip())

    def __str__(self):
        return f"{self.kind}:{self.domain}"


@dataclass
class SplitPlan:
    protocol: ProtocolSpec
    seed: int
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    source_domains: list[str] = field(default_factory=list)

    @property
    def target(self) -> str | None:
        return self.protocol.domain if self.protocol.kind == "lodo" else None

    def to_json(self) -> dict:
        d = asdict(self)
        d["protocol"] = str(self.protocol)
        return d


def _stratified_order(ids: list[str], labels: np.ndarray, rng: np.random.Generator) -> list[str]:
    """Interleave classes so that any prefix holds each class near its overall share."""
    keys = np.empty(len(ids))
    for k in np.unique(labels):
        members = np.flatnonzero(labels == k)
        rng.shuffle(members)
        # spread class members evenly over [0, 1); jitter breaks cross-class ties
        keys[members] = (np.arange(members.size) + rng.uniform(0.25, 0.75, members.size)) / members.size
    return [ids[i] for i in np.argsort(keys, kind="stable")]


def make_split(manifest: DatasetManifest, protocol, seed: int = 42) -> SplitPlan:
    if isinstance(protocol, str):
        protocol = ProtocolSpec.parse(protocol)
    domains = manifest.domains
    entries = sorted(manifest.records, key=lambda e: e.id)
    rng = np.random.default_rng(seed)

    if protocol.kind == "intra":
        if protocol.domain == "all":
            pool = entries
        elif protocol.domain in domains:
            pool = [e for e in entries if e.domain == protocol.domain]
        else:
            raise ValueError(f"domain {protocol.domain!r} absent from manifest (have {domains})")
        order = _stratified_order([e.id for e in pool], np.array([int(e.label) for e in pool]), rng)
        n = len(order)
        n_train, n_val = int(np.floor(INTRA_FRACTIONS[0] * n)), int(np.floor(INTRA_FRACTIONS[1] * n))
        sources = sorted({e.domain for e in pool})
        return SplitPlan(protocol, seed, order[:n_train], order[n_train : n_train + n_val],
                         order[n_train + n_val :], sources)

    if protocol.domain not in domains:
        raise ValueError(f"target domain {protocol.domain!r} absent from manifest (have {domains})")
    if len(domains) < 2:
        raise ValueError("LODO needs at least two domains")
    source = [e for e in entries if e.domain != protocol.domain]
    target = [e.id for e in entries if e.domain == protocol.domain]
    order = _stratified_order([e.id for e in source], np.array([int(e.label) for e in source]), rng)
    n_val = int(np.floor(LODO_VAL_FRACTION * len(order)))
    n_train = len(order) - n_val
    plan = SplitPlan(protocol, seed, order[:n_train], order[n_train:], target,
                     sorted({e.domain for e in source}))
    check_plan(plan, manifest)
    return plan


def check_plan(plan: SplitPlan, manifest: DatasetManifest) -> None:
    """Partitions must be disjoint; a LODO plan must keep the target out of train/val."""
    parts = [set(plan.train_ids), set(plan.val_ids), set(plan.test_ids)]
    if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
        raise LeakageError("split partitions overlap")
    if plan.target is not None:
        domain_of = {e.id: e.domain for e in manifest.records}
        check_no_target_leak(parts[0] | parts[1], {i for i, d in domain_of.items() if d == plan.target})


def check_no_target_leak(seen_ids, target_ids) -> None:
    leaked = set(seen_ids) & set(target_ids)
    if leaked:
        raise LeakageError(f"target domain leaked into training ({len(leaked)} records, e.g. {sorted(leaked)[0]})")


# ---------------------------------------------------------------- stress


@dataclass(frozen=True)
class StressSpec:
    mode: str  # "lead-drop" or "noise"
    k: int = 0
    snr_db: float = 0.0
    seed: int = 42

    def __post_init__(self):
        if self.mode == "lead-drop":
            if self.k not in (1, 2, 3):
                raise ValueError(f"lead-drop k must be 1, 2 or 3, got {self.k}")
        elif self.mode == "noise":
            if not 5 <= self.snr_db <= 20:
                raise ValueError(f"noise SNR must lie in [5, 20] dB, got {self.snr_db}")
        else:
            raise ValueError(f"unknown stress mode {self.mode!r}")

    @classmethod
    def parse(cls, text: str, seed: int = 42) -> "StressSpec":
        mode, sep, arg = text.partition(":")
        if not sep:
            raise ValueError(f"stress must look like lead-drop:K or noise:SNR, got {text!r}")
        if mode == "lead-drop":
            return cls(mode, k=int(arg), seed=seed)
        return cls(mode, snr_db=float(arg), seed=seed)

    def __str__(self):
        return f"lead-drop:{self.k}" if self.mode == "lead-drop" else f"noise:{self.snr_db:g}"


def stress_apply(x: np.ndarray, spec: StressSpec, rng: np.random.Generator) -> np.ndarray:
    """Perturb one preprocessed window ``[leads, L]``; the input is not modified."""
    out = np.array(x, copy=True)
    if spec.mode == "lead-drop":
        out[rng.choice(out.shape[0], size=spec.k, replace=False)] = 0.0
        return out
    noise = rng.standard_normal(out.shape)
    p_signal = float(np.mean(np.square(x, dtype=np.float64)))
    p_noise = float(np.mean(noise**2))
    if p_signal == 0 or p_noise == 0:
        return out
    # rescale the realized draw so the ratio is exact
    noise *= np.sqrt(p_signal / (p_noise * 10 ** (spec.snr_db / 10)))
    return (out + noise).astype(x.dtype)


def stress_batch(x: np.ndarray, spec: StressSpec) -> np.ndarray:
    """Each window gets its own stream seeded by (seed, index), independent of batching."""
    return np.stack([stress_apply(w, spec, np.random.default_rng([spec.seed, i])) for i, w in enumerate(x)])


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    clean = np.asarray(clean, np.float64)
    return float(10 * np.log10(np.mean(clean**2) / np.mean((np.asarray(noisy, np.float64) - clean) ** 2)))


# -------------------------------------------------------------- evaluate


def report_from_predictions(y_true, proba, protocol: dict | None = None, stress: str | None = None,
                            n_resamples: int = 1000, seed: int = 42) -> EvalReport:
    y_true = np.asarray(y_true, dtype=int)
    proba = np.asarray(proba, dtype=np.float64)
    y_pred = proba.argmax(axis=1)
    report = confusion_and_metrics(y_true, y_pred)
    report.auroc = auroc_macro(y_true, proba)
    if y_true.size:
        report.ci_macro_f1 = bootstrap_ci(y_true, y_pred, n_resamples=n_resamples, seed=seed)
    report.protocol = dict(protocol or {})
    report.stress = stress
    return report


def guard_checkpoint(cp: Checkpoint, test_ids, test_domains, target: str | None = None) -> None:
    """LODO gate: no id or domain of the held-out target may appear in the checkpoint's training data.

    Both the target recorded at training time and ``target`` (the one requested now) are checked.
    """
    targets = {t for t in (cp.metadata.get("target_domain"), target) if t}
    seen = set(cp.metadata.get("train_ids", [])) | set(cp.metadata.get("val_ids", []))
    for t in sorted(targets):
        check_no_target_leak(seen, {i for i, d in zip(test_ids, test_domains) if d == t})
        if t in cp.metadata.get("train_domains", []):
            raise LeakageError(f"target domain leaked into training ({t} listed among source domains)")


def evaluate(checkpoints, data, stress: StressSpec | None = None, protocol: dict | None = None,
             n_resamples: int = 1000, seed: int = 42, batch_size: int = 64, target: str | None = None):
    """Evaluate one checkpoint (returns EvalReport) or several (returns MultiSeedReport).

    ``data`` is a ``train.PreparedSet``; windows are center-cropped and the stress
    perturbation, if any, is applied after preprocessing. ``target`` names the
    held-out domain of a LODO evaluation for the leakage guard.
    """
    from .train import model_from_checkpoint

    single = isinstance(checkpoints, Checkpoint)
    cps = [checkpoints] if single else list(checkpoints)
    if not cps:
        raise ValueError("no checkpoints supplied")
    x = data.eval_windows()
    if stress is not None:
        x = stress_batch(x, stress)
    reports = []
    for cp in cps:
        guard_checkpoint(cp, data.ids, data.domains, target)
        model = model_from_checkpoint(cp)
        if model.config.window != x.shape[2]:
            raise ValueError("checkpoint window length does not match the data")
        proba = model.predict_proba(x, batch_size)
        proto = {**(protocol or {}), "seed": cp.metadata.get("seed"), "variant": cp.config.get("variant")}
        reports.append(report_from_predictions(data.labels, proba, proto, str(stress) if stress else None,
                                               n_resamples, seed))
    return reports[0] if single else MultiSeedReport(reports)


@dataclass
class MultiSeedReport:
    reports: list[EvalReport]

    def _stat(self, key):
        v = np.array([getattr(r, key) for r in self.reports], dtype=np.float64)
        # sample SD across seeds; a single seed has SD 0
        return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0

    @property
    def macro_f1(self):
        return self._stat("macro_f1")

    @property
    def accuracy(self):
        return self._stat("accuracy")

    def to_json(self) -> dict:
        summary = {}
        for key in ("accuracy", "macro_precision", "macro_recall", "macro_f1"):
            mean, sd = self._stat(key)
            summary[key] = {"mean": mean, "sd": sd}
        aucs = [r.auroc for r in self.reports if r.auroc is not None]
        if aucs:
            summary["auroc"] = {"mean": float(np.mean(aucs)),
                                "sd": float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0}
        return {"n_seeds": len(self.reports), "summary": summary, "reports": [r.to_json() for r in self.reports]}


def paired_class_f1(reports_a, reports_b) -> tuple[np.ndarray, np.ndarray]:
    """Per-class F1 pairs over (seed, class) for classes present in both truths."""
    if len(reports_a) != len(reports_b):
        raise ValueError("comparison needs the same number of runs on each side")
    a, b = [], []
    for ra, rb in zip(reports_a, reports_b):
        for k in range(len(ra.f1)):
            if ra.support[k] > 0 and rb.support[k] > 0:
                a.append(ra.f1[k])
                b.append(rb.f1[k])
    return np.array(a), np.array(b)


def compare(reports_a, reports_b, alpha: float = ALPHA) -> dict:
    """Wilcoxon signed-rank on paired per-class F1; raises InsufficientPairs below 5 pairs."""
    a, b = paired_class_f1(reports_a, reports_b)
    res = wilcoxon_signed_rank(a, b)
    mean_diff = float(np.mean(a - b))
    res.update(
        alpha=alpha,
        mean_f1_difference=mean_diff,
        significant=bool(res["p_value"] < alpha),
        verdict=("A > B" if mean_diff > 0 else "A < B") if res["p_value"] < alpha else "no significant difference",
    )
    return res


def generalization_gap(intra_macro_f1: float, lodo_macro_f1: float) -> float:
    return float(intra_macro_f1 - lodo_macro_f1)


def relative_degradation(clean: float, stressed: float) -> float:
    """Fractional macro-F1 loss under stress; 0 when the clean score is 0."""
    return float((clean - stressed) / clean) if clean > 0 else 0.0


# --------------------------------------------------------------- output


def confusion_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(report.class_names)
    w.writerow(["true\\pred", *names])
    for name, row in zip(names, report.confusion_matrix):
        w.writerow([name, *row])
    return buf.getvalue()


def write_report(report, path, provenance: dict | None = None) -> None:
    """Report JSON at ``path``; single reports also get ``<stem>.confusion.csv``."""
    path = Path(path)
    payload = report.to_json()
    if provenance:
        payload = {"provenance": provenance, **payload}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if isinstance(report, EvalReport):
        path.with_suffix(".confusion.csv").write_text(confusion_csv(report), encoding="utf-8")


def load_report(path) -> EvalReport | list[EvalReport]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if "reports" in d:
        return [EvalReport.from_json(r) for r in d["reports"]]
    d.pop("provenance", None)
    return EvalReport.from_json(d)


__all__ = [
    "ALPHA", "CLASS_NAMES", "N_CLASSES", "LeakageError", "MultiSeedReport", "ProtocolSpec", "SplitPlan",
    "StressSpec", "check_no_target_leak", "check_plan", "compare", "confusion_csv", "evaluate",
    "generalization_gap", "guard_checkpoint", "load_report", "make_split", "measured_snr_db",
    "relative_degradation", "report_from_predictions", "stress_apply", "stress_batch", "write_report",
]
