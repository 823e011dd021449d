"""Variant-by-seed sweeps shared by the experiment scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import ArrhythmiaClass, DatasetManifest, load_manifest
from .evaluation import StressSpec, evaluate, relative_degradation
from .model import ModelConfig
from .pipeline import prepare_manifest, run_protocol
from .synth import DEFAULT_DOMAINS, generate_dataset
from .train import PreparedSet, TrainConfig

VARIANT_ORDER = ("baseline", "intermediate", "full")
BALANCED_CLASSES = (ArrhythmiaClass.N, ArrhythmiaClass.AF, ArrhythmiaClass.LBBB, ArrhythmiaClass.RBBB)


@dataclass
class RunResult:
    variant: str
    seed: int
    protocol: str
    best_epoch: int
    val_macro_f1: float
    test_macro_f1: float
    stressed: dict = field(default_factory=dict)  # stress spec -> macro-F1
    seconds: float = 0.0

    def degradation(self, stress: str) -> float:
        return relative_degradation(self.test_macro_f1, self.stressed[stress])


def balanced_dataset(out_dir, n_per_domain: int = 200, seed: int = 42, domains=DEFAULT_DOMAINS) -> DatasetManifest:
    """Four-class equal-share synthetic corpus (N, AF, LBBB, RBBB), reused if already on disk."""
    out_dir = Path(out_dir)
    if (out_dir / "manifest.json").exists():
        return load_manifest(out_dir / "manifest.json")
    mix = {c: (1.0 / len(BALANCED_CLASSES) if c in BALANCED_CLASSES else 0.0) for c in ArrhythmiaClass}
    return generate_dataset(list(domains), mix, n_per_domain, seed=seed, out_dir=out_dir)


def sweep(
    manifest: DatasetManifest,
    protocol: str,
    variants=VARIANT_ORDER,
    seeds=(42,),
    max_epochs: int = 50,
    stresses=(),
    data: PreparedSet | None = None,
    model_overrides: dict | None = None,
    log=print,
) -> list[RunResult]:
    """Train every (variant, seed) on one split and score the clean and stressed test set."""
    model_overrides = model_overrides or {}
    window = ModelConfig.desk(**model_overrides).window
    data = data if data is not None else prepare_manifest(manifest, window)
    results = []
    for variant in variants:
        for seed in seeds:
            t0 = time.perf_counter()
            mc = ModelConfig.desk(variant, **model_overrides)
            cp, trainlog, test, plan = run_protocol(manifest, protocol, mc, TrainConfig(seed=seed, max_epochs=max_epochs),
                                                    data)
            target = plan.target
            clean = evaluate(cp, test, n_resamples=100, target=target)
            stressed = {}
            for s in stresses:
                spec = StressSpec.parse(s, seed) if isinstance(s, str) else s
                stressed[str(spec)] = evaluate(cp, test, spec, n_resamples=100, target=target).macro_f1
            res = RunResult(variant, seed, protocol, trainlog.best_epoch, cp.metadata["best_val_macro_f1"],
                            clean.macro_f1, stressed, time.perf_counter() - t0)
            results.append(res)
            if log:
                extra = "".join(f"  {k} {v:.3f}" for k, v in stressed.items())
                log(f"{variant:<12} seed {seed}  best epoch {res.best_epoch:>2}  val {res.val_macro_f1:.3f}  "
                    f"test {res.test_macro_f1:.3f}{extra}  ({res.seconds:.0f}s)")
    return results


def summarize(results: list[RunResult], stress: str | None = None) -> dict:
    """Mean and sample SD of test macro-F1 (and relative degradation under ``stress``) per variant."""
    out = {}
    for variant in dict.fromkeys(r.variant for r in results):
        rows = [r for r in results if r.variant == variant]
        f1 = np.array([r.test_macro_f1 for r in rows])
        entry = {"n": len(rows), "macro_f1_mean": float(f1.mean()),
                 "macro_f1_sd": float(f1.std(ddof=1)) if len(rows) > 1 else 0.0}
        if stress:
            deg = np.array([r.degradation(stress) for r in rows])
            entry["stressed_macro_f1_mean"] = float(np.mean([r.stressed[stress] for r in rows]))
            entry["degradation_mean"] = float(deg.mean())
        out[variant] = entry
    return out


def as_records(results: list[RunResult]) -> list[dict]:
    return [asdict(r) for r in results]
