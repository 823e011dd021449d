"""``cardio-dg`` command line: synth, train, eval, explain, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import CLASS_NAMES, ArrhythmiaClass, DataFormatError, load_checkpoint, load_manifest, save_checkpoint
from .metrics import InsufficientPairs

log = logging.getLogger("cardio_dg")

SEED_ENV = "CARDIO_DG_SEED"


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# ------------------------------------------------------------- config


@dataclasses.dataclass
class RunConfig:
    """Resolved model + training + protocol settings; echoed into every artifact."""

    preset: str = "desk"
    variant: str = "full"
    protocol: str = "intra:all"
    seed: int = 42
    split_seed: int = 42
    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)

    def model_config(self):
        from .model import ModelConfig

        if self.preset == "desk":
            return ModelConfig.desk(self.variant, **self.model)
        if self.preset == "wide":
            return ModelConfig(variant=self.variant, **self.model)
        raise UsageError(f"unknown preset {self.preset!r} (desk or wide)")

    def train_config(self):
        from .train import TrainConfig

        return TrainConfig(**{**self.train, "seed": self.seed})

    def resolved(self) -> dict:
        return {
            "preset": self.preset,
            "variant": self.variant,
            "protocol": self.protocol,
            "seed": self.seed,
            "split_seed": self.split_seed,
            "model": self.model_config().to_dict(),
            "train": self.train_config().to_dict(),
        }


def load_run_config(path) -> dict:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from None
    unknown = set(d) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return d


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 42
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(config: dict, seed: int, manifest_path=None) -> dict:
    return {
        "config": config,
        "seed": seed,
        "tool": "cardio-dg",
        "version": __version__,
        "manifest_sha256": file_sha256(manifest_path) if manifest_path else None,
    }


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(path):
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    try:
        return load_manifest(path)
    except DataFormatError as exc:
        raise RuntimeFailure(f"invalid manifest: {exc}") from None


def _checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except DataFormatError as exc:
        raise RuntimeFailure(f"invalid checkpoint {path}: {exc}") from None


def _parse_class(text: str) -> int:
    if text.isdigit():
        k = int(text)
        if not 0 <= k < len(CLASS_NAMES):
            raise UsageError(f"class index must lie in 0..{len(CLASS_NAMES) - 1}")
        return k
    try:
        return int(ArrhythmiaClass.parse(text))
    except DataFormatError:
        raise UsageError(f"unknown class {text!r} (choose from {', '.join(CLASS_NAMES)})") from None


# ----------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .synth import DEFAULT_CLASS_MIX, DEFAULT_DOMAINS, generate_dataset, load_profiles

    profiles = load_profiles(args.profile_file) if args.profile_file else list(DEFAULT_DOMAINS)
    if not 1 <= args.domains <= len(profiles):
        raise UsageError(f"--domains must lie in 1..{len(profiles)}")
    if args.records_per_domain < 1:
        raise UsageError("--records-per-domain must be >= 1")
    mix = dict(DEFAULT_CLASS_MIX)
    if args.classes:
        chosen = [_parse_class(c.strip()) for c in args.classes.split(",")]
        mix = {ArrhythmiaClass(k): (1.0 / len(chosen) if k in chosen else 0.0) for k in range(len(CLASS_NAMES))}
    manifest = generate_dataset(profiles[: args.domains], mix, args.records_per_domain, seed=args.seed,
                                out_dir=args.out, duration_s=args.duration)
    counts = {}
    for e in manifest.records:
        counts.setdefault(e.domain, np.zeros(len(CLASS_NAMES), int))[int(e.label)] += 1
    width = max(len(d) for d in counts)
    print(f"{'domain':<{width}} " + " ".join(f"{n:>5}" for n in CLASS_NAMES) + "  total")
    for d, c in counts.items():
        print(f"{d:<{width}} " + " ".join(f"{v:>5}" for v in c) + f"  {c.sum():>5}")
    print(f"wrote {len(manifest.records)} records to {args.out}")
    return 0


def _resolve_run(args) -> RunConfig:
    base = load_run_config(args.config) if args.config else {}
    cfg = RunConfig(**base)
    for name in ("preset", "variant", "protocol"):
        if getattr(args, name, None) is not None:
            setattr(cfg, name, getattr(args, name))
    cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.train = {**cfg.train, "max_epochs": args.epochs}
    try:
        cfg.resolved()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    return cfg


def cmd_train(args) -> int:
    from .pipeline import prepare_manifest, run_protocol
    from .train import TrainingDiverged

    manifest = _manifest(args.manifest)
    cfg = _resolve_run(args)
    resolved = cfg.resolved()
    prov = provenance(resolved, cfg.seed, args.manifest)
    mc = cfg.model_config()
    data = prepare_manifest(manifest, mc.window, threads=args.threads)

    def progress(row):
        log.info("epoch %(epoch)d  loss %(train_loss).4f  val_f1 %(val_macro_f1).4f  lr %(lr).2g", row)

    try:
        cp, trainlog, test, plan = run_protocol(manifest, cfg.protocol, mc, cfg.train_config(), data,
                                                cfg.split_seed, progress)
    except TrainingDiverged as exc:
        raise RuntimeFailure(str(exc)) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cp.metadata["provenance"] = prov
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(cp, out)
    stem = out.with_suffix("")
    write_json(f"{stem}.trainlog.json", {"provenance": prov, **trainlog.to_json()})
    Path(f"{stem}.trainlog.csv").write_text(trainlog.to_csv(), encoding="utf-8")
    write_json(f"{stem}.config.json", {"provenance": prov, "split": plan.to_json()})
    print(f"best epoch {trainlog.best_epoch}  val macro-F1 {cp.metadata['best_val_macro_f1']:.4f}  -> {out}")
    return 0


def _test_set(manifest, protocol: str, split_seed: int, window: int, threads: int):
    from .evaluation import make_split
    from .pipeline import prepare_manifest, subset

    plan = make_split(manifest, protocol, split_seed)
    keep = set(plan.test_ids)
    # only load what will be scored
    sub = dataclasses.replace(manifest, records=[e for e in manifest.records if e.id in keep])
    return subset(prepare_manifest(sub, window, threads=threads), plan.test_ids), plan


def _eval_set(ckpt_paths, manifest, protocol, args, stress):
    from .evaluation import evaluate

    cps = [_checkpoint(p) for p in ckpt_paths]
    proto = protocol or cps[0].metadata.get("protocol")
    if proto is None:
        raise UsageError("--protocol is required for checkpoints without protocol metadata")
    split_seed = int(cps[0].metadata.get("split_seed", 42))
    window = int(cps[0].config.get("window", 5000))
    data, _ = _test_set(manifest, proto, split_seed, window, args.threads)
    # the leakage guard checks the target recorded at training time and the one asked for now
    target = proto.split(":", 1)[1] if proto.startswith("lodo:") else None
    descr = {"protocol": proto, "split_seed": split_seed, "n_checkpoints": len(cps)}
    result = evaluate(cps if len(cps) > 1 else cps[0], data, stress, descr, args.bootstrap, args.seed,
                      target=target)
    return result, cps


def cmd_eval(args) -> int:
    from .evaluation import LeakageError, MultiSeedReport, StressSpec, compare, write_report

    manifest = _manifest(args.manifest)
    try:
        stress = StressSpec.parse(args.stress, args.seed) if args.stress else None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        result, cps = _eval_set(args.ckpt, manifest, args.protocol, args, stress)
        prov = provenance({"eval": {"protocol": args.protocol, "stress": args.stress, "bootstrap": args.bootstrap},
                           "train": cps[0].metadata.get("provenance", {}).get("config")},
                          args.seed, args.manifest)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_report(result, out, prov)
        reports = result.reports if isinstance(result, MultiSeedReport) else [result]
        f1s = [r.macro_f1 for r in reports]
        print(f"macro-F1 {np.mean(f1s):.4f}" + (f" +/- {np.std(f1s, ddof=1):.4f}" if len(f1s) > 1 else "")
              + (f"  [{stress}]" if stress else "") + f"  -> {out}")
        if any(r.majority_collapse for r in reports):
            print("warning: accuracy exceeds macro-F1 by more than 0.3 (majority-class collapse)")
        if args.compare:
            other, _ = _eval_set(args.compare, manifest, args.protocol, args, stress)
            others = other.reports if isinstance(other, MultiSeedReport) else [other]
            verdict = compare(reports, others)
            write_json(out.with_suffix(".compare.json"), {"provenance": prov, **verdict})
            print(f"Wilcoxon W={verdict['statistic']:g} p={verdict['p_value']:.4g}: {verdict['verdict']}")
    except LeakageError as exc:
        raise RuntimeFailure(f"target domain leaked into training: {exc}") from None
    except InsufficientPairs as exc:
        raise RuntimeFailure(str(exc)) from None
    return 0


def cmd_explain(args) -> int:
    from .dsp import WindowMode, WindowSpec, design_bandpass, filter_and_normalize, window, BandpassSpec
    from .train import model_from_checkpoint
    from .xai import export_overlay, grad_cam

    manifest = _manifest(args.manifest)
    cp = _checkpoint(args.ckpt)
    entry = manifest.by_id().get(args.record_id)
    if entry is None:
        raise UsageError(f"unknown record id {args.record_id!r}")
    model = model_from_checkpoint(cp)
    rec = manifest.load_record(entry)
    bp = BandpassSpec(fs=rec.fs)
    x = window(filter_and_normalize(rec.leads, bp, design_bandpass(bp)),
               WindowSpec(model.config.window, WindowMode.EVAL_CENTER)).astype(np.float32)
    target = _parse_class(args.target_class) if args.target_class else None
    try:
        smap = grad_cam(model, x, target, args.layer, rec.id)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    leads = args.leads.split(",") if args.leads else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(export_overlay(smap, x, leads, rec.fs), encoding="utf-8")
    meta = {"provenance": provenance({"layer": smap.layer, "target_class": smap.target_class,
                                      "checkpoint": str(args.ckpt)}, args.seed, args.manifest),
            **smap.to_json()}
    write_json(out.with_suffix(".json"), meta)
    flag = "  (no positive attribution)" if smap.no_positive_attribution else ""
    print(f"{rec.id}: class {CLASS_NAMES[smap.target_class]} at {smap.layer}{flag} -> {out}")
    return 0


def cmd_bench(args) -> int:
    from .model import ModelConfig, efficiency_report
    from .train import model_from_checkpoint

    if args.runs < 10:
        raise UsageError("--runs must be >= 10")
    if args.ckpt:
        model = model_from_checkpoint(_checkpoint(args.ckpt))
    else:
        from .model import HeartBeatNet

        mc = ModelConfig.desk(args.variant) if args.preset == "desk" else ModelConfig(variant=args.variant)
        model = HeartBeatNet(mc, seed=args.seed)
    report = efficiency_report(model, runs=args.runs)
    report["provenance"] = provenance(model.config.to_dict(), args.seed)
    if args.out:
        write_json(args.out, report)
    print(f"{report['variant']}: params {report['params']:,}  FLOPs {report['flops']:,}  "
          f"median latency {report['latency_ms']:.2f} ms over {report['runs']} runs")
    return 0


# -------------------------------------------------------------- parser


def build_parser(seed: int) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cardio-dg", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="worker threads for preprocessing")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"cardio-dg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--domains", type=int, default=4)
    s.add_argument("--records-per-domain", type=int, default=200)
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--profile-file")
    s.add_argument("--classes", help="comma-separated classes drawn in equal shares (default: clinical mix)")
    s.add_argument("--duration", type=float, default=10.0, help="record length in seconds")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="split, train and save the best checkpoint")
    t.add_argument("--manifest", required=True)
    t.add_argument("--variant", choices=("baseline", "intermediate", "full"))
    t.add_argument("--protocol", help="intra:DOMAIN, intra:all or lodo:TARGET")
    t.add_argument("--preset", choices=("desk", "wide"))
    t.add_argument("--config", help="JSON run config; flags override it")
    t.add_argument("--epochs", type=int, help="override the epoch cap")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=seed)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints on the test partition")
    e.add_argument("--ckpt", nargs="+", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--protocol", help="defaults to the protocol stored in the checkpoint")
    e.add_argument("--stress", help="lead-drop:K or noise:SNR_DB")
    e.add_argument("--compare", nargs="+", help="second checkpoint set for a Wilcoxon comparison")
    e.add_argument("--bootstrap", type=int, default=1000)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=seed)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="Grad-CAM overlay for one record")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--manifest", required=True)
    x.add_argument("--record-id", required=True)
    x.add_argument("--class", dest="target_class")
    x.add_argument("--layer")
    x.add_argument("--leads", help="comma-separated lead names (default: all 12)")
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int, default=seed)
    x.set_defaults(func=cmd_explain)

    b = sub.add_parser("bench", help="parameter count, FLOPs and latency")
    b.add_argument("--ckpt")
    b.add_argument("--variant", default="full", choices=("baseline", "intermediate", "full"))
    b.add_argument("--preset", default="desk", choices=("desk", "wide"))
    b.add_argument("--runs", type=int, default=100)
    b.add_argument("--out")
    b.add_argument("--seed", type=int, default=seed)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        seed = default_seed()
    except UsageError as exc:
        print(f"cardio-dg: error: {exc}", file=sys.stderr)
        return 2
    parser = build_parser(seed)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("cardio-dg: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cardio-dg: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeFailure, DataFormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"cardio-dg: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
