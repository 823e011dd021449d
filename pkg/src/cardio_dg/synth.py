"""Synthetic 12-lead ECG: Gaussian-bump beats, class rhythm rules, domain styles.

Each beat is a sum of five Gaussian bumps (P, Q, R, S, T) placed relative to the
R peak and projected onto the 12 leads by a per-template vector. Class rules
control the rhythm (RR statistics, ectopic beats) and the template; domain
profiles add acquisition style (gain, wander, noise, mains hum, bandwidth).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .dataio import (
    N_LEADS,
    ArrhythmiaClass,
    DatasetManifest,
    EcgRecord,
    ManifestEntry,
    save_manifest,
    write_signal,
)

C = ArrhythmiaClass


@dataclass(frozen=True)
class Wave:
    center: float  # s, relative to the R peak
    width: float  # s, Gaussian sigma
    amplitude: float  # mV

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("wave width must be positive")


@dataclass(frozen=True)
class BeatTemplate:
    waves: dict  # name -> Wave, names from P Q R S T
    projection: tuple  # 12 per-lead gains

    def __post_init__(self):
        if len(self.projection) != N_LEADS:
            raise ValueError("projection needs one gain per lead")
        if "R" in self.waves and self.waves["R"].amplitude <= 0:
            raise ValueError("R amplitude must be positive")

    def scaled(self, qrs_mult: float = 1.0, pr: float | None = None, p_amp: float | None = None) -> "BeatTemplate":
        waves = dict(self.waves)
        for k in ("Q", "R", "S"):
            if k in waves:
                w = waves[k]
                waves[k] = Wave(w.center * qrs_mult, w.width * qrs_mult, w.amplitude)
        if "P" in waves and pr is not None:
            waves["P"] = replace(waves["P"], center=-pr)
        if "P" in waves and p_amp is not None:
            waves["P"] = replace(waves["P"], amplitude=p_amp)
        return BeatTemplate(waves, self.projection)


# lead order: I II III aVR aVL aVF V1 V2 V3 V4 V5 V6
NORMAL_PROJECTION = (0.7, 1.0, 0.4, -0.85, 0.2, 0.7, -0.5, -0.2, 0.3, 0.8, 1.0, 0.8)
LBBB_PROJECTION = (0.9, 0.6, -0.2, -0.75, 0.8, 0.2, -1.0, -0.9, -0.5, 0.6, 1.1, 1.2)
RBBB_PROJECTION = (0.6, 0.8, 0.3, -0.7, 0.2, 0.5, 0.9, 0.7, 0.3, 0.4, 0.3, -0.5)
PVC_PROJECTION = (-0.5, -0.8, -0.4, 0.6, 0.1, -0.6, 1.0, 1.0, 0.8, 0.4, -0.2, -0.4)


def normal_template() -> BeatTemplate:
    return BeatTemplate(
        {
            "P": Wave(-0.16, 0.022, 0.15),
            "Q": Wave(-0.022, 0.008, -0.12),
            "R": Wave(0.0, 0.010, 1.0),
            "S": Wave(0.024, 0.009, -0.3),
            "T": Wave(0.30, 0.045, 0.3),
        },
        NORMAL_PROJECTION,
    )


def lbbb_template() -> BeatTemplate:
    t = normal_template().scaled(qrs_mult=2.2)
    waves = dict(t.waves)
    waves["R"] = replace(waves["R"], amplitude=1.3)
    waves["S"] = replace(waves["S"], amplitude=-0.15)
    waves["T"] = Wave(0.34, 0.05, -0.3)
    return BeatTemplate(waves, LBBB_PROJECTION)


def rbbb_template() -> BeatTemplate:
    t = normal_template().scaled(qrs_mult=1.9)
    waves = dict(t.waves)
    waves["S"] = Wave(0.05, 0.016, -0.55)
    waves["T"] = Wave(0.33, 0.05, -0.25)
    return BeatTemplate(waves, RBBB_PROJECTION)


def pvc_template() -> BeatTemplate:
    return BeatTemplate(
        {
            "Q": Wave(-0.05, 0.02, -0.1),
            "R": Wave(0.0, 0.028, 1.5),
            "S": Wave(0.06, 0.025, -0.4),
            "T": Wave(0.36, 0.06, -0.5),
        },
        PVC_PROJECTION,
    )


def pac_template() -> BeatTemplate:
    # premature supraventricular beat: narrow QRS, ectopic (inverted, early) P
    return normal_template().scaled(pr=0.11, p_amp=-0.12)


@dataclass(frozen=True)
class ClassRule:
    label: ArrhythmiaClass
    rr_mean: float = 0.8
    rr_cov: float = 0.03
    p_wave: bool = True
    pr_interval: float = 0.16
    qrs_mult: float = 1.0
    ectopic_rate: float = 0.0
    ectopic: str | None = None  # "pac" | "pvc"
    template: str = "normal"  # "normal" | "lbbb" | "rbbb"
    min_rr_cov: float = 0.0  # redraw rhythm until the realized CoV reaches this

    def __post_init__(self):
        if self.rr_mean <= 0.3:
            raise ValueError("RR mean must exceed 0.3 s")
        if self.rr_cov < 0:
            raise ValueError("RR coefficient of variation must be >= 0")


DEFAULT_RULES: dict[ArrhythmiaClass, ClassRule] = {
    C.N: ClassRule(C.N),
    C.AF: ClassRule(C.AF, rr_mean=0.7, rr_cov=0.28, p_wave=False, min_rr_cov=0.18),
    C.PAC: ClassRule(C.PAC, ectopic_rate=0.2, ectopic="pac"),
    C.PVC: ClassRule(C.PVC, ectopic_rate=0.2, ectopic="pvc"),
    C.LBBB: ClassRule(C.LBBB, template="lbbb"),
    C.RBBB: ClassRule(C.RBBB, template="rbbb"),
    C.IAVB: ClassRule(C.IAVB, pr_interval=0.28),
}


@dataclass(frozen=True)
class DomainProfile:
    name: str
    wander_amp: float = 0.1  # mV
    wander_hz: float = 0.25
    noise_std: float = 0.02  # mV, white
    gain: float = 1.0
    lead_gain_jitter: float = 0.05
    mains_hz: float = 50.0
    mains_amp: float = 0.0  # mV
    bandwidth_hz: float | None = None  # acquisition low-pass corner, None = flat
    qrs_scale: float = 1.0  # device/site morphology stretch of the QRS

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.noise_std < 0 or self.lead_gain_jitter < 0 or self.wander_amp < 0:
            raise ValueError("noise, jitter and wander must be non-negative")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


DEFAULT_DOMAINS = (
    DomainProfile("CPSC-like", wander_amp=0.15, wander_hz=0.3, noise_std=0.02, gain=1.0,
                  mains_hz=50.0, mains_amp=0.02),
    DomainProfile("Chapman-like", wander_amp=0.05, wander_hz=0.2, noise_std=0.01, gain=1.3,
                  mains_hz=60.0, mains_amp=0.01, bandwidth_hz=100.0),
    DomainProfile("PTBXL-like", wander_amp=0.2, wander_hz=0.25, noise_std=0.04, gain=1.1,
                  mains_hz=50.0, mains_amp=0.05, bandwidth_hz=60.0),
    DomainProfile("Georgia-like", wander_amp=0.3, wander_hz=0.15, noise_std=0.08, gain=0.8,
                  mains_hz=60.0, mains_amp=0.08, bandwidth_hz=35.0, qrs_scale=1.15),
)

# N share 0.68 with the minority classes in the aggregate order of magnitude of
# the four public 12-lead cohorts (N dominant, PAC rarest)
DEFAULT_CLASS_MIX = {C.N: 0.68, C.AF: 0.12, C.PAC: 0.02, C.PVC: 0.05, C.LBBB: 0.03, C.RBBB: 0.06, C.IAVB: 0.04}


# ------------------------------------------------------------- rhythm


def _draw_schedule(rule: ClassRule, duration_s: float, rng) -> list[tuple[float, str]]:
    rr_mean = rule.rr_mean * rng.uniform(0.9, 1.1)
    n_max = int(duration_s / 0.3) + 4
    rr = np.clip(rr_mean * (1.0 + rule.rr_cov * rng.standard_normal(n_max)), 0.32, 2.5 * rr_mean)
    beats: list[tuple[float, str]] = []
    t = rng.uniform(0.1, 0.6) * rr_mean
    ectopic_flags = np.zeros(n_max, bool)
    if rule.ectopic:
        ectopic_flags = rng.random(n_max) < rule.ectopic_rate
        # guarantee at least two (non-adjacent) ectopics inside the record
        n_visible = max(int(duration_s / rr_mean) - 1, 5)
        forced = rng.choice(np.arange(1, n_visible, 2), size=2, replace=False)
        ectopic_flags[forced] = True
        ectopic_flags[0] = False
    i = 0
    while t < duration_s and i < n_max:
        if ectopic_flags[i] and beats and beats[-1][1] == "sinus":
            t_e = beats[-1][0] + 0.6 * rr[i]
            if t_e >= duration_s:
                break
            beats.append((t_e, rule.ectopic))
            # PVC: full compensatory pause; PAC: sinus node reset
            t = beats[-2][0] + 2 * rr[i] if rule.ectopic == "pvc" else t_e + rr[i]
        else:
            beats.append((t, "sinus"))
            t += rr[i]
        i += 1
    return beats


def beat_schedule(rule: ClassRule, duration_s: float, rng) -> list[tuple[float, str]]:
    """(R-peak time, kind) pairs covering ``duration_s``; kind is 'sinus' or the ectopic type."""
    for _ in range(100):
        beats = _draw_schedule(rule, duration_s, rng)
        if rule.min_rr_cov <= 0:
            return beats
        rr = np.diff([b[0] for b in beats])
        if len(rr) >= 2 and rr.std() / rr.mean() >= rule.min_rr_cov:
            return beats
    raise RuntimeError("could not draw a rhythm with the requested RR variability")


def _template_for(rule: ClassRule) -> BeatTemplate:
    base = {"normal": normal_template, "lbbb": lbbb_template, "rbbb": rbbb_template}[rule.template]()
    return base.scaled(
        qrs_mult=rule.qrs_mult,
        pr=rule.pr_interval,
        p_amp=None if rule.p_wave else 0.0,
    )


def _render(template: BeatTemplate, t_r: float, t: np.ndarray, out: np.ndarray, proj_jitter, amp) -> None:
    proj = np.asarray(template.projection) + proj_jitter
    wave_sum = np.zeros_like(t)
    for w in template.waves.values():
        if w.amplitude == 0:
            continue
        c = t_r + w.center
        lo, hi = np.searchsorted(t, [c - 5 * w.width, c + 5 * w.width])
        seg = t[lo:hi]
        wave_sum[lo:hi] += amp * w.amplitude * np.exp(-0.5 * ((seg - c) / w.width) ** 2)
    out += proj[:, None] * wave_sum[None, :]


def generate_record(
    rule: ClassRule,
    profile: DomainProfile,
    duration_s: float = 10.0,
    fs: float = 500.0,
    rng: np.random.Generator | None = None,
    record_id: str = "rec",
) -> EcgRecord:
    if rng is None:
        rng = np.random.default_rng()
    if duration_s < 2 * rule.rr_mean:
        raise ValueError("duration must cover at least two mean RR intervals")
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    leads = np.zeros((N_LEADS, n))
    template = _template_for(rule)
    if profile.qrs_scale != 1.0:
        template = template.scaled(qrs_mult=profile.qrs_scale)
    ectopic = {"pvc": pvc_template(), "pac": pac_template()}
    proj_jitter = rng.normal(0.0, 0.05, N_LEADS)
    for t_r, kind in beat_schedule(rule, duration_s, rng):
        tmpl = template if kind == "sinus" else ectopic[kind]
        if kind != "sinus" and profile.qrs_scale != 1.0:
            tmpl = tmpl.scaled(qrs_mult=profile.qrs_scale)
        _render(tmpl, t_r, t, leads, proj_jitter, rng.uniform(0.9, 1.1))
    if not rule.p_wave:
        # fibrillatory baseline, 4-8 Hz
        f = rng.uniform(4.0, 8.0, 3)
        ph = rng.uniform(0, 2 * np.pi, 3)
        fwave = 0.04 * np.sin(2 * np.pi * f[:, None] * t[None, :] + ph[:, None]).sum(axis=0)
        leads += np.asarray(NORMAL_PROJECTION)[:, None] * fwave[None, :] * 0.5

    if profile.bandwidth_hz is not None and profile.bandwidth_hz < fs / 2:
        sos = signal.butter(2, profile.bandwidth_hz, btype="lowpass", fs=fs, output="sos")
        leads = signal.sosfilt(sos, leads, axis=-1)
    gains = profile.gain * (1.0 + profile.lead_gain_jitter * rng.standard_normal(N_LEADS))
    leads *= gains[:, None]
    if profile.wander_amp:
        phase = rng.uniform(0, 2 * np.pi)
        lead_amp = profile.wander_amp * rng.uniform(0.5, 1.5, N_LEADS)
        leads += lead_amp[:, None] * np.sin(2 * np.pi * profile.wander_hz * t + phase)[None, :]
    if profile.mains_amp:
        phase = rng.uniform(0, 2 * np.pi)
        leads += profile.mains_amp * np.sin(2 * np.pi * profile.mains_hz * t + phase)[None, :]
    if profile.noise_std:
        leads += profile.noise_std * rng.standard_normal(leads.shape)
    return EcgRecord(record_id, profile.name, fs, leads.astype(np.float32), rule.label)


# ------------------------------------------------------------- datasets


def largest_remainder(proportions, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, closest to ``proportions * total``."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = p * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    # ties broken by lower index first
    order = sorted(range(len(p)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _normalize_mix(class_mix) -> np.ndarray:
    props = np.zeros(len(ArrhythmiaClass))
    items = class_mix.items() if isinstance(class_mix, dict) else enumerate(class_mix)
    for k, v in items:
        key = ArrhythmiaClass.parse(k) if isinstance(k, str) else ArrhythmiaClass(k)
        props[key] = float(v)
    if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
        raise ValueError(f"class proportions must be non-negative and sum to 1 (got {props.sum():.6g})")
    return props


def generate_dataset(
    domains,
    class_mix=None,
    n_per_domain: int = 200,
    fs: float = 500.0,
    duration_s: float = 10.0,
    seed: int = 42,
    out_dir=None,
    rules: dict | None = None,
) -> DatasetManifest:
    """Write ECG1 files plus ``manifest.json`` under ``out_dir`` and return the manifest."""
    props = _normalize_mix(DEFAULT_CLASS_MIX if class_mix is None else class_mix)
    rules = {**DEFAULT_RULES, **(rules or {})}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = largest_remainder(props, n_per_domain)
    entries = []
    for d_idx, profile in enumerate(domains):
        labels = np.repeat(np.arange(len(props)), counts)
        np.random.default_rng([seed, d_idx, 0]).shuffle(labels)
        sub = out_dir / _safe(profile.name)
        sub.mkdir(exist_ok=True)
        for i, lab in enumerate(labels):
            rid = f"{_safe(profile.name)}-{i:05d}"
            rng = np.random.default_rng([seed, d_idx, i + 1])
            rec = generate_record(rules[ArrhythmiaClass(lab)], profile, duration_s, fs, rng, rid)
            rel = f"{sub.name}/{rid}.ecg1"
            write_signal(out_dir / rel, rec.leads, fs)
            entries.append(ManifestEntry(rid, rel, profile.name, rec.label, float(fs), N_LEADS, rec.n_samples))
    manifest = DatasetManifest(entries, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "profiles.json").write_text(
        json.dumps([p.to_json() for p in domains], indent=1) + "\n", encoding="utf-8"
    )
    return manifest


def load_profiles(path) -> list[DomainProfile]:
    return [DomainProfile(**obj) for obj in json.loads(Path(path).read_text(encoding="utf-8"))]


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)
