"""SE-ResNet1D with MixStyle and multi-layer concentration fusion.

Variants (ablation ladder):

* ``baseline``      plain residual blocks, GAP of the last stage only, no MixStyle
* ``intermediate``  plain residual blocks + concentration pipeline over every stage
* ``full``          SE residual blocks + concentration pipeline + MixStyle
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamStore, Tensor, no_grad, ops

VARIANTS = ("baseline", "intermediate", "full")


@dataclass
class MixStyleConfig:
    p: float = 0.3
    alpha: float = 0.1
    stages: tuple[int, ...] = (1, 2)
    sigma_floor: float = 1e-6


@dataclass
class ModelConfig:
    variant: str = "full"
    widths: tuple[int, ...] = (64, 128, 256, 256)
    blocks_per_stage: int = 1
    stem_kernel: int = 7
    stem_stride: int = 2
    block_kernel: int = 3
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)
    se_ratio: int = 8
    concentration_width: int = 64
    concentration_dropout: float = 0.1
    mixstyle: MixStyleConfig = field(default_factory=MixStyleConfig)
    head_hidden: int = 256
    head_dropout: float = 0.5
    n_classes: int = 7
    n_leads: int = 12
    window: int = 5000
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.mixstyle, dict):
            self.mixstyle = MixStyleConfig(**self.mixstyle)
        self.widths = tuple(self.widths)
        self.stage_strides = tuple(self.stage_strides)
        self.mixstyle.stages = tuple(self.mixstyle.stages)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.stage_strides) != len(self.widths):
            raise ValueError("need one stride per stage")
        if self.variant == "full" and min(self.widths) % self.se_ratio:
            raise ValueError("SE ratio must divide every stage width")
        if not 0 <= self.mixstyle.p <= 1 or self.mixstyle.alpha <= 0:
            raise ValueError("MixStyle needs 0 <= p <= 1 and alpha > 0")

    @property
    def uses_se(self) -> bool:
        return self.variant == "full"

    @property
    def uses_concentration(self) -> bool:
        return self.variant in ("intermediate", "full")

    @property
    def uses_mixstyle(self) -> bool:
        return self.variant == "full"

    @property
    def fusion_width(self) -> int:
        if self.uses_concentration:
            return self.concentration_width * len(self.widths)
        return self.widths[-1]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["stage_strides"] = list(self.stage_strides)
        d["mixstyle"]["stages"] = list(self.mixstyle.stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), **changes})

    @classmethod
    def desk(cls, variant: str = "full", **overrides) -> "ModelConfig":
        """A narrow configuration that trains in minutes on one CPU core."""
        base = dict(
            variant=variant,
            widths=(16, 32, 32, 32),
            stem_stride=4,
            stage_strides=(2, 2, 2, 2),
            se_ratio=4,
            concentration_width=16,
            head_hidden=64,
        )
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------- blocks


def _kaiming(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def se_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Squeeze (GAP) -> excite (FC, ReLU, FC, sigmoid) -> rescale channels."""
    if x.shape[1] != w1.shape[1]:
        raise ValueError("SE block: channel mismatch")
    s = ops.sigmoid(ops.linear(ops.relu(ops.linear(ops.global_avg_pool(x), w1, b1)), w2, b2))
    return ops.mul(x, ops.reshape(s, s.shape + (1,)))


def mixstyle(
    x: Tensor,
    cfg: MixStyleConfig,
    rng: np.random.Generator | None,
    training: bool,
    lam=None,
    perm=None,
    force: bool = False,
) -> tuple[Tensor, dict | None]:
    """Mix per-(instance, channel) time statistics with a shuffled batch partner.

    Returns the output and, when mixing fired, ``{"lambda", "perm"}``. ``lam`` and
    ``perm`` override the random draws; ``force`` skips the coin flip.
    """
    n_batch = x.shape[0]
    if not training or n_batch < 2:
        return x, None
    if not force and rng.random() >= cfg.p:
        return x, None
    if lam is None:
        lam = rng.beta(cfg.alpha, cfg.alpha, size=n_batch)
    if perm is None:
        perm = rng.permutation(n_batch)
    lam_arr = np.broadcast_to(np.asarray(lam, dtype=x.dtype), (n_batch,)).reshape(n_batch, 1, 1)
    mu = ops.mean(x, axis=2, keepdims=True)
    centered = ops.sub(x, mu)
    sig = ops.sqrt(ops.clamp_min(ops.mean(ops.square(centered), axis=2, keepdims=True), cfg.sigma_floor**2))
    normed = ops.div(centered, sig)
    lam_t = Tensor(lam_arr)
    one_minus = Tensor(1.0 - lam_arr)
    sig_mix = ops.add(ops.mul(lam_t, sig), ops.mul(one_minus, ops.take(sig, perm, 0)))
    mu_mix = ops.add(ops.mul(lam_t, mu), ops.mul(one_minus, ops.take(mu, perm, 0)))
    out = ops.add(ops.mul(normed, sig_mix), mu_mix)
    return out, {"lambda": np.asarray(lam_arr).ravel().copy(), "perm": np.asarray(perm).copy()}


class HeartBeatNet:
    """Parameters live in ``self.store``; forward is a pure function of them."""

    def __init__(self, config: ModelConfig, seed: int = 42, dtype=np.float32):
        self.config = config
        self.store = ParamStore(dtype)
        self.mix_log: list[dict] = []
        rng = np.random.default_rng(seed)
        self._build(rng)

    # -- construction -------------------------------------------------

    def _conv(self, rng, name, c_out, c_in, k, bias=False):
        self.store.add(f"{name}.weight", _kaiming(rng, (c_out, c_in, k), c_in * k))
        if bias:
            self.store.add(f"{name}.bias", np.zeros(c_out), decay=False)

    def _bn(self, name, c):
        self.store.add(f"{name}.weight", np.ones(c), decay=False)
        self.store.add(f"{name}.bias", np.zeros(c), decay=False)

    def _linear(self, rng, name, n_out, n_in):
        self.store.add(f"{name}.weight", _uniform(rng, (n_out, n_in), n_in))
        self.store.add(f"{name}.bias", _uniform(rng, (n_out,), n_in), decay=False)

    def _build(self, rng):
        cfg = self.config
        self._conv(rng, "stem.conv", cfg.widths[0], cfg.n_leads, cfg.stem_kernel)
        self._bn("stem.bn", cfg.widths[0])
        c_in = cfg.widths[0]
        for s, (width, stride) in enumerate(zip(cfg.widths, cfg.stage_strides), 1):
            for b in range(1, cfg.blocks_per_stage + 1):
                name = f"stage{s}.block{b}"
                k = cfg.block_kernel
                self._conv(rng, f"{name}.conv1", width, c_in, k)
                self._bn(f"{name}.bn1", width)
                self._conv(rng, f"{name}.conv2", width, width, k)
                self._bn(f"{name}.bn2", width)
                if cfg.uses_se:
                    hidden = width // cfg.se_ratio
                    self._linear(rng, f"{name}.se.fc1", hidden, width)
                    self._linear(rng, f"{name}.se.fc2", width, hidden)
                if c_in != width or (b == 1 and stride != 1):
                    self._conv(rng, f"{name}.shortcut", width, c_in, 1)
                c_in = width
        if cfg.uses_concentration:
            for s, width in enumerate(cfg.widths, 1):
                self._conv(rng, f"conc{s}.conv", cfg.concentration_width, width, 1, bias=True)
        self._linear(rng, "head.fc1", cfg.head_hidden, cfg.fusion_width)
        self._linear(rng, "head.fc2", cfg.n_classes, cfg.head_hidden)
        # buffers after all parameters so the flat layout is params-then-buffers
        for name in [k[: -len(".weight")] for k in self.store.params if ".bn" in k and k.endswith(".weight")]:
            c = self.store[f"{name}.weight"].shape[0]
            self.store.add_buffer(f"{name}.running_mean", np.zeros(c))
            self.store.add_buffer(f"{name}.running_var", np.ones(c))

    # -- state --------------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.store.n_params()

    def state_layout(self):
        return self.store.layout()

    def conv_layers(self) -> list[str]:
        return [k[: -len(".weight")] for k, t in self.store if t.ndim == 3]

    @property
    def default_cam_layer(self) -> str:
        return f"stage{len(self.config.widths)}.block{self.config.blocks_per_stage}.conv2"

    # -- forward ------------------------------------------------------

    def forward(
        self,
        x,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        capture: bool = False,
        override: dict | None = None,
        mix_control: dict | None = None,
    ):
        """Logits ``[B, n_classes]``; with ``capture`` also a dict of named activations.

        ``override`` maps a conv layer name to an array that replaces that layer's
        output (used for gradient checks against an activation). ``mix_control``
        forces MixStyle draws: ``{"lambda": ..., "perm": ..., "force": bool}``.
        """
        cfg = self.config
        training = mode == "train"
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if training and rng is None:
            raise ValueError("train-mode forward needs an rng")
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.store.dtype))
        if x.ndim != 3 or x.shape[1] != cfg.n_leads:
            raise ValueError(f"expected input [B, {cfg.n_leads}, L], got {x.shape}")
        if x.shape[2] != cfg.window:
            raise ValueError(f"window length {x.shape[2]} does not match config ({cfg.window})")

        p = self.store.params
        acts: dict[str, Tensor] = {}
        override = override or {}
        self.mix_log = []

        def tap(name, t):
            if name in override:
                t = Tensor(np.asarray(override[name], dtype=t.dtype), requires_grad=True)
            if capture:
                acts[name] = t
            return t

        def bn(name, t):
            return ops.batchnorm1d(
                t,
                p[f"{name}.weight"],
                p[f"{name}.bias"],
                self.store.buffers[f"{name}.running_mean"],
                self.store.buffers[f"{name}.running_var"],
                training,
                cfg.bn_momentum,
                cfg.bn_eps,
            )

        def conv(name, t, stride=1, pad=0):
            bias = p.get(f"{name}.bias")
            return tap(name, ops.conv1d(t, p[f"{name}.weight"], bias, stride, pad))

        h = conv("stem.conv", x, cfg.stem_stride, cfg.stem_kernel // 2)
        h = ops.relu(bn("stem.bn", h))
        features = []
        for s, stride in enumerate(cfg.stage_strides, 1):
            for b in range(1, cfg.blocks_per_stage + 1):
                name = f"stage{s}.block{b}"
                h = self._res_block(name, h, stride if b == 1 else 1, conv, bn)
            if cfg.uses_mixstyle and s in cfg.mixstyle.stages:
                mc = mix_control or {}
                h, info = mixstyle(
                    h, cfg.mixstyle, rng, training, mc.get("lambda"), mc.get("perm"), mc.get("force", False)
                )
                if info is not None:
                    self.mix_log.append({"stage": s, **info})
            features.append(tap(f"stage{s}", h))

        if cfg.uses_concentration:
            hs = [
                self.concentration(f"conc{s}", f, training, rng, conv)
                for s, f in enumerate(features, 1)
            ]
            fused = ops.concat(hs, axis=1)
        else:
            fused = ops.global_avg_pool(features[-1])
        fused = tap("fusion", fused)
        z = ops.relu(ops.linear(fused, p["head.fc1.weight"], p["head.fc1.bias"]))
        z = ops.dropout(z, cfg.head_dropout, training, rng)
        logits = ops.linear(z, p["head.fc2.weight"], p["head.fc2.bias"])
        return (logits, acts) if capture else logits

    __call__ = forward

    def res_block(self, name: str, x: Tensor, stride: int = 1, training: bool = True) -> Tensor:
        """One SE-ResBlock applied on its own (no activation capture)."""
        p, cfg = self.store.params, self.config

        def conv(n, t, stride=1, pad=0):
            return ops.conv1d(t, p[f"{n}.weight"], p.get(f"{n}.bias"), stride, pad)

        def bn(n, t):
            return ops.batchnorm1d(t, p[f"{n}.weight"], p[f"{n}.bias"], self.store.buffers[f"{n}.running_mean"],
                                   self.store.buffers[f"{n}.running_var"], training, cfg.bn_momentum, cfg.bn_eps)

        return self._res_block(name, x, stride, conv, bn)

    def _res_block(self, name, x, stride, conv, bn):
        cfg = self.config
        pad = cfg.block_kernel // 2
        y = ops.relu(bn(f"{name}.bn1", conv(f"{name}.conv1", x, stride, pad)))
        y = bn(f"{name}.bn2", conv(f"{name}.conv2", y, 1, pad))
        if cfg.uses_se:
            p = self.store.params
            y = se_block(y, p[f"{name}.se.fc1.weight"], p[f"{name}.se.fc1.bias"],
                         p[f"{name}.se.fc2.weight"], p[f"{name}.se.fc2.bias"])
        if f"{name}.shortcut.weight" in self.store.params:
            short = conv(f"{name}.shortcut", x, stride, 0)
        else:
            short = x
        return ops.relu(ops.add(short, y))

    def concentration(self, name, feat, training, rng, conv=None):
        """h = GAP(dropout(relu(conv1x1(F))))."""
        if conv is None:
            p = self.store.params
            h = ops.conv1d(feat, p[f"{name}.conv.weight"], p[f"{name}.conv.bias"])
        else:
            h = conv(f"{name}.conv", feat)
        h = ops.dropout(ops.relu(h), self.config.concentration_dropout, training, rng)
        return ops.global_avg_pool(h)

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode class probabilities for a stack of windows ``[N, 12, L]``."""
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                logits = self.forward(x[i : i + batch_size], mode="eval")
                out.append(ops.softmax(logits).data)
        if not out:
            return np.zeros((0, self.config.n_classes))
        return np.concatenate(out).astype(np.float64)


# ---------------------------------------------------------- complexity


def count_macs(config: ModelConfig) -> int:
    """Multiply-accumulates of one eval forward for a single window."""
    cfg = config
    macs = 0

    def conv(c_out, c_in, k, t_out):
        return c_out * c_in * k * t_out

    t = ops.conv_output_length(cfg.window, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel // 2)
    macs += conv(cfg.widths[0], cfg.n_leads, cfg.stem_kernel, t)
    c_in = cfg.widths[0]
    pad = cfg.block_kernel // 2
    lengths = []
    for s, (width, stride) in enumerate(zip(cfg.widths, cfg.stage_strides), 1):
        for b in range(1, cfg.blocks_per_stage + 1):
            st = stride if b == 1 else 1
            t_in = t
            t = ops.conv_output_length(t_in, cfg.block_kernel, st, pad)
            macs += conv(width, c_in, cfg.block_kernel, t) + conv(width, width, cfg.block_kernel, t)
            if cfg.uses_se:
                macs += 2 * width * (width // cfg.se_ratio)
            if c_in != width or (b == 1 and stride != 1):
                macs += conv(width, c_in, 1, t)
            c_in = width
        lengths.append((width, t))
    if cfg.uses_concentration:
        macs += sum(conv(cfg.concentration_width, w, 1, tl) for w, tl in lengths)
    macs += cfg.head_hidden * cfg.fusion_width + cfg.n_classes * cfg.head_hidden
    return macs


def count_params_flops(config: ModelConfig, runs: int = 100, batch: int = 1, seed: int = 0) -> dict:
    """Exact parameter count, analytic FLOPs (2 x MACs), median eval latency."""
    model = HeartBeatNet(config, seed=seed)
    return efficiency_report(model, runs=runs, batch=batch, seed=seed)


def efficiency_report(model: HeartBeatNet, runs: int = 100, batch: int = 1, seed: int = 0) -> dict:
    cfg = model.config
    x = np.random.default_rng(seed).standard_normal((batch, cfg.n_leads, cfg.window)).astype(model.store.dtype)
    timings = []
    with no_grad():
        model.forward(x)  # warm-up
        for _ in range(runs):
            t0 = time.perf_counter()
            model.forward(x)
            timings.append(time.perf_counter() - t0)
    return {
        "variant": cfg.variant,
        "params": model.n_params,
        "flops": 2 * count_macs(cfg),
        "latency_ms": float(np.median(timings) * 1e3) if timings else None,
        "runs": runs,
    }
