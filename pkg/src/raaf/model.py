"""Glimpse-based attention network over activity frames.

Per frame the convolutional encoder produces a map ``C`` of the same size as
the input frame. The attention stream takes ``T`` glimpses of ``C`` with an
LSTM whose hidden state drives a Gaussian location policy and an action
(softmax) head. The hidden state after the last glimpse of every frame is
fed to a second, frame-level LSTM whose final state is classified by a
linear softmax head.

Monte Carlo copies of a sample are laid out as consecutive rows: row
``n = b * M + m`` is copy ``m`` of sample ``b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernel
from .exceptions import ConfigError, DataError, DimensionError, NumericError, StateError
from .glimpse import GlimpseNetwork, Retina, location_to_pixel
from .kernel import ParamSlot

LOG_UNIFORM_SQUARE = -math.log(4.0)


def default_glimpse_window(frame_shape) -> tuple[int, int]:
    """Base retina window (rows, cols) for a frame shape.

    Frames at least 78 rows tall get 64x16; smaller frames get the largest
    4:1 window fitting inside the frame.
    """
    H, W = frame_shape
    if H >= 78:
        return (64, 16)
    w = max(1, min(W, H // 4))
    return (max(1, min(H, 4 * w)), w)


@dataclass
class ModelConfig:
    frame_shape: tuple[int, int]
    n_classes: int
    n_frames: int = 5
    n_glimpses: int = 30
    n_copies: int = 20
    conv_channels: tuple[int, int] = (8, 8)
    pool_stages: tuple[bool, bool] = (True, True)
    glimpse_window: tuple[int, int] | None = None
    n_scales: int = 3
    scale_factor: int = 2
    dim_what: int = 128
    dim_g: int = 220
    hidden_attention: int = 100
    hidden_frame: int = 1000
    sigma2: float = 0.22
    frame_input: str = "hidden"  # or "action"
    random_initial_hidden: bool = False
    location_mode: str = "policy"  # or "random"
    greedy_eval: bool = False

    def __post_init__(self):
        self.frame_shape = tuple(int(v) for v in self.frame_shape)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        self.pool_stages = tuple(bool(v) for v in self.pool_stages)
        if self.glimpse_window is None:
            self.glimpse_window = default_glimpse_window(self.frame_shape)
        self.glimpse_window = tuple(int(v) for v in self.glimpse_window)
        self.validate()

    def validate(self):
        positive = ["n_classes", "n_frames", "n_glimpses", "n_copies", "n_scales", "scale_factor",
                    "dim_what", "dim_g", "hidden_attention", "hidden_frame"]
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if len(self.frame_shape) != 2 or min(self.frame_shape) < 1:
            raise ConfigError(f"bad frame shape {self.frame_shape}")
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1 or len(self.pool_stages) != 2:
            raise ConfigError("encoder has exactly two convolution stages")
        if not self.sigma2 > 0:
            raise ConfigError("location variance must be positive")
        if self.frame_input not in ("hidden", "action"):
            raise ConfigError(f"frame_input must be 'hidden' or 'action', got {self.frame_input!r}")
        if self.location_mode not in ("policy", "random"):
            raise ConfigError(f"location_mode must be 'policy' or 'random', got {self.location_mode!r}")
        width = self.frame_shape[1]
        for stage, pool in enumerate(self.pool_stages):
            if pool:
                if width < 3:
                    raise ConfigError(
                        f"frame width collapses to {width} before pooling stage {stage + 1}; "
                        "pooling needs at least 3 columns"
                    )
                width //= 3

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


class Encoder:
    """conv3x3 -> relu -> maxpool(1x3), twice, then a dense layer back to the frame size."""

    def __init__(self, frame_shape, channels=(8, 8), pool_stages=(True, True), rng=None):
        rng = rng if rng is not None else kernel.make_rng(0)
        H, W = frame_shape
        self.frame_shape = (H, W)
        self.pool_stages = tuple(pool_stages)
        c_in = 1
        self.convs = []
        width = W
        for k, (c_out, pool) in enumerate(zip(channels, pool_stages)):
            fan_in, fan_out = c_in * 9, c_out * 9
            Kw = ParamSlot(f"enc.conv{k + 1}.W", kernel.glorot_uniform((c_out, c_in, 3, 3), fan_in, fan_out, rng))
            Kb = ParamSlot(f"enc.conv{k + 1}.b", np.zeros(c_out))
            self.convs.append((Kw, Kb))
            c_in = c_out
            if pool:
                if width < 3:
                    raise ConfigError(f"frame width collapses below 3 before pooling stage {k + 1}")
                width //= 3
        n_flat = c_in * H * width
        self.fc_W = ParamSlot("enc.fc.W", kernel.glorot_uniform((H * W, n_flat), n_flat, H * W, rng))
        self.fc_b = ParamSlot("enc.fc.b", np.zeros(H * W))

    @property
    def params(self) -> list[ParamSlot]:
        out = []
        for Kw, Kb in self.convs:
            out += [Kw, Kb]
        return out + [self.fc_W, self.fc_b]

    def forward(self, frames):
        """``(N, H, W)`` frames -> ``(N, H, W)`` encoded frames."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[1:] != self.frame_shape:
            raise DimensionError(f"encoder expects frames of shape {self.frame_shape}, got {frames.shape[1:]}")
        n = frames.shape[0]
        x = frames[:, None]
        caches = []
        for (Kw, Kb), pool in zip(self.convs, self.pool_stages):
            z, c_conv = kernel.conv2d_forward(x, Kw, Kb)
            a, c_relu = kernel.relu_forward(z)
            c_pool = None
            if pool:
                a, c_pool = kernel.maxpool_forward(a)
            caches.append((c_conv, c_relu, c_pool))
            x = a
        flat_shape = x.shape
        out, c_fc = kernel.linear_forward(x.reshape(n, -1), self.fc_W, self.fc_b)
        return out.reshape(n, *self.frame_shape), (caches, flat_shape, c_fc)

    def backward(self, grad_out, cache):
        kernel._require(cache, "encoder")
        caches, flat_shape, c_fc = cache
        n = grad_out.shape[0]
        dx = kernel.linear_backward(grad_out.reshape(n, -1), c_fc, self.fc_W, self.fc_b).reshape(flat_shape)
        for (Kw, Kb), (c_conv, c_relu, c_pool) in zip(reversed(self.convs), reversed(caches)):
            if c_pool is not None:
                dx = kernel.maxpool_backward(dx, c_pool)
            dx = kernel.relu_backward(dx, c_relu)
            dx = kernel.conv2d_backward(dx, c_conv, Kw, Kb)
        return dx[:, 0]

    @staticmethod
    def kink_margin(cache) -> float:
        """Smallest distance of any relu input from 0 or any pooling runner-up from its max."""
        caches = cache[0]
        margin = np.inf
        for c_conv, c_relu, c_pool in caches:
            margin = min(margin, float(np.min(np.abs(c_relu))))
            if c_pool is not None:
                a = np.maximum(c_relu, 0.0)
                n = a.shape[-1] // 3
                top = np.sort(a[..., : 3 * n].reshape(*a.shape[:-1], n, 3), axis=-1)
                live = top[..., 2] > 0
                if np.any(live):
                    margin = min(margin, float(np.min((top[..., 2] - top[..., 1])[live])))
        return margin


def sample_location(mean, sigma2: float, rng: np.random.Generator):
    """Draw from an isotropic 2-D Gaussian around ``mean``.

    Returns ``(clamped, raw, log_density)``; the density is evaluated at the
    raw (pre-clamp) draw.
    """
    mean = np.asarray(mean, dtype=np.float64)
    raw = mean + math.sqrt(sigma2) * rng.standard_normal(mean.shape)
    return np.clip(raw, -1.0, 1.0), raw, gaussian_log_density(raw, mean, sigma2)


def gaussian_log_density(x, mean, sigma2: float):
    diff = np.asarray(x) - np.asarray(mean)
    return -math.log(2.0 * math.pi * sigma2) - np.sum(diff * diff, axis=-1) / (2.0 * sigma2)


def policy_backward(raw, mu_cache, advantages, sigma2: float, W: ParamSlot, b: ParamSlot):
    """Backward of ``-A * log N(raw; tanh(W h + b), sigma2 I)`` through the location head.

    The Gaussian score with respect to the mean is ``(raw - mean) / sigma2``.
    Accumulates into ``W`` and ``b`` and returns the gradient on ``h``.
    """
    c_lin, mu = mu_cache
    d_mu = -np.asarray(advantages)[:, None] * (raw - mu) / sigma2
    return kernel.linear_backward(d_mu * (1.0 - mu * mu), c_lin, W, b)


@dataclass
class EpisodeTrace:
    """Attention record of one Monte Carlo copy of one sample."""

    loc_mean: np.ndarray  # (F, T, 2) policy mean behind each used location
    loc_raw: np.ndarray  # (F, T, 2) pre-clamp draw
    loc_used: np.ndarray  # (F, T, 2) clamped location actually glimpsed
    log_density: np.ndarray  # (F, T)
    from_policy: np.ndarray  # (T,) False for the initial (uniform) location
    actions: np.ndarray  # (F, C) step-T action distributions
    probs: np.ndarray  # (C,) this copy's class scores
    prediction: int
    reward: float | None = None


@dataclass
class ForwardResult:
    n_samples: int
    n_copies: int
    probs: np.ndarray  # (N, C) per copy
    mean_probs: np.ndarray  # (B, C)
    loc_mean: np.ndarray  # (N, F, T, 2)
    loc_raw: np.ndarray
    loc_used: np.ndarray
    log_density: np.ndarray  # (N, F, T)
    from_policy: np.ndarray  # (T,)
    actions: np.ndarray  # (N, F, C)
    cache: dict | None = field(default=None, repr=False)

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.mean_probs, axis=1)

    @property
    def copy_predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1).reshape(self.n_samples, self.n_copies)

    def trace(self, b: int, m: int) -> EpisodeTrace:
        n = b * self.n_copies + m
        return EpisodeTrace(
            self.loc_mean[n], self.loc_raw[n], self.loc_used[n], self.log_density[n],
            self.from_policy.copy(), self.actions[n], self.probs[n], int(np.argmax(self.probs[n])),
        )


class RAAFNetwork:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = kernel.make_rng(seed)
        cfg = config
        self.encoder = Encoder(cfg.frame_shape, cfg.conv_channels, cfg.pool_stages, rng)
        self.retina = Retina(cfg.glimpse_window[0], cfg.glimpse_window[1], cfg.n_scales, cfg.scale_factor)
        self.glimpse = GlimpseNetwork(self.retina.size, cfg.dim_what, cfg.dim_what, cfg.dim_g, rng)
        Ha, Hf, C = cfg.hidden_attention, cfg.hidden_frame, cfg.n_classes
        self.core_a_W, self.core_a_b = self._lstm_params("core_a", cfg.dim_g, Ha, rng)
        self.action_W = ParamSlot("action.W", kernel.glorot_uniform((C, Ha), Ha, C, rng))
        self.action_b = ParamSlot("action.b", np.zeros(C))
        self.locator_W = ParamSlot("locator.W", kernel.glorot_uniform((2, Ha), Ha, 2, rng))
        self.locator_b = ParamSlot("locator.b", np.zeros(2))
        frame_in = Ha if cfg.frame_input == "hidden" else C
        self.core_f_W, self.core_f_b = self._lstm_params("core_f", frame_in, Hf, rng)
        self.head_W = ParamSlot("head.W", kernel.glorot_uniform((C, Hf), Hf, C, rng))
        self.head_b = ParamSlot("head.b", np.zeros(C))

    @staticmethod
    def _lstm_params(name, n_in, hidden, rng):
        W = ParamSlot(f"{name}.W", kernel.glorot_uniform((4 * hidden, n_in + hidden), n_in + hidden, 4 * hidden, rng))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0  # forget gate
        return W, ParamSlot(f"{name}.b", b)

    @property
    def params(self) -> list[ParamSlot]:
        return (
            self.encoder.params
            + self.glimpse.params
            + [self.core_a_W, self.core_a_b, self.action_W, self.action_b, self.locator_W, self.locator_b,
               self.core_f_W, self.core_f_b, self.head_W, self.head_b]
        )

    @property
    def location_params(self) -> list[ParamSlot]:
        return [self.locator_W, self.locator_b]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    # ------------------------------------------------------------------
    # forward

    def encode(self, frames):
        return self.encoder.forward(frames)

    def location_mean(self, h):
        pre, c_lin = kernel.linear_forward(h, self.locator_W, self.locator_b)
        mu = np.tanh(pre)
        return mu, (c_lin, mu)

    def attend_step(self, encoded, index, loc, h, c):
        """One glimpse: retina -> glimpse net -> LSTM-a -> (action logits, next location mean)."""
        rho = self.retina.extract(encoded, loc, index)
        g, g_cache = self.glimpse.forward(rho, loc)
        h, c, l_cache = kernel.lstm_forward(g, h, c, self.core_a_W, self.core_a_b)
        logits, a_cache = kernel.linear_forward(h, self.action_W, self.action_b)
        mu, mu_cache = self.location_mean(h)
        return h, c, logits, mu, (g_cache, l_cache, a_cache, mu_cache)

    def forward(self, frames, rng: np.random.Generator, n_copies: int | None = None, locations=None,
                greedy: bool = False, keep_cache: bool = True) -> ForwardResult:
        """Run ``n_copies`` stochastic replays of each sample in ``frames`` (B, F, H, W).

        ``locations`` (N, F, T, 2), when given, replays fixed glimpse
        locations instead of sampling them.
        """
        cfg = self.config
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 3:
            frames = frames[None]
        B, F = frames.shape[:2]
        if F != cfg.n_frames or frames.shape[2:] != cfg.frame_shape:
            raise DimensionError(
                f"expected samples of shape ({cfg.n_frames}, *{cfg.frame_shape}), got {frames.shape[1:]}"
            )
        M = cfg.n_copies if n_copies is None else int(n_copies)
        T = cfg.n_glimpses
        N = B * M
        Ha, Hf, C = cfg.hidden_attention, cfg.hidden_frame, cfg.n_classes
        H, W = cfg.frame_shape

        encoded, enc_cache = self.encode(frames.reshape(B * F, H, W))
        assert encoded.shape == (B * F, H, W)
        encoded = encoded.reshape(B, F, H, W)
        sample_of_row = np.repeat(np.arange(B), M)

        loc_mean = np.zeros((N, F, T, 2))
        loc_raw = np.zeros((N, F, T, 2))
        loc_used = np.zeros((N, F, T, 2))
        log_density = np.zeros((N, F, T))
        from_policy = np.zeros(T, dtype=bool)
        actions = np.zeros((N, F, C))
        policy = cfg.location_mode == "policy"
        if policy:
            from_policy[1:] = True

        r = np.zeros((N, Hf))
        cf = np.zeros((N, Hf))
        step_caches = []
        frame_caches = []
        for f in range(F):
            enc_f = encoded[:, f]
            if cfg.random_initial_hidden:
                h = 0.1 * rng.standard_normal((N, Ha))
            else:
                h = np.zeros((N, Ha))
            c = np.zeros((N, Ha))
            if locations is not None:
                loc = np.asarray(locations[:, f, 0], dtype=np.float64)
            else:
                loc = rng.uniform(-1.0, 1.0, size=(N, 2))
            loc_mean[:, f, 0] = loc
            loc_raw[:, f, 0] = loc
            loc_used[:, f, 0] = loc
            log_density[:, f, 0] = LOG_UNIFORM_SQUARE
            caches_f = []
            for t in range(T):
                h, c, logits, mu, cache = self.attend_step(enc_f, sample_of_row, loc, h, c)
                g_cache = cache[0]
                # retina input is recomputed in backward to bound memory
                cache = ((g_cache[0], None) + g_cache[2:],) + cache[1:]
                caches_f.append((loc, cache))
                if t == T - 1:
                    break
                if locations is not None:
                    raw = np.asarray(locations[:, f, t + 1], dtype=np.float64)
                    nxt = np.clip(raw, -1.0, 1.0)
                    mean = mu if policy else raw
                    dens = gaussian_log_density(raw, mu, cfg.sigma2) if policy else np.full(N, LOG_UNIFORM_SQUARE)
                elif not policy:
                    raw = rng.uniform(-1.0, 1.0, size=(N, 2))
                    nxt, mean, dens = raw, raw, np.full(N, LOG_UNIFORM_SQUARE)
                elif greedy:
                    raw = mu
                    nxt, mean, dens = mu, mu, gaussian_log_density(mu, mu, cfg.sigma2)
                else:
                    nxt, raw, dens = sample_location(mu, cfg.sigma2, rng)
                    mean = mu
                loc_mean[:, f, t + 1] = mean
                loc_raw[:, f, t + 1] = raw
                loc_used[:, f, t + 1] = nxt
                log_density[:, f, t + 1] = dens
                loc = nxt
            a_probs = kernel.softmax(logits)
            actions[:, f] = a_probs
            frame_in = h if cfg.frame_input == "hidden" else a_probs
            r, cf, f_cache = kernel.lstm_forward(frame_in, r, cf, self.core_f_W, self.core_f_b)
            step_caches.append(caches_f)
            frame_caches.append(f_cache)

        out_logits, head_cache = kernel.linear_forward(r, self.head_W, self.head_b)
        probs = kernel.softmax(out_logits)
        if not np.all(np.isfinite(probs)):
            raise NumericError("non-finite class scores in forward pass")
        mean_probs = probs.reshape(B, M, C).mean(axis=1)
        cache = None
        if keep_cache:
            cache = dict(enc=enc_cache, encoded=encoded, rows=sample_of_row, steps=step_caches,
                         frames=frame_caches, head=head_cache, logits=out_logits)
        return ForwardResult(B, M, probs, mean_probs, loc_mean, loc_raw, loc_used, log_density,
                             from_policy, actions, cache)

    # ------------------------------------------------------------------
    # losses and backward

    def classification_loss(self, result: ForwardResult, labels, action_weight: float = 1.0) -> float:
        """Mean per-copy cross-entropy of the final scores plus the weighted step-T action loss."""
        y = np.repeat(np.asarray(labels), result.n_copies)
        _, loss = kernel.softmax_xent_forward(result.cache["logits"], y)
        total = float(loss.mean())
        if action_weight:
            a = np.clip(result.actions[np.arange(len(y))[:, None], :, y[:, None]], 1e-300, None)
            total += action_weight * float(-np.log(a).mean())
        return total

    def reinforce_loss(self, result: ForwardResult, advantages) -> float:
        """Surrogate ``-(1/M) sum_i sum_t A_i log pi(l_t^i)``, averaged over samples."""
        adv = np.asarray(advantages, dtype=np.float64).reshape(-1)
        lp = result.log_density[:, :, result.from_policy].sum(axis=(1, 2))
        return float(-(adv * lp).sum() / result.n_copies / result.n_samples)

    def backward(self, result: ForwardResult, labels, advantages=None, action_weight: float = 1.0,
                 reinforce_weight: float = 1.0, classification: bool = True, scale: float = 1.0):
        """Accumulate gradients of the hybrid loss into ``param.grad``.

        Classification terms are averaged over samples and copies. When
        ``advantages`` (B, M) are given, the REINFORCE term for the location
        policy is added (scaled by ``1/M`` and averaged over samples). Every
        term is multiplied by ``scale``, which lets micro-batches add up to a
        batch mean.
        Glimpse locations are constants: no gradient flows through sampling.
        """
        cache = result.cache
        if cache is None:
            raise StateError("backward needs a forward pass run with keep_cache=True")
        cfg = self.config
        B, M = result.n_samples, result.n_copies
        N, F, T = B * M, cfg.n_frames, cfg.n_glimpses
        Ha, Hf = cfg.hidden_attention, cfg.hidden_frame
        H, W = cfg.frame_shape
        y = np.repeat(np.asarray(labels), M)
        rows = cache["rows"]
        encoded = cache["encoded"]
        w_row = scale / N

        if classification:
            d_logits = kernel.softmax_xent_backward(result.probs, y, w_row)
        else:
            d_logits = np.zeros_like(result.probs)
        dr = kernel.linear_backward(d_logits, cache["head"], self.head_W, self.head_b)
        dcf = np.zeros((N, Hf))

        adv = None
        if advantages is not None and cfg.location_mode == "policy":
            adv = np.asarray(advantages, dtype=np.float64).reshape(N) * (reinforce_weight * scale / N)

        d_encoded = np.zeros((B, F, H, W))
        for f in reversed(range(F)):
            d_in, dr, dcf = kernel.lstm_backward(dr, dcf, cache["frames"][f], self.core_f_W, self.core_f_b)
            d_act_logits = np.zeros((N, cfg.n_classes))
            if classification and action_weight:
                d_act_logits += kernel.softmax_xent_backward(result.actions[:, f], y, action_weight * w_row / F)
            if cfg.frame_input == "hidden":
                dh = d_in
            else:
                dh = np.zeros((N, Ha))
                p = result.actions[:, f]
                d_act_logits += p * (d_in - np.sum(d_in * p, axis=1, keepdims=True))
            dc = np.zeros((N, Ha))
            steps = cache["steps"][f]
            for t in reversed(range(T)):
                loc, (g_cache, l_cache, a_cache, mu_cache) = steps[t]
                if t == T - 1:
                    dh = dh + kernel.linear_backward(d_act_logits, a_cache, self.action_W, self.action_b)
                elif adv is not None:
                    # the draw made from h_t is the location used at t + 1
                    dh = dh + policy_backward(result.loc_raw[:, f, t + 1], mu_cache, adv, cfg.sigma2,
                                              self.locator_W, self.locator_b)
                dg, dh, dc = kernel.lstm_backward(dh, dc, l_cache, self.core_a_W, self.core_a_b)
                rho = self.retina.extract(encoded[:, f], loc, rows)
                flat = rho.reshape(N, -1)
                full_cache = (g_cache[0], flat) + g_cache[2:]
                d_rho = self.glimpse.backward(dg, full_cache)
                d_encoded[:, f] += self.retina.backward(d_rho, loc, rows, (H, W), B)
        self.encoder.backward(d_encoded.reshape(B * F, H, W), cache["enc"])

    # ------------------------------------------------------------------
    # persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        slots = {p.name: p for p in self.params}
        if set(state) != set(slots):
            missing = sorted(set(slots) - set(state))
            extra = sorted(set(state) - set(slots))
            raise DataError(f"checkpoint does not match model: missing {missing}, unexpected {extra}")
        for name, value in state.items():
            if value.shape != slots[name].shape:
                raise DataError(f"checkpoint tensor {name} has shape {value.shape}, model expects {slots[name].shape}")
            slots[name].value[...] = value

    def save(self, path, extra: dict | None = None):
        """Write the parameter container plus a ``.json`` sidecar with the model config."""
        path = Path(path)
        kernel.save_params(path, self.params)
        meta = {"model": self.config.to_dict()}
        if extra:
            meta.update(extra)
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> tuple["RAAFNetwork", dict]:
        path = Path(path)
        sidecar = Path(str(path) + ".json")
        if not sidecar.exists():
            raise DataError(f"missing model config {sidecar}")
        meta = json.loads(sidecar.read_text())
        config = ModelConfig.from_dict(meta["model"])
        net = cls(config)
        net.load_state_dict(kernel.load_params(path))
        return net, meta
