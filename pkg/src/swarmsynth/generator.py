"""Toy conditional denoising-diffusion generator.

The forward process follows the closed-form marginal
x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps over a linear beta schedule.
The denoiser is a small residual MLP over flattened pixels whose blocks all
receive the timestep embedding and the conditioning vector; it is trained
with the simplified noise-prediction MSE, with conditioning dropped at rate
p_uncond so sampling can combine the conditional and unconditional branches
(classifier-free guidance). Images live in [0, 1] and the predicted clean
image is clamped there at every ancestral step.

All gradients are computed analytically; there is no autodiff framework
underneath.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose

PARAMS_MAGIC = b"DN01"
DEFAULT_P_UNCOND = 0.1


# --------------------------------------------------------------------------
# noise schedule
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # (T,) variance schedule, beta[i] is beta_{i+1}

    def __post_init__(self) -> None:
        b = np.asarray(self.beta, dtype=np.float64)
        object.__setattr__(self, "beta", b)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if not (np.all(b > 0.0) and np.all(b < 1.0)):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValueError("betas must be non-decreasing")
        object.__setattr__(self, "alpha", 1.0 - b)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - b))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def abar(self, t: int) -> float:
        """Cumulative alpha with the convention abar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def linear_schedule(
    T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def forward_diffuse(
    x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Closed-form marginal sample x_t (t = 0 returns x0 unchanged)."""
    if not (0 <= t <= sched.T):
        raise ValueError(f"timestep {t} outside [0, {sched.T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ValueError("eps must match x0's shape")
    ab = sched.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# --------------------------------------------------------------------------
# conditioning
# --------------------------------------------------------------------------

POSE_ENC_FREQS = 4
POSE_ENC_DIM = 7 * (1 + 2 * POSE_ENC_FREQS)  # raw value + sin/cos ladder


def encode_pose(pose: Pose, scale: tuple[float, float, float]) -> np.ndarray:
    """Sinusoidal features of (normalized position, quaternion)."""
    p = np.asarray(pose.position, dtype=np.float64) / np.asarray(scale)
    v = np.concatenate([p, np.asarray(pose.orientation, dtype=np.float64)])
    feats = [v]
    for j in range(POSE_ENC_FREQS):
        feats.append(np.sin((2.0**j) * math.pi * v))
        feats.append(np.cos((2.0**j) * math.pi * v))
    return np.concatenate(feats)


@dataclass(frozen=True)
class Conditioning:
    """Semantic embedding plus pose features; null marks the unconditional
    branch and zeroes the whole vector."""

    semantic_embedding: np.ndarray
    pose_encoding: np.ndarray
    null_flag: bool = False

    def vec(self) -> np.ndarray:
        flag = 0.0 if self.null_flag else 1.0
        v = np.concatenate(
            [[flag], np.asarray(self.semantic_embedding, dtype=np.float64),
             np.asarray(self.pose_encoding, dtype=np.float64)]
        )
        if self.null_flag:
            return np.zeros_like(v)
        return v

    def null(self) -> "Conditioning":
        return Conditioning(
            np.zeros_like(np.asarray(self.semantic_embedding, dtype=np.float64)),
            np.zeros_like(np.asarray(self.pose_encoding, dtype=np.float64)),
            null_flag=True,
        )

    @property
    def dim(self) -> int:
        return 1 + len(self.semantic_embedding) + len(self.pose_encoding)


@dataclass(frozen=True)
class GuidancePayload:
    """Pixel mask plus RGB residuals (clean-image space) on masked pixels."""

    mask: np.ndarray  # (H, W) of {0, 1}
    residual: np.ndarray  # (H, W, 3)

    def __post_init__(self) -> None:
        m = np.asarray(self.mask)
        r = np.asarray(self.residual, dtype=np.float64)
        if r.shape != m.shape + (3,):
            raise ValueError("residual must be mask shape + (3,)")
        if not np.all(np.isin(m, (0, 1))):
            raise ValueError("mask entries must be 0 or 1")
        if np.any(r[m == 0] != 0.0):
            raise ValueError("residual must be zero outside the mask")


# --------------------------------------------------------------------------
# denoiser network
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchSpec:
    """Descriptor fixing the denoiser layout; serialized into checkpoints.

    The network is a residual MLP over flattened pixels with the timestep
    embedding and conditioning vector concatenated into every block input.
    It regresses the clean image (with a learned diagonal skip from the
    noisy input); the noise prediction is recovered analytically as
    eps_hat = (x_t - sqrt(abar_t) * f) / sqrt(1 - abar_t).
    """

    height: int = 16
    width: int = 16
    channels: int = 3
    cond_dim: int = 128
    temb_dim: int = 16
    hidden: int = 64
    blocks: int = 2

    @property
    def pixels(self) -> int:
        return self.height * self.width * self.channels

    @property
    def in_dim(self) -> int:
        return self.pixels + self.temb_dim + self.cond_dim

    @property
    def block_in(self) -> int:
        return self.hidden + self.temb_dim + self.cond_dim

    def param_count(self) -> int:
        n = self.hidden * self.in_dim + self.hidden
        n += self.blocks * (
            self.hidden * self.block_in + self.hidden
            + self.hidden * self.hidden + self.hidden
        )
        n += self.pixels * self.hidden + self.pixels
        n += self.pixels  # diagonal input skip
        return n

    def to_json(self) -> str:
        return json.dumps(
            {
                "height": self.height, "width": self.width,
                "channels": self.channels, "cond_dim": self.cond_dim,
                "temb_dim": self.temb_dim, "hidden": self.hidden,
                "blocks": self.blocks,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, s: str) -> "ArchSpec":
        return cls(**json.loads(s))


class DenoiserParams:
    """Flat parameter vector plus its architecture descriptor."""

    def __init__(self, arch: ArchSpec, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (arch.param_count(),):
            raise ValueError(
                f"expected {arch.param_count()} parameters, got {flat.shape}"
            )
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        self.arch = arch
        self.flat = flat

    @classmethod
    def init(cls, arch: ArchSpec, rng: np.random.Generator) -> "DenoiserParams":
        chunks = []
        for shape, fan_in, kind in _layer_shapes(arch):
            if kind == "weight":
                chunks.append(
                    rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape).ravel()
                )
            elif kind == "skip":
                chunks.append(np.ones(shape))  # start near the identity map
            else:
                chunks.append(np.zeros(shape))
        return cls(arch, np.concatenate(chunks))

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, self.flat.copy())

    def views(self) -> list[np.ndarray]:
        """Parameter tensors viewing the flat vector (no copies)."""
        out = []
        off = 0
        for shape, _, _ in _layer_shapes(self.arch):
            n = int(np.prod(shape))
            out.append(self.flat[off : off + n].reshape(shape))
            off += n
        return out

    def save(self, path) -> None:
        desc = self.arch.to_json().encode("utf-8")
        with open(path, "wb") as f:
            f.write(PARAMS_MAGIC)
            f.write(struct.pack("<I", len(desc)))
            f.write(desc)
            f.write(struct.pack("<Q", self.flat.size))
            f.write(self.flat.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "DenoiserParams":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != PARAMS_MAGIC:
            raise ValueError("bad denoiser checkpoint magic")
        (dlen,) = struct.unpack("<I", raw[4:8])
        arch = ArchSpec.from_json(raw[8 : 8 + dlen].decode("utf-8"))
        off = 8 + dlen
        (count,) = struct.unpack("<Q", raw[off : off + 8])
        flat = np.frombuffer(raw[off + 8 :], dtype="<f4").astype(np.float64)
        if flat.size != count:
            raise ValueError("denoiser checkpoint truncated")
        return cls(arch, flat)

    def wire_bytes(self) -> int:
        return 4 + 4 + len(self.arch.to_json().encode("utf-8")) + 8 + 4 * self.flat.size


def _layer_shapes(arch: ArchSpec) -> list[tuple[tuple[int, ...], int, str]]:
    shapes: list[tuple[tuple[int, ...], int, str]] = [
        ((arch.hidden, arch.in_dim), arch.in_dim, "weight"),
        ((arch.hidden,), arch.in_dim, "bias"),
    ]
    for _ in range(arch.blocks):
        shapes.append(((arch.hidden, arch.block_in), arch.block_in, "weight"))
        shapes.append(((arch.hidden,), arch.block_in, "bias"))
        shapes.append(((arch.hidden, arch.hidden), arch.hidden, "weight"))
        shapes.append(((arch.hidden,), arch.hidden, "bias"))
    shapes.append(((arch.pixels, arch.hidden), arch.hidden, "weight"))
    shapes.append(((arch.pixels,), arch.hidden, "bias"))
    shapes.append(((arch.pixels,), arch.pixels, "skip"))
    return shapes


def timestep_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of t / T; t may be scalar or (B,)."""
    tau = np.asarray(t, dtype=np.float64) / T
    ks = np.arange(1, dim // 2 + 1)
    ang = 2.0 * math.pi * np.multiply.outer(tau, ks)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class _NetTape:
    u0: np.ndarray
    h1: np.ndarray  # first hidden activation
    x_flat: np.ndarray
    noise_scale: np.ndarray  # sqrt(abar_t) / sqrt(1 - abar_t) per sample
    skip_scale: np.ndarray  # sqrt(abar_t) per sample
    uks: list[np.ndarray] = field(default_factory=list)
    zs: list[np.ndarray] = field(default_factory=list)
    h_out: np.ndarray | None = None
    f_out: np.ndarray | None = None


def denoiser_apply(
    params: DenoiserParams,
    x_flat: np.ndarray,
    t,
    cond_vec: np.ndarray,
    sched: NoiseSchedule,
) -> tuple[np.ndarray, _NetTape]:
    """Predicted noise for a batch: x_flat (B, P), t (B,), cond_vec (B, C).

    The MLP output f estimates the clean image; the returned prediction is
    eps_hat = (x_t - sqrt(abar_t) f) / sqrt(1 - abar_t). The diagonal input
    skip is scaled by sqrt(abar_t) so the noisy input feeds through at full
    strength only at low noise, vanishing where x_t is noise-dominated.
    """
    arch = params.arch
    v = params.views()
    ts = np.atleast_1d(np.asarray(t))
    temb = timestep_embedding(ts, sched.T, arch.temb_dim)
    u0 = np.concatenate([x_flat, temb, cond_vec], axis=-1)
    w0, b0 = v[0], v[1]
    h = np.tanh(u0 @ w0.T + b0)
    ab = np.array([sched.abar(int(tt)) for tt in ts])
    tape = _NetTape(
        u0=u0, h1=h, x_flat=x_flat,
        noise_scale=np.sqrt(ab) / np.sqrt(1.0 - ab),
        skip_scale=np.sqrt(ab),
    )
    for k in range(arch.blocks):
        w1, b1 = v[2 + 4 * k], v[3 + 4 * k]
        w2, b2 = v[4 + 4 * k], v[5 + 4 * k]
        uk = np.concatenate([h, temb, cond_vec], axis=-1)
        tape.uks.append(uk)
        z = np.tanh(uk @ w1.T + b1)
        tape.zs.append(z)
        h = h + z @ w2.T + b2
    tape.h_out = h
    w3, b3, skip = v[-3], v[-2], v[-1]
    f = h @ w3.T + b3 + (tape.skip_scale[:, None] * x_flat) * skip[None, :]
    tape.f_out = f
    inv = 1.0 / np.sqrt(1.0 - ab)
    eps_hat = inv[:, None] * x_flat - tape.noise_scale[:, None] * f
    return eps_hat, tape


def denoiser_backward(
    params: DenoiserParams, tape: _NetTape, d_eps: np.ndarray
) -> np.ndarray:
    """Gradient of sum(d_eps * eps_hat) w.r.t. the flat parameter vector."""
    return backward_from_clean_target(
        params, tape, -tape.noise_scale[:, None] * d_eps
    )


def backward_from_clean_target(
    params: DenoiserParams, tape: _NetTape, d_f: np.ndarray
) -> np.ndarray:
    """Gradient of sum(d_f * f) w.r.t. the flat parameters, with f the
    network's clean-image estimate."""
    arch = params.arch
    v = params.views()
    grads = [np.zeros_like(g) for g in v]
    grads[-1] += np.sum(
        d_f * (tape.skip_scale[:, None] * tape.x_flat), axis=0
    )  # diagonal skip
    w3 = v[-3]
    grads[-3] += d_f.T @ tape.h_out
    grads[-2] += d_f.sum(axis=0)
    dh = d_f @ w3
    for k in reversed(range(arch.blocks)):
        w1 = v[2 + 4 * k]
        w2 = v[4 + 4 * k]
        z = tape.zs[k]
        grads[4 + 4 * k] += dh.T @ z
        grads[5 + 4 * k] += dh.sum(axis=0)
        dz = dh @ w2
        dpre = dz * (1.0 - z * z)
        grads[2 + 4 * k] += dpre.T @ tape.uks[k]
        grads[3 + 4 * k] += dpre.sum(axis=0)
        dh = dh + (dpre @ w1)[:, : arch.hidden]
    dpre0 = dh * (1.0 - tape.h1 * tape.h1)
    grads[0] += dpre0.T @ tape.u0
    grads[1] += dpre0.sum(axis=0)
    return np.concatenate([g.ravel() for g in grads])


# --------------------------------------------------------------------------
# training and sampling
# --------------------------------------------------------------------------

def training_loss(
    params: DenoiserParams,
    x0: np.ndarray,
    c: Conditioning,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    p_uncond: float = DEFAULT_P_UNCOND,
) -> tuple[float, np.ndarray]:
    """Noise-prediction MSE and its parameter gradient for one image.

    Draws t uniform on [1, T] and Gaussian eps from rng; with probability
    p_uncond the conditioning is replaced by the null conditioning.
    """
    loss, grad = training_loss_batch(params, x0[None], [c], sched, rng, p_uncond)
    return loss, grad


def training_loss_batch(
    params: DenoiserParams,
    x0s: np.ndarray,
    cs: list[Conditioning],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    p_uncond: float = DEFAULT_P_UNCOND,
) -> tuple[float, np.ndarray]:
    """Mean loss and mean parameter gradient over a batch of images."""
    arch = params.arch
    b = x0s.shape[0]
    x0f = np.asarray(x0s, dtype=np.float64).reshape(b, -1)
    if x0f.shape[1] != arch.pixels:
        raise ValueError(f"image size {x0f.shape[1]} != arch pixels {arch.pixels}")
    ts = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal((b, arch.pixels))
    drop = rng.random(b) < p_uncond
    ab = np.array([sched.abar(int(t)) for t in ts])
    x_t = np.sqrt(ab)[:, None] * x0f + np.sqrt(1.0 - ab)[:, None] * eps
    cond = np.stack(
        [(c.null() if d else c).vec() for c, d in zip(cs, drop)], axis=0
    )
    eps_hat, tape = denoiser_apply(params, x_t, ts, cond, sched)
    resid = eps_hat - eps
    loss = float(np.mean(resid * resid))
    if not math.isfinite(loss):
        raise ValueError("non-finite diffusion training loss")
    d_eps = 2.0 * resid / (arch.pixels * b)
    grad = denoiser_backward(params, tape, d_eps)
    return loss, grad


def clean_target_loss_batch(
    params: DenoiserParams,
    x0s: np.ndarray,
    cs: list[Conditioning],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    p_uncond: float = DEFAULT_P_UNCOND,
) -> tuple[float, np.ndarray]:
    """Training surrogate: MSE between the network's clean-image estimate
    and x0, weighting every timestep equally.

    This is the noise-prediction objective reweighted by (1 - abar)/abar per
    sample; it gives mid- and high-noise timesteps (which dominate sampling
    quality) a fair share of the gradient instead of being drowned out by
    near-zero-noise draws.
    """
    arch = params.arch
    b = x0s.shape[0]
    x0f = np.asarray(x0s, dtype=np.float64).reshape(b, -1)
    if x0f.shape[1] != arch.pixels:
        raise ValueError(f"image size {x0f.shape[1]} != arch pixels {arch.pixels}")
    ts = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal((b, arch.pixels))
    drop = rng.random(b) < p_uncond
    ab = np.array([sched.abar(int(t)) for t in ts])
    x_t = np.sqrt(ab)[:, None] * x0f + np.sqrt(1.0 - ab)[:, None] * eps
    cond = np.stack(
        [(c.null() if d else c).vec() for c, d in zip(cs, drop)], axis=0
    )
    _eps_hat, tape = denoiser_apply(params, x_t, ts, cond, sched)
    resid = tape.f_out - x0f
    loss = float(np.mean(resid * resid))
    if not math.isfinite(loss):
        raise ValueError("non-finite clean-target training loss")
    d_f = 2.0 * resid / (arch.pixels * b)
    return loss, backward_from_clean_target(params, tape, d_f)


def fit(
    params: DenoiserParams,
    images: np.ndarray,
    conds: list[Conditioning],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    steps: int,
    batch_size: int = 32,
    lr: float = 3e-3,
    cosine_decay: bool = True,
    p_uncond: float = DEFAULT_P_UNCOND,
    log_every: int = 0,
) -> list[float]:
    """Adam training loop on the clean-target surrogate (in place).

    Returns the per-step loss trace. Deterministic given rng.
    """
    if len(conds) != images.shape[0]:
        raise ValueError("one conditioning per image required")
    m = np.zeros_like(params.flat)
    v = np.zeros_like(params.flat)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = []
    for step in range(1, steps + 1):
        cur_lr = lr
        if cosine_decay:
            cur_lr = lr * (0.1 + 0.45 * (1.0 + math.cos(math.pi * step / steps)))
        sel = rng.integers(0, images.shape[0], min(batch_size, images.shape[0]))
        loss, grad = clean_target_loss_batch(
            params, images[sel], [conds[i] for i in sel], sched, rng, p_uncond
        )
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mh = m / (1 - b1**step)
        vh = v / (1 - b2**step)
        params.flat -= cur_lr * mh / (np.sqrt(vh) + eps)
        trace.append(loss)
        if log_every and step % log_every == 0:
            print(f"[fit] step {step}/{steps} loss {loss:.4f}")
    return trace


def guided_epsilon(
    params: DenoiserParams,
    x_t: np.ndarray,
    t: int,
    c: Conditioning,
    g: GuidancePayload | None,
    w: float,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Classifier-free combination w * eps_cond + (1 - w) * eps_uncond.

    A guidance payload overwrites the masked pixels of the conditional
    branch's input toward the residual target (the residual is a clean-image
    delta, scaled by sqrt(abar_t) to live at noise level t).
    """
    xf = np.asarray(x_t, dtype=np.float64).reshape(-1)
    x_cond = xf
    if g is not None:
        shift = math.sqrt(sched.abar(t)) * (
            np.asarray(g.mask, dtype=np.float64)[..., None] * g.residual
        )
        x_cond = xf + shift.reshape(-1)
    ts = np.array([t])
    eps_c, _ = denoiser_apply(params, x_cond[None], ts, c.vec()[None], sched)
    if w == 1.0:
        return eps_c[0].reshape(np.shape(x_t))
    eps_u, _ = denoiser_apply(params, xf[None], ts, c.null().vec()[None], sched)
    if w == 0.0:
        return eps_u[0].reshape(np.shape(x_t))
    return (w * eps_c[0] + (1.0 - w) * eps_u[0]).reshape(np.shape(x_t))


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Strided descending timestep subsequence from T down to 1."""
    if not (1 <= steps <= T):
        raise ValueError(f"steps must lie in [1, {T}]")
    ts = np.unique(np.rint(np.linspace(T, 1, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def generate_view(
    params: DenoiserParams,
    c_p: Conditioning,
    sched: NoiseSchedule,
    steps: int,
    w: float,
    g: GuidancePayload | None,
    rng: np.random.Generator,
    init_image: np.ndarray | None = None,
    init_t: int | None = None,
) -> np.ndarray:
    """Ancestral sampling; returns an (H, W, 3) image.

    Default: sample from pure noise. steps < T runs the same update over a
    strided timestep subsequence (the low-fidelity fast path); steps = T is
    standard DDPM sampling. With init_image and init_t the trajectory starts
    from the forward-noised init at level init_t instead (a second pass that
    refines an existing belief rather than resampling from scratch).
    """
    arch = params.arch
    shape = (arch.height, arch.width, arch.channels)
    ts = sampling_timesteps(sched.T, steps)
    if init_image is not None:
        if init_t is None:
            raise ValueError("init_image requires init_t")
        ts = [t for t in ts if t <= init_t] or [max(1, init_t)]
        eps0 = rng.standard_normal(arch.pixels)
        x = forward_diffuse(
            np.asarray(init_image, dtype=np.float64).reshape(-1), ts[0], eps0,
            sched,
        )
    else:
        x = rng.standard_normal(arch.pixels)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = guided_epsilon(params, x, t, c_p, g, w, sched).reshape(-1)
        ab_t = sched.abar(t)
        ab_prev = sched.abar(t_prev)
        x0_hat = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        x0_hat = np.clip(x0_hat, 0.0, 1.0)
        if t_prev == 0:
            x = x0_hat
            break
        var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
        var = max(var, 0.0)
        coef = math.sqrt(max(1.0 - ab_prev - var, 0.0))
        x = (
            math.sqrt(ab_prev) * x0_hat
            + coef * eps
            + math.sqrt(var) * rng.standard_normal(arch.pixels)
        )
    return np.clip(x, 0.0, 1.0).reshape(shape)
