"""Toy rectified-flow coating model.

Images stay in pixel space (no autoencoder). Each image is packed into
patch tokens; the local condition is the token-wise concatenation of the
packed input image, projected albedo and mask. Material traits and the
edit task become global embedding tokens whose mean is added to every
token's hidden state. The velocity network is a per-token MLP with a
hand-written backward pass.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import TRAIT_NAMES, Rng, TraitVector
from .dataset import TASKS, build_training_sample, sample_task_mixture

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"COATFLOW"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- packing


def pack(planes, p):
    """``(C, H, W)`` planes -> ``((H/p)*(W/p), C*p*p)`` tokens, one token per p x p block.

    Tokens run over blocks in row-major order; inside a token the features are
    ordered channel, then block row, then block column.
    """
    planes = np.asarray(planes)
    c, h, w = planes.shape
    if h % p or w % p:
        raise ValueError(f"plane size {h}x{w} is not divisible by patch size {p}")
    x = planes.reshape(c, h // p, p, w // p, p)
    return x.transpose(1, 3, 0, 2, 4).reshape((h // p) * (w // p), c * p * p)


def unpack(tokens, c, h, w, p):
    x = np.asarray(tokens).reshape(h // p, w // p, c, p, p)
    return x.transpose(2, 0, 3, 1, 4).reshape(c, h, w)


def space_to_depth(plane, factor):
    """``(H*f, W*f)`` single plane -> ``(f*f, H, W)`` stack, as when a full-res mask
    is matched to a downsampled latent grid."""
    plane = np.asarray(plane)
    hf, wf = plane.shape
    if hf % factor or wf % factor:
        raise ValueError("mask size is not a multiple of the downsampling factor")
    x = plane.reshape(hf // factor, factor, wf // factor, factor)
    return x.transpose(1, 3, 0, 2).reshape(factor * factor, hf // factor, wf // factor)


@dataclass(eq=False)
class TokenSequence:
    tokens: np.ndarray
    layout: dict
    grid: tuple
    patch: int

    @property
    def n_tokens(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]

    def slice(self, part):
        start = 0
        for name, width in self.layout.items():
            if name == part:
                return self.tokens[:, start:start + width]
            start += width
        raise KeyError(part)


def build_conditioning(input_planes, albedo_planes, mask_plane, p, latent_planes=None):
    """Pack image, albedo and mask and concatenate them per token (in that order).

    ``mask_plane`` may be finer than the image planes by an integer factor;
    it is folded into channels first. If ``latent_planes`` (the noisy state)
    is given it is packed in front, which is the full per-token layout the
    velocity network sees.
    """
    input_planes = np.asarray(input_planes, dtype=np.float64)
    albedo_planes = np.asarray(albedo_planes, dtype=np.float64)
    mask_plane = np.asarray(mask_plane, dtype=np.float64)
    if input_planes.shape != albedo_planes.shape:
        raise ValueError("image and albedo planes must have identical shapes")
    _, h, w = input_planes.shape
    if mask_plane.ndim == 3:
        if mask_plane.shape[0] != 1:
            raise ValueError("mask must be a single plane")
        mask_plane = mask_plane[0]
    mh, mw = mask_plane.shape
    if mh % h or mw % w or mh // h != mw // w:
        raise ValueError(f"mask {mask_plane.shape} does not align with planes {(h, w)}")
    mask_stack = space_to_depth(mask_plane, mh // h)
    parts = {}
    if latent_planes is not None:
        latent_planes = np.asarray(latent_planes, dtype=np.float64)
        if latent_planes.shape[1:] != (h, w):
            raise ValueError("latent planes must share the image plane size")
        parts["latent"] = pack(latent_planes, p)
    parts.update(image=pack(input_planes, p), albedo=pack(albedo_planes, p), mask=pack(mask_stack, p))
    tokens = np.concatenate(list(parts.values()), axis=1)
    return TokenSequence(tokens, {k: v.shape[1] for k, v in parts.items()}, (h // p, w // p), p)


def to_planes(img):
    img = np.asarray(img, dtype=np.float64)
    return np.moveaxis(img, -1, 0) if img.ndim == 3 else img[None]


# ---------------------------------------------------------------- embeddings


EMBEDDING_ROWS = {"pos": len(TRAIT_NAMES), "task": len(TASKS)}
VALUE_EMBEDDINGS = ("val_roughness", "val_metal_on", "val_metal_off", "val_trans_on", "val_trans_off",
                    "val_thick_solid", "val_thick_transmissive")


def embedding_terms(traits, task):
    """Each global token as a list of ``(param, row, coefficient)`` terms."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    tokens = [[("emb_task", TASKS.index(task), 1.0)]]
    if task == "remove" or traits is None:
        return tokens
    tr = traits
    pos = lambda name: ("emb_pos", TRAIT_NAMES.index(name), 1.0)  # noqa: E731
    tokens.append([pos("roughness"), ("val_roughness", None, float(tr.roughness))])
    tokens.append([pos("metalness"), ("val_metal_on" if tr.metalness >= 0.5 else "val_metal_off", None, 1.0)])
    tokens.append([pos("transmission"), ("val_trans_on" if tr.transmission >= 0.5 else "val_trans_off", None, 1.0)])
    thick = "val_thick_transmissive" if tr.transmission >= 0.5 else "val_thick_solid"
    tokens.append([pos("thickness"), (thick, None, float(tr.thickness))])
    return tokens


def _term_value(params, name, row):
    return params[name] if row is None else params[name][row]


def embed_traits(traits, task, table):
    """Global tokens: the task embedding, then one ``E_pos + x * E_val`` token per trait.

    The remove task carries only its task token.
    """
    out = []
    for token in embedding_terms(traits, task):
        vec = np.zeros_like(table["emb_pos"][0])
        for name, row, coeff in token:
            vec = vec + coeff * _term_value(table, name, row)
        out.append(vec)
    return out


# ---------------------------------------------------------------- model


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_steps: int = 300
    schedule: str = "cosine"
    batch_size: int = 8
    total_steps: int = 500
    side: int = 32
    patch: int = 2
    hidden: int = 64
    seed: int = 0
    smoothing_window: int = 25

    def __post_init__(self):
        for name in ("batch_size", "side", "patch", "hidden", "smoothing_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("learning_rate must be positive and step counts non-negative")
        if self.side % self.patch:
            raise ValueError("side must be divisible by patch")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown train config fields: {sorted(extra)}")
        return cls(**d)


# settings that reach the loss target within 500 steps at 32x32
TOY_TRAIN_CONFIG = dict(learning_rate=3e-3, warmup_steps=50, batch_size=8, total_steps=500)


def learning_rate(step, config):
    """Linear warmup from zero, then cosine decay to zero at ``total_steps``."""
    base = config.learning_rate
    if step < config.warmup_steps:
        return base * step / config.warmup_steps
    if config.schedule == "constant":
        return base
    span = max(1, config.total_steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


class FlowModel:
    """Per-token velocity MLP plus the trait/task embedding table.

    ``params`` is an ordered dict; its order is the checkpoint order.
    """

    def __init__(self, channels=3, patch=2, hidden=64, cond_dim=None, seed=0, params=None):
        self.channels = channels
        self.patch = patch
        self.hidden = hidden
        self.token_dim = channels * patch * patch
        self.cond_dim = cond_dim if cond_dim is not None else 2 * self.token_dim + patch * patch
        self.in_dim = self.token_dim + self.cond_dim + 1
        if params is None:
            params = self._init(Rng(seed, stream=0x5EED))
        self.params = params

    def _init(self, rng):
        f, h, c = self.in_dim, self.hidden, self.token_dim
        p = {
            "w_in": rng.normal(0.0, 1.0 / math.sqrt(f), (f, h)),
            "b_in": np.zeros(h),
            "w_hidden": rng.normal(0.0, 1.0 / math.sqrt(h), (h, h)),
            "b_hidden": np.zeros(h),
            "w_out": rng.normal(0.0, 1.0 / math.sqrt(h), (h, c)),
            "b_out": np.zeros(c),
            "emb_pos": rng.normal(0.0, 0.1, (EMBEDDING_ROWS["pos"], h)),
        }
        for name in VALUE_EMBEDDINGS:
            p[name] = rng.normal(0.0, 0.1, h)
        p["emb_task"] = rng.normal(0.0, 0.1, (EMBEDDING_ROWS["task"], h))
        return p

    @property
    def n_params(self):
        return sum(v.size for v in self.params.values())

    def config(self):
        return {"channels": self.channels, "patch": self.patch, "hidden": self.hidden, "cond_dim": self.cond_dim}

    def copy(self):
        return FlowModel(**self.config(), params={k: v.copy() for k, v in self.params.items()})

    # -- global conditioning

    def global_vector(self, terms):
        """Mean of the global embedding tokens described by ``terms``."""
        g = np.zeros(self.hidden)
        for token in terms:
            for name, row, coeff in token:
                g = g + coeff * _term_value(self.params, name, row)
        return g / len(terms)

    # -- forward / backward

    def _forward(self, z, t, cond, g):
        b, n, _ = z.shape
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(b, 1, 1), (b, n, 1))
        x = np.concatenate([z, cond, tcol], axis=2)
        p = self.params
        h1 = np.tanh(x @ p["w_in"] + p["b_in"] + g[:, None, :])
        h2 = np.tanh(h1 @ p["w_hidden"] + p["b_hidden"])
        out = h2 @ p["w_out"] + p["b_out"]
        return out, (x, h1, h2)

    def __call__(self, z, t, cond, embeddings):
        """Velocity for one sample: ``z`` and ``cond`` are ``(N, .)`` token arrays and
        ``embeddings`` is the list returned by :func:`embed_traits`."""
        g = np.mean(np.asarray(embeddings, dtype=np.float64), axis=0)
        out, _ = self._forward(z[None], np.asarray([t]), np.asarray(cond)[None], g[None])
        return out[0]

    def loss_and_grads(self, batch):
        """Flow-matching loss on a batch and its gradient for every parameter."""
        x0, noise, t, cond, terms = batch["x0"], batch["noise"], batch["t"], batch["cond"], batch["terms"]
        zt = (1.0 - t)[:, None, None] * noise + t[:, None, None] * x0
        target = x0 - noise
        g = np.stack([self.global_vector(tm) for tm in terms])
        out, (x, h1, h2) = self._forward(zt, t, cond, g)
        diff = out - target
        loss = float(np.mean(diff * diff))
        p = self.params
        d_out = 2.0 * diff / diff.size
        grads = {}
        grads["w_out"] = np.einsum("bnh,bnc->hc", h2, d_out)
        grads["b_out"] = d_out.sum(axis=(0, 1))
        d_a2 = (d_out @ p["w_out"].T) * (1.0 - h2 * h2)
        grads["w_hidden"] = np.einsum("bnh,bnk->hk", h1, d_a2)
        grads["b_hidden"] = d_a2.sum(axis=(0, 1))
        d_a1 = (d_a2 @ p["w_hidden"].T) * (1.0 - h1 * h1)
        grads["w_in"] = np.einsum("bnf,bnh->fh", x, d_a1)
        grads["b_in"] = d_a1.sum(axis=(0, 1))
        d_g = d_a1.sum(axis=1)
        for name in ("emb_pos", *VALUE_EMBEDDINGS, "emb_task"):
            grads[name] = np.zeros_like(p[name])
        for i, tm in enumerate(terms):
            share = d_g[i] / len(tm)
            for token in tm:
                for name, row, coeff in token:
                    if row is None:
                        grads[name] += coeff * share
                    else:
                        grads[name][row] += coeff * share
        return loss, {k: grads[k] for k in p}

    def loss(self, batch):
        x0, noise, t, cond, terms = batch["x0"], batch["noise"], batch["t"], batch["cond"], batch["terms"]
        zt = (1.0 - t)[:, None, None] * noise + t[:, None, None] * x0
        g = np.stack([self.global_vector(tm) for tm in terms])
        out, _ = self._forward(zt, t, cond, g)
        return float(np.mean((out - (x0 - noise)) ** 2))


def cfm_loss(velocity, x0, noise, t, cond, traits):
    """Conditional flow-matching loss for one sample.

    ``z_t = (1 - t) * noise + t * x0`` so the regression target ``x0 - noise``
    is exactly dz/dt. ``velocity(z_t, t, cond, traits)`` may be a
    :class:`FlowModel` or any callable with that signature.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    zt = (1.0 - t) * noise + t * x0
    v = np.asarray(velocity(zt, t, cond, traits), dtype=np.float64)
    return float(np.mean((v - (x0 - noise)) ** 2))


# ---------------------------------------------------------------- gradient check


def gradient_errors(model, batch, h=1e-5, grad_fn=None, frozen=()):
    """Relative error of analytic vs central-difference gradients, per parameter array."""
    grad_fn = grad_fn or model.loss_and_grads
    _, analytic = grad_fn(batch)
    errors = {}
    for name, value in model.params.items():
        if name in frozen:
            continue
        worst = 0.0
        flat = value.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = model.loss(batch)
            flat[i] = old - h
            down = model.loss(batch)
            flat[i] = old
            g_fd = (up - down) / (2.0 * h)
            err = abs(ga[i] - g_fd) / max(abs(ga[i]), abs(g_fd), 1e-8)
            worst = max(worst, err)
        errors[name] = worst
    return errors


def grad_check(model, batch, h=1e-5, grad_fn=None, frozen=()):
    """Largest relative gradient error over all trainable parameters (0 if none)."""
    errors = gradient_errors(model, batch, h, grad_fn, frozen)
    return max(errors.values(), default=0.0)


def reference_instance(seed=0):
    """Small double-precision model (< 1000 parameters) and a batch covering every
    task and every embedding branch."""
    rng = Rng(seed, stream=77)
    model = FlowModel(channels=3, patch=2, hidden=8, seed=seed)
    side, p = 4, 2
    cases = [("add_textured", TraitVector(0.3, 1.0, 0.0, 0.6)),
             ("add_uniform", TraitVector(0.8, 0.0, 1.0, 0.2)),
             ("replace", TraitVector(0.5, 1.0, 1.0, 0.9)),
             ("remove", None)]
    x0, noise, conds, terms = [], [], [], []
    for task, traits in cases:
        img = rng.uniform(0, 1, (3, side, side))
        albedo = rng.uniform(0, 1, (3, side, side)) if task != "remove" else np.zeros((3, side, side))
        mask = (rng.uniform(0, 1, (side, side)) > 0.4).astype(np.float64)
        conds.append(build_conditioning(img, albedo, mask, p).tokens)
        x0.append(pack(rng.uniform(0, 1, (3, side, side)), p))
        noise.append(rng.normal(0, 1, x0[-1].shape))
        terms.append(embedding_terms(traits, task))
    batch = {"x0": np.stack(x0), "noise": np.stack(noise), "t": rng.uniform(0.05, 0.95, len(cases)),
             "cond": np.stack(conds), "terms": terms}
    return model, batch


# ---------------------------------------------------------------- data + training


def sample_to_tokens(sample, p):
    cond = build_conditioning(to_planes(sample.input_image), to_planes(sample.projected_albedo), sample.mask, p)
    return pack(to_planes(sample.target_image), p), cond.tokens


def training_stream(groups, seed):
    """Endless TrainingSample stream: task mixture draw, random group, task rules."""
    rng = Rng(seed, stream=0x7A5C)
    while True:
        task = sample_task_mixture(rng, 1)[0]
        group = groups[int(rng.integers(0, len(groups)))]
        if task == "replace" and len(group.variants) < 2:
            task = "add"
        yield build_training_sample(group, task, rng)


class _Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.b1, self.b2, self.eps = b1, b2, eps
        self.step = 0

    def update(self, params, grads, lr):
        self.step += 1
        c1 = 1.0 - self.b1 ** self.step
        c2 = 1.0 - self.b2 ** self.step
        for k in params:
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * grads[k] ** 2
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def smoothed(losses, window):
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        return losses
    kernel = np.ones(min(window, losses.size))
    return np.convolve(losses, kernel, mode="valid") / kernel.size


def train(data, config, model=None):
    """Adam on the flow-matching loss; returns ``(model, losses)``.

    ``data`` is an iterator of TrainingSamples. Raises DivergenceError on a
    non-finite loss.
    """
    p = config.patch
    model = model or FlowModel(channels=3, patch=p, hidden=config.hidden, seed=config.seed)
    opt = _Adam(model.params)
    rng = Rng(config.seed, stream=0xF10)
    losses = []
    for step in range(config.total_steps):
        x0, conds, terms = [], [], []
        for _ in range(config.batch_size):
            sample = next(data)
            if sample.target_image.shape[:2] != (config.side, config.side):
                raise ValueError(f"training images are {sample.target_image.shape[:2]}, config side is {config.side}")
            tok, cond = sample_to_tokens(sample, p)
            x0.append(tok)
            conds.append(cond)
            terms.append(embedding_terms(sample.traits, sample.task))
        x0 = np.stack(x0)
        batch = {"x0": x0, "noise": rng.normal(0.0, 1.0, x0.shape), "t": rng.uniform(0.0, 1.0, len(x0)),
                 "cond": np.stack(conds), "terms": terms}
        loss, grads = model.loss_and_grads(batch)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        opt.update(model.params, grads, learning_rate(step, config))
        losses.append(loss)
        if step % 100 == 0:
            log.debug("step %d loss %.5f", step, loss)
    return model, losses


# ---------------------------------------------------------------- sampling


def sample(model, cond, traits, steps, rng, task="add_uniform", side=None):
    """Euler-integrate the learned velocity from noise (t=0) to data (t=1).

    ``cond`` is a TokenSequence; ``traits`` a TraitVector or None. Returns
    an ``(H, W, 3)`` image clamped to [0, 1].
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    tokens = cond.tokens if isinstance(cond, TokenSequence) else np.asarray(cond)
    g = model.global_vector(embedding_terms(traits, task))
    z = rng.normal(0.0, 1.0, (tokens.shape[0], model.token_dim))
    z = integrate(lambda zz, t: model._forward(zz[None], np.asarray([t]), tokens[None], g[None])[0][0], z, steps)
    gh, gw = cond.grid if isinstance(cond, TokenSequence) else (side // model.patch,) * 2
    img = unpack(z, model.channels, gh * model.patch, gw * model.patch, model.patch)
    return np.clip(np.moveaxis(img, 0, -1), 0.0, 1.0)


def integrate(velocity, z, steps):
    dt = 1.0 / steps
    for k in range(steps):
        z = z + dt * velocity(z, k * dt)
    return z


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model, config=None):
    header = {"format_version": CHECKPOINT_VERSION, "model": model.config(),
              "config": config.to_dict() if config is not None else None,
              "params": [[k, list(v.shape)] for k, v in model.params.items()]}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in model.params.values())
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + blob)


def load_checkpoint(path):
    """Returns ``(model, TrainConfig or None)``."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a flow-model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(data):
        raise ValueError("checkpoint has trailing bytes")
    cfg = TrainConfig.from_dict(header["config"]) if header.get("config") else None
    return FlowModel(**header["model"], params=params), cfg
