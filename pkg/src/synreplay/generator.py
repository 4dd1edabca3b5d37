"""Class-conditional denoising diffusion generator with classifier-free guidance.

A 3-layer tanh MLP predicts the noise added to a flattened image given a
sinusoidal timestep embedding and a learned class-condition embedding
(row 0 of the condition table is the designated unconditional row).
Images live in [0,1] at the interface; diffusion runs internally on
2*x - 1 and samples are mapped back and clamped after the final step.

Sampling is ancestral DDPM with the guided prediction
``eps = (1-s)*eps_uncond + s*eps_cond``; the affine form makes s=0 and s=1
reduce exactly to the unconditional and conditional paths.  The sampler
runs on the kernel backend (no autodiff) and is a pure function of
(weights, class, guidance, seed).
"""

import math
from dataclasses import dataclass

import numpy as np

from synreplay import backend
from synreplay.numcore import (ParamStore, Tensor, adamw_step, backward,
                               concat, gather_rows, matmul, tanh, tmean,
                               square)
from synreplay.numcore import checkpoint
from synreplay.numcore.rng import RngStream, derive
from synreplay.numcore.tensor import NonFiniteError, ShapeError
from synreplay.vlm import PromptTemplate


class NoiseSchedule:
    """Linear beta schedule over T steps.

    Indexing convention: t runs over 0..T-1 and ``alpha_bar[t]`` is the
    product of (1 - beta) from step 0 through t inclusive; there is no
    implicit leading 1.  The posterior at t=0 uses alpha_bar_prev[0] = 1,
    which makes its variance exactly zero (no noise on the last step).
    """

    def __init__(self, steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02,
                 betas=None):
        if betas is None:
            if steps < 1:
                raise ValueError("schedule needs at least one step")
            betas = np.linspace(beta_start, beta_end, steps)
        betas = np.asarray(betas, dtype=np.float64)
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.betas = betas
        self.steps = len(betas)
        self.alphas = 1.0 - betas
        self.alpha_bar = np.cumprod(self.alphas)
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        self.alpha_bar_prev = np.concatenate(([1.0], self.alpha_bar[:-1]))
        self.posterior_var = betas * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)


def q_sample(x0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward-process sample sqrt(abar_t)*x0 + sqrt(1-abar_t)*noise."""
    if not 0 <= t < schedule.steps:
        raise ValueError(f"q_sample: t={t} outside [0, {schedule.steps})")
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeError(f"q_sample: x0 {x0.shape} vs noise {noise.shape}")
    abar = schedule.alpha_bar[t]
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


def _time_table(steps: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.arange(steps)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class GeneratedCandidate:
    sample: np.ndarray          # flat image in [0,1]
    prompt: str                 # filled template for the class
    class_name: str | None
    seed: int
    confidence: float | None = None


class GeneratorModel:
    """Frozen-after-pretraining base denoiser plus its condition table.

    Class-condition embeddings are composed from the class name's tokens:
    the learned table holds one row per token and a class's condition row
    is the mean of its token rows (row 0 of the exposed table is a
    dedicated unconditional token).  Classes that share tokens with the
    pretraining pool therefore inherit a compositional prior - the base
    generator renders a plausible but parameter/domain-wrong variant for
    an unseen class, which is exactly the gap a task adapter has to close.
    Token rows are a pure function of the token string and init seed, so
    nothing depends on registration order.
    """

    def __init__(self, class_names: list, pixels: int = 256, width: int = 128,
                 time_dim: int = 16, cond_dim: int = 16,
                 schedule: NoiseSchedule | None = None,
                 template: PromptTemplate = PromptTemplate(), init_seed: int = 0):
        if len(set(class_names)) != len(class_names):
            raise ValueError("duplicate class names in condition table")
        self.class_names = list(class_names)
        self.pixels = pixels
        self.width = width
        self.time_dim = time_dim
        self.cond_dim = cond_dim
        self.schedule = schedule or NoiseSchedule()
        self.template = template
        self.init_seed = init_seed
        self.time_table = _time_table(self.schedule.steps, time_dim)
        self.frozen = False
        self._row = {name: i + 1 for i, name in enumerate(self.class_names)}

        from synreplay.vlm import tokenize_text
        tokens = ["<uncond>"]
        class_tokens = []
        for name in self.class_names:
            toks = tokenize_text(name)
            class_tokens.append(toks)
            for tok in toks:
                if tok not in tokens:
                    tokens.append(tok)
        self.tokens = tokens
        # mixing matrix: exposed condition row -> mean of its token rows
        mix = np.zeros((len(class_names) + 1, len(tokens)))
        tok_index = {tok: i for i, tok in enumerate(tokens)}
        mix[0, 0] = 1.0
        for i, toks in enumerate(class_tokens):
            for tok in toks:
                mix[i + 1, tok_index[tok]] += 1.0 / len(toks)
        self.cond_mix = mix

        d_in = pixels + time_dim + cond_dim
        store = ParamStore()

        def gaussian(name, shape, scale):
            return store.add(name, derive(init_seed, "gen-init", name).normal(shape) * scale)

        gaussian("w1", (d_in, width), 1.0 / math.sqrt(d_in))
        store.add("b1", np.zeros(width))
        gaussian("w2", (width, width), 1.0 / math.sqrt(width))
        store.add("b2", np.zeros(width))
        gaussian("w3", (width, pixels), 1.0 / math.sqrt(width))
        store.add("b3", np.zeros(pixels))
        tok_table = np.stack([
            derive(init_seed, "gen-cond", tok).normal((cond_dim,)) / math.sqrt(cond_dim)
            for tok in tokens])
        store.add("cond", tok_table)
        self.store = store

    def class_row(self, class_name: str | None) -> int:
        if class_name is None:
            return 0
        if class_name not in self._row:
            raise KeyError(f"class {class_name!r} not in the generator's condition table")
        return self._row[class_name]

    def freeze(self) -> None:
        self.frozen = True

    def fingerprint(self) -> str:
        return checkpoint.fingerprint(self.store.clone_values())

    def save(self, path) -> None:
        checkpoint.save_arrays(path, self.store.clone_values())
        with open(str(path) + ".classes", "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.class_names) + "\n")

    def load(self, path) -> None:
        self.store.load_values(checkpoint.load_arrays(path))

    # -- forward passes ----------------------------------------------------

    def predict_noise_t(self, x_t: Tensor, t_ids: np.ndarray, cond_ids: np.ndarray,
                        train_cond: bool = True) -> Tensor:
        """Autodiff forward for training; cond token rows get gradients."""
        s = self.store
        t_ids = np.asarray(t_ids, dtype=np.int64)
        temb = Tensor(self.time_table[t_ids])
        if train_cond:
            cond_all = matmul(Tensor(self.cond_mix), s["cond"])
            cond = gather_rows(cond_all, np.asarray(cond_ids, dtype=np.int64))
        else:
            cond = Tensor(self.cond_values()[np.asarray(cond_ids, dtype=np.int64)])
        inp = concat([x_t, temb, cond], axis=1)
        h = tanh(matmul(inp, s["w1"]) + s["b1"])
        h = tanh(matmul(h, s["w2"]) + s["b2"])
        x0_hat = matmul(h, s["w3"]) + s["b3"]
        abar = self.schedule.alpha_bar[t_ids][:, None]
        return (x_t - Tensor(np.sqrt(abar)) * x0_hat) * Tensor(1.0 / np.sqrt(1.0 - abar))

    def sampling_weights(self):
        """Raw float64 arrays used by the kernel-backend sampler."""
        s = self.store
        return (s["w1"].values, s["b1"].values, s["w2"].values,
                s["b2"].values, s["w3"].values, s["b3"].values)

    def cond_values(self) -> np.ndarray:
        """Per-class condition rows (row 0 unconditional), token-composed."""
        return self.cond_mix @ self.store["cond"].values


def denoise_loss(model, images01: np.ndarray, class_ids: np.ndarray, rng: RngStream,
                 cond_dropout: float = 0.1) -> Tensor:
    """Noise-prediction MSE on a batch, with condition dropout for guidance.

    ``class_ids`` index the model's class list (condition rows are
    class_id + 1); with probability ``cond_dropout`` a row is replaced by
    the unconditional row.  Timesteps and noise are drawn from ``rng``.
    """
    images01 = np.atleast_2d(np.asarray(images01, dtype=np.float64))
    if images01.shape[0] == 0:
        raise ValueError("denoise_loss: empty batch")
    if not 0.0 <= cond_dropout < 1.0:
        raise ValueError(f"denoise_loss: cond_dropout={cond_dropout} outside [0, 1)")
    sched = model.schedule
    batch = images01.shape[0]
    x0 = 2.0 * images01 - 1.0
    t_ids = rng.integers(sched.steps, batch)
    noise = rng.normal(x0.shape)
    cond_ids = np.asarray(class_ids, dtype=np.int64) + 1
    if cond_dropout > 0.0:
        drop = rng.uniform((batch,)) < cond_dropout
        cond_ids = np.where(drop, 0, cond_ids)
    coef_sig = np.sqrt(sched.alpha_bar[t_ids])[:, None]
    coef_noise = np.sqrt(1.0 - sched.alpha_bar[t_ids])[:, None]
    x_t = Tensor(coef_sig * x0 + coef_noise * noise)
    eps_hat = model.predict_noise_t(x_t, t_ids, cond_ids)
    return tmean(square(eps_hat - Tensor(noise)))


def sample_cfg(model, class_name: str | None, guidance: float, seed: int,
               trace: list | None = None) -> GeneratedCandidate:
    """Ancestral sampling with classifier-free guidance.

    Deterministic given (weights, class, guidance, seed).  ``trace``, when
    supplied, collects (t, eps_hat, x_next) per step for identity checks.
    """
    if guidance < 0.0:
        raise ValueError(f"sample_cfg: guidance must be >= 0, got {guidance}")
    sched = model.schedule
    weights = model.sampling_weights()
    cond_table = model.cond_values()
    row = model.class_row(class_name)
    temb = model.time_table
    rng = RngStream(seed)
    x = rng.normal((model.pixels,))

    for t in range(sched.steps - 1, -1, -1):
        sig = math.sqrt(sched.alpha_bar[t])
        noi = math.sqrt(1.0 - sched.alpha_bar[t])
        # The head predicts the clean signal; the guided noise prediction
        # eps_u + s*(eps_c - eps_u) is formed through the same affine mix
        # of the clean-signal predictions (algebraically identical).
        if class_name is None or guidance == 0.0:
            x0_hat = _predict(weights, x, temb[t], cond_table[0])
        elif guidance == 1.0:
            x0_hat = _predict(weights, x, temb[t], cond_table[row])
        else:
            x0_u = _predict(weights, x, temb[t], cond_table[0])
            x0_c = _predict(weights, x, temb[t], cond_table[row])
            x0_hat = (1.0 - guidance) * x0_u + guidance * x0_c
        # Guided predictions extrapolate; clamping to the known data range
        # keeps high guidance scales from blowing up the trajectory.
        eps = (x - sig * np.clip(x0_hat, -1.0, 1.0)) / noi
        x = (x - sched.betas[t] / noi * eps) / math.sqrt(sched.alphas[t])
        if t > 0:
            x = x + math.sqrt(sched.posterior_var[t]) * rng.normal((model.pixels,))
        if trace is not None:
            trace.append((t, eps.copy(), x.copy()))

    sample = np.clip((x + 1.0) / 2.0, 0.0, 1.0)
    prompt = model.template.fill(class_name) if class_name is not None else ""
    return GeneratedCandidate(sample=sample, prompt=prompt, class_name=class_name, seed=seed)


def _predict(weights, x: np.ndarray, temb_row: np.ndarray, cond_row: np.ndarray) -> np.ndarray:
    inp = np.concatenate([x, temb_row, cond_row])[None, :]
    return backend.mlp3_tanh(np.ascontiguousarray(inp), *weights)[0]


def train_generator(model: GeneratorModel, images01: np.ndarray, class_ids: np.ndarray,
                    epochs: int, batch_size: int, rng: RngStream,
                    lr: float = 1e-3, betas=(0.9, 0.999), weight_decay: float = 1e-2,
                    cond_dropout: float = 0.1) -> list:
    """Pretrain the denoiser; freezes the model afterwards.

    Raises on divergence (any non-finite loss aborts with the epoch noted).
    """
    if model.frozen:
        raise RuntimeError("train_generator: model already frozen")
    images01 = np.asarray(images01, dtype=np.float64)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    n = len(images01)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            try:
                loss = denoise_loss(model, images01[idx], class_ids[idx], rng, cond_dropout)
            except NonFiniteError as exc:
                raise RuntimeError(f"generator training diverged at epoch {epoch}: {exc}") from exc
            model.store.zero_grad()
            backward(loss)
            adamw_step(model.store, lr=lr, betas=betas, weight_decay=weight_decay)
            losses.append(loss.item())
    model.freeze()
    return losses
