"""Low-rank adapters for the generator's linear layers.

An adapter holds (A, B) factors per targeted weight matrix; the adapted
layer computes W0 + (alpha/rank) * A @ B.  B starts at zero so a fresh
adapter is an exact no-op, and the base weights are never written - views
stay cheap and the frozen generator stays bit-identical through any number
of adapter finetunes.
"""

import json
import math
from pathlib import Path

import numpy as np

from synreplay.numcore import (ParamStore, Tensor, adamw_step, backward,
                               concat, matmul, tanh)
from synreplay.numcore import checkpoint
from synreplay.numcore.rng import RngStream
from synreplay.numcore.tensor import NonFiniteError
from synreplay.generator import GeneratorModel, denoise_loss

TARGET_LAYERS = ("w1", "w2", "w3")


class LoraAdapter:
    """Per-layer (A, B) factors; B = 0 so a fresh adapter is a no-op.

    A is Gaussian with std 2/sqrt(rank * d_in).  Scaling by fan-in keeps
    the gradient magnitude on B independent of the layer width; a width-
    independent scale makes adapter quality swing wildly with the draw of
    A at these layer sizes.
    """

    def __init__(self, base: GeneratorModel, rank: int = 4, alpha: float | None = None,
                 init_rng: RngStream | None = None):
        if rank < 1:
            raise ValueError("rank must be positive")
        self.rank = rank
        self.alpha = float(rank) if alpha is None else float(alpha)
        self.layer_dims = {}
        rng = init_rng or RngStream(0)
        store = ParamStore()
        for layer in TARGET_LAYERS:
            if layer not in base.store:
                raise ValueError(f"adapter target layer {layer!r} missing from base model")
            d_in, d_out = base.store[layer].shape
            if rank > min(d_in, d_out):
                raise ValueError(f"rank {rank} exceeds layer {layer} dims {d_in}x{d_out}")
            self.layer_dims[layer] = (d_in, d_out)
            store.add(f"{layer}.A", rng.normal((d_in, rank)) * (2.0 / math.sqrt(rank * d_in)))
            store.add(f"{layer}.B", np.zeros((rank, d_out)))
        self.store = store

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def param_count(self) -> int:
        return sum(self.rank * (d_in + d_out) for d_in, d_out in self.layer_dims.values())

    def storage_bytes(self) -> int:
        return self.param_count() * 8

    def delta_values(self, layer: str) -> np.ndarray:
        a = self.store[f"{layer}.A"].values
        b = self.store[f"{layer}.B"].values
        return self.scale * (a @ b)

    def fingerprint(self) -> str:
        return checkpoint.fingerprint(self.store.clone_values())

    def save(self, path) -> None:
        checkpoint.save_arrays(path, self.store.clone_values())

    def load(self, path) -> None:
        self.store.load_values(checkpoint.load_arrays(path))


class AdaptedGenerator:
    """Read-only view of a base generator with one adapter applied.

    Shares the base model's schedule, condition table and biases; only the
    three weight matrices differ.  No base arrays are copied or mutated.
    """

    def __init__(self, base: GeneratorModel, adapter: LoraAdapter):
        for layer, (d_in, d_out) in adapter.layer_dims.items():
            if base.store[layer].shape != (d_in, d_out):
                raise ValueError(f"adapter/base dimension mismatch on layer {layer!r}: "
                                 f"{(d_in, d_out)} vs {base.store[layer].shape}")
        self.base = base
        self.adapter = adapter

    # mirror the sampling/training surface of GeneratorModel
    @property
    def schedule(self):
        return self.base.schedule

    @property
    def pixels(self):
        return self.base.pixels

    @property
    def time_table(self):
        return self.base.time_table

    @property
    def template(self):
        return self.base.template

    def class_row(self, class_name):
        return self.base.class_row(class_name)

    def cond_values(self) -> np.ndarray:
        return self.base.cond_values()

    def sampling_weights(self):
        s = self.base.store
        w = {layer: s[layer].values + self.adapter.delta_values(layer)
             for layer in TARGET_LAYERS}
        return (w["w1"], s["b1"].values, w["w2"], s["b2"].values, w["w3"], s["b3"].values)

    def predict_noise_t(self, x_t: Tensor, t_ids: np.ndarray, cond_ids: np.ndarray,
                        train_cond: bool = False) -> Tensor:
        """Autodiff forward; gradients flow only into the adapter factors."""
        s = self.base.store
        a = self.adapter.store
        scale = self.adapter.scale
        weff = {layer: Tensor(s[layer].values) +
                scale * matmul(a[f"{layer}.A"], a[f"{layer}.B"])
                for layer in TARGET_LAYERS}
        t_ids = np.asarray(t_ids, dtype=np.int64)
        temb = Tensor(self.time_table[t_ids])
        cond = Tensor(self.base.cond_values()[np.asarray(cond_ids, dtype=np.int64)])
        inp = concat([x_t, temb, cond], axis=1)
        h = tanh(matmul(inp, weff["w1"]) + Tensor(s["b1"].values))
        h = tanh(matmul(h, weff["w2"]) + Tensor(s["b2"].values))
        x0_hat = matmul(h, weff["w3"]) + Tensor(s["b3"].values)
        abar = self.schedule.alpha_bar[t_ids][:, None]
        return (x_t - Tensor(np.sqrt(abar)) * x0_hat) * Tensor(1.0 / np.sqrt(1.0 - abar))


def apply_adapter(base: GeneratorModel, adapter: LoraAdapter) -> AdaptedGenerator:
    return AdaptedGenerator(base, adapter)


class AdapterRegistry:
    """Ordered (adapter, class set) pairs; class sets are pairwise disjoint."""

    def __init__(self):
        self.entries: list[tuple[LoraAdapter, tuple]] = []

    def register(self, adapter: LoraAdapter, classes) -> None:
        new = tuple(classes)
        if not new:
            raise ValueError("register: empty class set")
        covered = self.covered_classes()
        overlap = sorted(set(new) & covered)
        if overlap:
            raise ValueError(f"register: classes already covered by an adapter: {overlap}")
        self.entries.append((adapter, new))

    def covered_classes(self) -> set:
        out: set = set()
        for _, classes in self.entries:
            out.update(classes)
        return out

    def lookup(self, class_name: str) -> LoraAdapter | None:
        for adapter, classes in self.entries:
            if class_name in classes:
                return adapter
        return None

    def __len__(self):
        return len(self.entries)


def register_adapter(registry: AdapterRegistry, adapter: LoraAdapter, classes) -> AdapterRegistry:
    registry.register(adapter, classes)
    return registry


def select_generator(registry: AdapterRegistry, base: GeneratorModel, class_name: str):
    """The class's task adapter view when registered, else the base model."""
    adapter = registry.lookup(class_name)
    return base if adapter is None else AdaptedGenerator(base, adapter)


def finetune_adapter(base: GeneratorModel, images01: np.ndarray, class_ids: np.ndarray,
                     rank: int, epochs: int, rng: RngStream,
                     lr: float = 1e-4, betas=(0.9, 0.999), weight_decay: float = 1e-2,
                     alpha: float | None = None, cond_dropout: float = 0.0) -> LoraAdapter:
    """Train a fresh adapter on the selected exemplars; base stays frozen.

    Every epoch draws fresh diffusion timesteps and noise for the same
    small exemplar set (full-batch steps).
    """
    if not base.frozen:
        raise RuntimeError("finetune_adapter: base generator must be frozen first")
    images01 = np.atleast_2d(np.asarray(images01, dtype=np.float64))
    if images01.shape[0] == 0:
        raise ValueError("finetune_adapter: no exemplars supplied")
    adapter = LoraAdapter(base, rank=rank, alpha=alpha, init_rng=rng)
    view = AdaptedGenerator(base, adapter)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    for epoch in range(epochs):
        try:
            loss = denoise_loss(view, images01, class_ids, rng, cond_dropout)
        except NonFiniteError as exc:
            raise RuntimeError(f"adapter finetune diverged at epoch {epoch}: {exc}") from exc
        adapter.store.zero_grad()
        backward(loss)
        adamw_step(adapter.store, lr=lr, betas=betas, weight_decay=weight_decay)
    return adapter


def save_registry(registry: AdapterRegistry, out_dir, base: GeneratorModel) -> dict:
    """Persist adapters as adapter_task{i}.llcp plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"adapters": [], "class_to_adapter": {}}
    for i, (adapter, classes) in enumerate(registry.entries, start=1):
        fname = f"adapter_task{i}.llcp"
        adapter.save(out_dir / fname)
        manifest["adapters"].append({
            "file": fname,
            "rank": adapter.rank,
            "alpha": adapter.alpha,
            "classes": list(classes),
            "storage_bytes": adapter.storage_bytes(),
        })
        for c in classes:
            manifest["class_to_adapter"][c] = fname
    with open(out_dir / "registry.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_registry(out_dir, base: GeneratorModel) -> AdapterRegistry:
    out_dir = Path(out_dir)
    with open(out_dir / "registry.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    registry = AdapterRegistry()
    for entry in manifest["adapters"]:
        adapter = LoraAdapter(base, rank=entry["rank"], alpha=entry["alpha"])
        adapter.load(out_dir / entry["file"])
        registry.register(adapter, entry["classes"])
    return registry
