"""Toy dual-encoder vision-language model.

An image MLP and a prompt-token encoder share an embedding space; class
probabilities are a temperature-scaled softmax over cosine similarities
between the image embedding and each class prompt's text embedding.
Embeddings are not normalized inside the encoders - cosines are computed
at the use sites.
"""

import math
from dataclasses import dataclass

import numpy as np

from synreplay.numcore import (ParamStore, Tensor, adamw_step, backward,
                               concat, div, exp, gather_labels, gather_rows,
                               log_softmax, matmul, neg, no_grad, reshape,
                               softmax, sqrt, square, tanh, tmean, transpose,
                               tsum)
from synreplay.numcore import checkpoint
from synreplay.numcore.rng import derive
from synreplay.numcore.tensor import ShapeError

LOG_TAU_MIN = math.log(1e-3)
LOG_TAU_MAX = math.log(100.0)


@dataclass(frozen=True)
class PromptTemplate:
    """Single-slot prompt template; tokenization is deterministic."""
    template: str = "a photo of a {c}"

    def fill(self, class_name: str) -> str:
        return self.template.format(c=class_name)


def tokenize_text(text: str) -> list:
    """Lowercase, split hyphens apart, then whitespace-split.

    Splitting hyphens lets structured class names like ``stripes-f3-p0``
    share their family token across classes, which is what gives the
    pretrained model above-chance zero-shot transfer to unseen classes.
    """
    return text.lower().replace("-", " ").split()


@dataclass(frozen=True)
class OptSettings:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-2
    freeze_tau: bool = False


@dataclass
class LabeledBatch:
    images: np.ndarray  # [batch, pixels]
    labels: np.ndarray  # int indices into the active class list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ShapeError(f"batch: {len(self.images)} images vs {len(self.labels)} labels")


class DualEncoder:
    """Image MLP + prompt-token encoder + learnable temperature.

    The vocabulary grows on demand: an unseen token gets the next free
    embedding row, initialized from a stream keyed by the token string so
    the embedding does not depend on when the token was first seen.
    """

    def __init__(self, pixels: int = 256, embed_dim: int = 32, hidden: int = 64,
                 token_dim: int = 32, vocab_cap: int = 256, tau_init: float = 0.07,
                 template: PromptTemplate = PromptTemplate(), init_seed: int = 0):
        self.pixels = pixels
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.token_dim = token_dim
        self.vocab_cap = vocab_cap
        self.template = template
        self.init_seed = init_seed
        self.vocab: dict[str, int] = {}
        self.frozen = False

        store = ParamStore()

        def gaussian(name, shape, scale):
            rng = derive(init_seed, "vlm-init", name)
            return store.add(name, rng.normal(shape) * scale)

        gaussian("img.w1", (pixels, hidden), 1.0 / math.sqrt(pixels))
        store.add("img.b1", np.zeros(hidden))
        gaussian("img.w2", (hidden, hidden), 1.0 / math.sqrt(hidden))
        store.add("img.b2", np.zeros(hidden))
        gaussian("img.w3", (hidden, embed_dim), 1.0 / math.sqrt(hidden))
        store.add("img.b3", np.zeros(embed_dim))
        store.add("txt.emb", np.zeros((vocab_cap, token_dim)))
        gaussian("txt.w1", (token_dim, hidden), 1.0 / math.sqrt(token_dim))
        store.add("txt.b1", np.zeros(hidden))
        gaussian("txt.w2", (hidden, embed_dim), 1.0 / math.sqrt(hidden))
        store.add("txt.b2", np.zeros(embed_dim))
        store.add("log_tau", np.asarray(math.log(tau_init)))
        self.store = store

    @property
    def tau(self) -> float:
        return math.exp(float(self.store["log_tau"].values.reshape(-1)[0]))

    def token_ids(self, text: str) -> np.ndarray:
        """Tokenize, assigning fresh embedding rows to unseen tokens."""
        ids = []
        for tok in tokenize_text(text):
            if tok not in self.vocab:
                if self.frozen:
                    raise RuntimeError(f"frozen model met unknown token {tok!r}")
                if len(self.vocab) >= self.vocab_cap:
                    raise RuntimeError(f"vocabulary capacity {self.vocab_cap} exhausted")
                row = len(self.vocab)
                self.vocab[tok] = row
                init = derive(self.init_seed, "token", tok).normal((self.token_dim,))
                self.store["txt.emb"].values[row] = init / math.sqrt(self.token_dim)
            ids.append(self.vocab[tok])
        return np.asarray(ids, dtype=np.int64)

    def prompt_ids(self, class_name: str) -> np.ndarray:
        return self.token_ids(self.template.fill(class_name))

    def clone(self, frozen: bool = True) -> "DualEncoder":
        other = DualEncoder.__new__(DualEncoder)
        other.__dict__.update({k: v for k, v in self.__dict__.items() if k != "store"})
        other.vocab = dict(self.vocab)
        store = ParamStore()
        for name, t in self.store.params.items():
            store.add(name, t.values.copy())
        other.store = store
        other.frozen = frozen
        return other

    def fingerprint(self) -> str:
        return checkpoint.fingerprint(self.store.clone_values())

    def save(self, path) -> None:
        checkpoint.save_arrays(path, self.store.clone_values())
        with open(str(path) + ".vocab", "w", encoding="utf-8") as fh:
            for tok, _ in sorted(self.vocab.items(), key=lambda kv: kv[1]):
                fh.write(tok + "\n")

    def load(self, path) -> None:
        self.store.load_values(checkpoint.load_arrays(path))
        with open(str(path) + ".vocab", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        self.vocab = {tok: i for i, tok in enumerate(tokens)}


def encode_image(model: DualEncoder, images) -> Tensor:
    """Batch of flattened images -> un-normalized embeddings [batch, d_e]."""
    x = images if isinstance(images, Tensor) else Tensor(np.atleast_2d(np.asarray(images, dtype=np.float64)))
    if x.ndim != 2 or x.shape[1] != model.pixels:
        raise ShapeError(f"encode_image: expected [batch, {model.pixels}], got {x.shape}")
    s = model.store
    h = tanh(matmul(x, s["img.w1"]) + s["img.b1"])
    h = tanh(matmul(h, s["img.w2"]) + s["img.b2"])
    return matmul(h, s["img.w3"]) + s["img.b3"]


def encode_token_batch(model: DualEncoder, id_seqs: list) -> Tensor:
    """Encode token-id sequences -> [n, d_e]; mean-pooled token embeddings
    through one hidden layer."""
    if not id_seqs:
        raise ShapeError("encode_token_batch: empty prompt list")
    s = model.store
    by_len: dict[int, list] = {}
    for pos, ids in enumerate(id_seqs):
        by_len.setdefault(len(ids), []).append(pos)
    pooled_parts, order = [], []
    for length, positions in sorted(by_len.items()):
        if length == 0:
            raise ShapeError("encode_token_batch: empty token sequence")
        flat = np.concatenate([np.asarray(id_seqs[p], dtype=np.int64) for p in positions])
        rows = gather_rows(s["txt.emb"], flat)
        pooled = tmean(reshape(rows, (len(positions), length, model.token_dim)), axis=1)
        pooled_parts.append(pooled)
        order.extend(positions)
    pooled = pooled_parts[0] if len(pooled_parts) == 1 else concat(pooled_parts, axis=0)
    if order != sorted(order):
        # restore caller order after length grouping
        perm = np.argsort(np.asarray(order))
        pooled = gather_rows_like(pooled, perm)
    h = tanh(matmul(pooled, s["txt.w1"]) + s["txt.b1"])
    return matmul(h, s["txt.w2"]) + s["txt.b2"]


def gather_rows_like(t: Tensor, perm: np.ndarray) -> Tensor:
    """Row permutation with gradient support (gather on a 2-d tensor)."""
    from synreplay.numcore.tensor import _make
    idx = np.asarray(perm, dtype=np.int64)
    tshape = t.shape

    def bwd(g):
        gt = np.zeros(tshape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make("permute_rows", t.values[idx].copy(), (t,), bwd)


def class_prompt_embeddings(model: DualEncoder, class_names: list) -> Tensor:
    if not class_names:
        raise ShapeError("class_prompt_embeddings: need at least one class")
    return encode_token_batch(model, [model.prompt_ids(c) for c in class_names])


def _row_norms(t: Tensor, what: str) -> Tensor:
    n = sqrt(tsum(square(t), axis=1, keepdims=True))
    if np.any(n.values == 0.0):
        raise ValueError(f"{what}: zero-norm embedding, cosine undefined")
    return n


def cosine_matrix(z: Tensor, w: Tensor) -> Tensor:
    """Pairwise cosine similarities [batch, n] of row vectors."""
    zn = _row_norms(z, "cosine_matrix(image)")
    wn = _row_norms(w, "cosine_matrix(text)")
    return div(matmul(z, transpose(w)), matmul(zn, transpose(wn)))


def class_logits(model: DualEncoder, images, class_names: list) -> Tensor:
    z = encode_image(model, images)
    w = class_prompt_embeddings(model, class_names)
    return div(cosine_matrix(z, w), exp(model.store["log_tau"]))


def class_probabilities(model: DualEncoder, images, class_names: list) -> Tensor:
    """Rows are p(class | image) per the temperature-scaled cosine softmax."""
    return softmax(class_logits(model, images, class_names))


def confidence(model: DualEncoder, sample: np.ndarray, prompt_ids: np.ndarray) -> float:
    """Cosine similarity between one image embedding and one prompt embedding."""
    with no_grad():
        z = encode_image(model, np.atleast_2d(sample))
        w = encode_token_batch(model, [np.asarray(prompt_ids, dtype=np.int64)])
        return float(cosine_matrix(z, w).values[0, 0])


def confidences(model: DualEncoder, images: np.ndarray, prompt_ids: np.ndarray) -> np.ndarray:
    """Confidence of each image against a single shared prompt."""
    with no_grad():
        z = encode_image(model, images)
        w = encode_token_batch(model, [np.asarray(prompt_ids, dtype=np.int64)])
        return cosine_matrix(z, w).values[:, 0].copy()


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood from logits (stable log-softmax route)."""
    return neg(tmean(gather_labels(log_softmax(logits), labels)))


def apply_update(model: DualEncoder, loss: Tensor, opt: OptSettings) -> float:
    """Backward + AdamW + temperature clamp; returns the scalar loss value."""
    if model.frozen:
        raise RuntimeError("apply_update: model is frozen")
    value = loss.item()
    model.store.zero_grad()
    backward(loss)
    skip = ("log_tau",) if opt.freeze_tau else ()
    adamw_step(model.store, lr=opt.lr, betas=opt.betas,
               weight_decay=opt.weight_decay, skip=skip)
    lt = model.store["log_tau"].values
    lt[...] = np.clip(lt, LOG_TAU_MIN, LOG_TAU_MAX)
    return value


def finetune_step(model: DualEncoder, batch: LabeledBatch, class_names: list,
                  extra_loss: Tensor | None = None,
                  opt: OptSettings = OptSettings()) -> float:
    """One cross-entropy step over the batch, plus an optional extra term."""
    if len(batch.images) == 0:
        raise ValueError("finetune_step: empty batch")
    if batch.labels.size and batch.labels.max() >= len(class_names):
        raise ShapeError("finetune_step: label outside the active class list")
    loss = cross_entropy(class_logits(model, batch.images, class_names), batch.labels)
    if extra_loss is not None:
        loss = loss + extra_loss
    return apply_update(model, loss, opt)


def evaluate_accuracy(model: DualEncoder, images: np.ndarray, labels: np.ndarray,
                      class_names: list) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest index."""
    if len(images) == 0:
        raise ValueError("evaluate_accuracy: empty dataset")
    with no_grad():
        probs = class_probabilities(model, images, class_names).values
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def pretrain(model: DualEncoder, images: np.ndarray, labels: np.ndarray,
             class_names: list, steps: int, batch_size: int, opt: OptSettings,
             rng) -> list:
    """Plain cross-entropy training on the base pool; returns per-step losses."""
    losses = []
    n = len(images)
    for _ in range(steps):
        idx = rng.integers(n, batch_size)
        batch = LabeledBatch(images[idx], labels[idx])
        losses.append(finetune_step(model, batch, class_names, opt=opt))
    return losses
