"""Confidence-based sample selection.

Two call sites: filtering generated replay candidates down to the best k
per class, and picking the per-class exemplars (most prototypical plus
edge cases) that the adapter finetunes on.  Scorers must be frozen model
snapshots; ties always break toward the lower index so selection is
reproducible everywhere.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from synreplay import pgmio, vlm
from synreplay.generator import GeneratedCandidate
from synreplay.numcore.rng import RngStream


@dataclass(frozen=True)
class ScoredItem:
    payload_id: int
    class_name: str
    confidence: float

    def __post_init__(self):
        if not np.isfinite(self.confidence):
            raise ValueError(f"non-finite confidence for item {self.payload_id}")


@dataclass
class ReplayItem:
    sample: np.ndarray
    prompt: str
    confidence: float
    class_name: str
    provenance: str  # "base" or "adapter_<i>"


@dataclass
class ReplaySet:
    """Selected replay samples, at most k per class."""
    k: int
    by_class: dict = field(default_factory=dict)

    def set_class(self, class_name: str, items: list) -> None:
        if len(items) > self.k:
            raise ValueError(f"{class_name}: {len(items)} replay items exceeds k={self.k}")
        self.by_class[class_name] = list(items)

    def items(self) -> list:
        out = []
        for class_name in self.by_class:
            out.extend(self.by_class[class_name])
        return out

    def __len__(self):
        return sum(len(v) for v in self.by_class.values())


def _require_frozen(scorer) -> None:
    if not getattr(scorer, "frozen", False):
        raise ValueError("scorer must be a frozen model snapshot")


def score_candidates(candidates: list, scorer) -> list:
    """Fill (and cache) each candidate's confidence under the frozen scorer."""
    _require_frozen(scorer)
    out = []
    for cand in candidates:
        if cand.confidence is None:
            ids = scorer.token_ids(cand.prompt)
            cand.confidence = vlm.confidence(scorer, cand.sample, ids)
        out.append(cand.confidence)
    return out


def sample_topk(candidates: list, k: int, scorer) -> list:
    """The k highest-confidence candidates, stably tie-broken by index."""
    if not candidates:
        raise ValueError("sample_topk: no candidates")
    if k < 1:
        raise ValueError(f"sample_topk: k={k} must be >= 1")
    confs = score_candidates(candidates, scorer)
    order = sorted(range(len(candidates)), key=lambda i: (-confs[i], i))
    return [candidates[i] for i in order[:k]]


@dataclass
class ExemplarSelection:
    images: np.ndarray
    labels: np.ndarray
    per_class: dict  # class name -> {"top": [...], "bottom": [...], "confidence": [...]}


def select_lora_data(scorer, images: np.ndarray, labels: np.ndarray,
                     class_names: list, l: int) -> ExemplarSelection:
    """Per class, the l/2 highest- plus l/2 lowest-confidence examples.

    Halves are disjoint; the bottom half is drawn from the remaining
    examples after the top half is taken, ties toward lower index.
    """
    _require_frozen(scorer)
    if l < 2 or l % 2:
        raise ValueError(f"select_lora_data: l={l} must be an even integer >= 2")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    half = l // 2
    sel_idx, per_class = [], {}
    for ci, name in enumerate(class_names):
        idx = np.flatnonzero(labels == ci)
        if len(idx) < l:
            raise ValueError(f"select_lora_data: class {name!r} has {len(idx)} < l={l} examples")
        confs = vlm.confidences(scorer, images[idx], scorer.prompt_ids(name))
        order_desc = sorted(range(len(idx)), key=lambda i: (-confs[i], i))
        top = order_desc[:half]
        rest = sorted(set(range(len(idx))) - set(top))
        bottom = sorted(rest, key=lambda i: (confs[i], i))[:half]
        chosen = [int(idx[i]) for i in top + bottom]
        sel_idx.extend(chosen)
        per_class[name] = {"top": [int(idx[i]) for i in top],
                           "bottom": [int(idx[i]) for i in bottom],
                           "confidence": confs.tolist()}
    sel_idx = np.asarray(sel_idx, dtype=np.int64)
    return ExemplarSelection(images=images[sel_idx], labels=labels[sel_idx], per_class=per_class)


POLICIES = ("top", "bottom", "middle", "random", "top_and_bottom")


def select_policy(confidences, budget: int, policy: str,
                  rng: RngStream | None = None) -> list:
    """Pick ``budget`` item ids under one of the sweep policies.

    ``middle`` takes the budget-sized window centered on the median rank of
    the descending confidence order.
    """
    items = list(confidences)
    confs = [float(it.confidence) if isinstance(it, ScoredItem) else float(it) for it in items]
    n = len(confs)
    if budget > n:
        raise ValueError(f"select_policy: budget {budget} exceeds {n} items")
    if policy == "top":
        order = sorted(range(n), key=lambda i: (-confs[i], i))
        return order[:budget]
    if policy == "bottom":
        order = sorted(range(n), key=lambda i: (confs[i], i))
        return order[:budget]
    if policy == "middle":
        order = sorted(range(n), key=lambda i: (-confs[i], i))
        start = (n - budget) // 2
        return order[start:start + budget]
    if policy == "random":
        if rng is None:
            raise ValueError("select_policy: random policy needs an rng stream")
        return [int(i) for i in rng.choice(n, budget)]
    if policy == "top_and_bottom":
        if budget % 2:
            raise ValueError("select_policy: top_and_bottom needs an even budget")
        half = budget // 2
        order = sorted(range(n), key=lambda i: (-confs[i], i))
        top = order[:half]
        rest = sorted(set(range(n)) - set(top))
        bottom = sorted(rest, key=lambda i: (confs[i], i))[:half]
        return top + bottom
    raise ValueError(f"select_policy: unknown policy {policy!r}; known: {POLICIES}")


def save_replay_set(replay: ReplaySet, out_dir) -> dict:
    """Persist one task's replay set as PGM files plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for class_name in replay.by_class:
        for j, item in enumerate(replay.by_class[class_name]):
            fname = f"{class_name}_{j}.pgm"
            pgmio.write_pgm(out_dir / fname, item.sample)
            manifest.append({"file": fname, "class": class_name,
                             "confidence": item.confidence, "prompt": item.prompt,
                             "generator": item.provenance})
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return {"items": manifest}
