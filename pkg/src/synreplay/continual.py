"""Task-sequential training: the full adapter-replay loop and its baselines.

One generic loop drives every method; a method only toggles which pieces
run (replay source, candidate filtering, adapter finetuning, loss terms,
anchor penalty).  ``continual_finetune`` is literally the loop with all of
them off, which makes the replay-disabled equivalence testable bit for bit.

Per task i the full loop does, in order: (1) sample replay candidates for
every pool class from that class's generator (task adapter if registered,
else the frozen base) and keep the top-k under the frozen previous model;
(2) finetune the VLM on task data mixed with replay under the composite
objective; (3) pick per-class exemplars with the freshly frozen model and
finetune a new low-rank adapter on them; (4) grow the class pool.  The
accuracy matrix gains one full row after every task.
"""

from dataclasses import dataclass

import numpy as np

from synreplay import distill, selection, vlm
from synreplay.config import ExperimentConfig
from synreplay.distill import ImportanceMap, LossWeights, TeacherSnapshot
from synreplay.generator import GeneratorModel, NoiseSchedule, sample_cfg, train_generator
from synreplay.lora import AdapterRegistry, finetune_adapter, select_generator
from synreplay.numcore.rng import derive, derive_key
from synreplay.selection import ReplayItem, ReplaySet
from synreplay.taskgen import PIXELS, TaskSequence, make_generator_pool, make_suite
from synreplay.vlm import DualEncoder, OptSettings, PromptTemplate


@dataclass
class MetricsReport:
    transfer: dict
    avg: dict
    last: dict
    transfer_mean: float
    avg_mean: float
    last_mean: float
    base_row0: float
    base_final: float
    base_avg: float

    def to_dict(self) -> dict:
        return {
            "transfer": self.transfer, "avg": self.avg, "last": self.last,
            "transfer_mean": self.transfer_mean, "avg_mean": self.avg_mean,
            "last_mean": self.last_mean, "base_pool": {
                "row0": self.base_row0, "final": self.base_final, "avg": self.base_avg,
            },
        }


@dataclass
class RunResult:
    method: str
    seed: int
    model: DualEncoder
    generator: GeneratorModel
    matrix: np.ndarray
    report: MetricsReport
    registry: AdapterRegistry
    loss_log: list
    replay_sets: list          # one ReplaySet (or None) per task
    storage: dict
    debug: dict


@dataclass(frozen=True)
class MethodPlan:
    train: bool
    weights: LossWeights
    replay: str                # "none" | "synthetic" | "real"
    use_adapters: bool
    use_filter: bool
    l2_lambda: float

    @property
    def replay_active(self) -> bool:
        return self.replay != "none" and (self.weights.use_cd or self.weights.use_ita)


def _plan(cfg: ExperimentConfig) -> MethodPlan:
    method = cfg["run.method"]
    weights = LossWeights(
        lambda_cd=cfg["loss.lambda_cd"], lambda_ita=cfg["loss.lambda_ita"],
        lambda_awc=cfg["loss.lambda_awc"], use_cd=cfg["loss.use_cd"],
        use_ita=cfg["loss.use_ita"], use_awc=cfg["loss.use_awc"])
    if method == "adapter_replay":
        return MethodPlan(True, weights, "synthetic", True, True, 0.0)
    if method == "frozen_generator_replay":
        return MethodPlan(True, weights, "synthetic", False, False, 0.0)
    if method == "real_replay":
        return MethodPlan(True, weights, "real", False, False, 0.0)
    if method == "continual_finetune":
        return MethodPlan(True, LossWeights.disabled(), "none", False, False, 0.0)
    if method == "zero_shot":
        return MethodPlan(False, LossWeights.disabled(), "none", False, False, 0.0)
    if method == "l2_anchor":
        return MethodPlan(True, LossWeights.disabled(), "none", False, False,
                          cfg["run.l2_lambda"])
    raise ValueError(f"unknown method {method!r}")


def build_suite(cfg: ExperimentConfig) -> TaskSequence:
    return make_suite(seed=cfg["suite.seed"], n_tasks=cfg["suite.n_tasks"],
                      classes_per_task=cfg["suite.classes_per_task"],
                      train_per_class=cfg["suite.train_per_class"],
                      test_per_class=cfg["suite.test_per_class"],
                      gap=cfg["suite.gap"], base_classes=cfg["suite.base_classes"])


def build_models(seq: TaskSequence, cfg: ExperimentConfig, seed: int):
    """Pretrain the VLM and the generator on the base pool.

    The VLM's cross-entropy pretraining creates the zero-shot prior the
    continual run must preserve; the generator is frozen afterwards and
    only ever extended through adapters.
    """
    template = PromptTemplate(cfg["vlm.template"])
    model = DualEncoder(pixels=PIXELS, embed_dim=cfg["vlm.embed_dim"],
                        hidden=cfg["vlm.hidden"], token_dim=cfg["vlm.token_dim"],
                        vocab_cap=cfg["vlm.vocab_cap"], tau_init=cfg["vlm.tau_init"],
                        template=template, init_seed=derive_key(seed, "vlm-init"))
    opt = OptSettings(lr=cfg["vlm.pretrain_lr"],
                      betas=(cfg["run.beta1"], cfg["run.beta2"]),
                      weight_decay=cfg["run.weight_decay"],
                      freeze_tau=cfg["run.freeze_tau"])
    vlm.pretrain(model, seq.base.train_images, seq.base.train_labels,
                 seq.base.class_names, steps=cfg["vlm.pretrain_steps"],
                 batch_size=cfg["vlm.pretrain_batch"], opt=opt,
                 rng=derive(seed, "vlm-pretrain"))

    schedule = NoiseSchedule(steps=cfg["gen.steps"], beta_start=cfg["gen.beta_start"],
                             beta_end=cfg["gen.beta_end"])
    gen = GeneratorModel(class_names=seq.all_class_names, pixels=PIXELS,
                         width=cfg["gen.width"], time_dim=cfg["gen.time_dim"],
                         cond_dim=cfg["gen.cond_dim"], schedule=schedule,
                         template=template, init_seed=derive_key(seed, "gen-init"))
    pool_images, pool_ids = make_generator_pool(seq, cfg["gen.pool_per_class"])
    train_generator(gen, pool_images, pool_ids,
                    epochs=cfg["gen.pretrain_epochs"], batch_size=cfg["gen.batch"],
                    rng=derive(seed, "gen-pretrain"), lr=cfg["gen.lr"],
                    betas=(cfg["run.beta1"], cfg["run.beta2"]),
                    weight_decay=cfg["run.weight_decay"],
                    cond_dropout=cfg["gen.cond_dropout"])
    return model, gen


def eval_row(model: DualEncoder, seq: TaskSequence, class_incremental: bool = False) -> np.ndarray:
    """Accuracies [base, task1..taskn] for the current model."""
    datasets = [seq.base] + list(seq.tasks)
    if not class_incremental:
        return np.array([vlm.evaluate_accuracy(model, d.test_images, d.test_labels, d.class_names)
                         for d in datasets])
    universe = seq.all_class_names
    offsets, pos = {}, 0
    for d in datasets:
        offsets[d.name] = pos
        pos += len(d.class_names)
    return np.array([vlm.evaluate_accuracy(model, d.test_images,
                                           d.test_labels + offsets[d.name], universe)
                     for d in datasets])


def compute_metrics(matrix: np.ndarray, include_row0: bool = True) -> MetricsReport:
    """Transfer/Avg/Last per task plus their means over tasks 1..n.

    Transfer_j averages accuracy on task j over the rows before task j was
    trained (row 0, the pretrained model, included by default); Avg_j
    averages the whole column; Last_j is the final row.  The base-pool
    column is reported separately.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"matrix must be square, got {matrix.shape}")
    if np.isnan(matrix).any():
        raise ValueError("matrix has unfilled rows")
    n = matrix.shape[0] - 1
    transfer, avg, last = {}, {}, {}
    for j in range(1, n + 1):
        start = 0 if include_row0 else 1
        rows = matrix[start:j, j]
        transfer[f"task{j}"] = float(rows.mean()) if rows.size else float("nan")
        avg[f"task{j}"] = float(matrix[:, j].mean())
        last[f"task{j}"] = float(matrix[n, j])
    tvals = [v for v in transfer.values() if not np.isnan(v)]
    return MetricsReport(
        transfer=transfer, avg=avg, last=last,
        transfer_mean=float(np.mean(tvals)) if tvals else float("nan"),
        avg_mean=float(np.mean(list(avg.values()))) if avg else float("nan"),
        last_mean=float(np.mean(list(last.values()))) if last else float("nan"),
        base_row0=float(matrix[0, 0]), base_final=float(matrix[n, 0]),
        base_avg=float(matrix[:, 0].mean()))


def _generate_replay(seq, pool_names, registry, gen, teacher, cfg, seed, task_index,
                     use_adapters, use_filter) -> ReplaySet:
    """Step 1: per pool class, sample candidates and keep the selected ones."""
    k = cfg["select.k"]
    m_pre = cfg["select.m_pre"] if use_filter else k
    guidance = cfg["gen.guidance"]
    policy = cfg["select.policy"]
    replay = ReplaySet(k)
    for c in pool_names:
        adapter = registry.lookup(c) if use_adapters else None
        if adapter is None:
            g, provenance = gen, "base"
        else:
            idx = next(i for i, (a, _) in enumerate(registry.entries) if a is adapter)
            g = select_generator(registry, gen, c)
            provenance = f"adapter_{idx + 1}"
        cands = [sample_cfg(g, c, guidance, derive_key(seed, "cand", task_index, c, m))
                 for m in range(m_pre)]
        if policy == "top" or not use_filter:
            chosen = selection.sample_topk(cands, min(k, len(cands)), teacher.model)
        else:
            confs = selection.score_candidates(cands, teacher.model)
            ids = selection.select_policy(confs, min(k, len(cands)), policy,
                                          rng=derive(seed, "filter-policy", task_index, c))
            chosen = [cands[j] for j in ids]
        replay.set_class(c, [ReplayItem(sample=cand.sample, prompt=cand.prompt,
                                        confidence=cand.confidence, class_name=c,
                                        provenance=provenance)
                             for cand in chosen])
    return replay


def _real_replay_set(buffer: list, teacher, per_class: int) -> ReplaySet | None:
    """Wrap the stored real exemplars as this task's replay set."""
    if not buffer:
        return None
    grouped = _group(buffer)
    replay = ReplaySet(k=max(per_class, max(len(v) for v in grouped.values())))
    for cname, items in grouped.items():
        scored = []
        for image, prompt in items:
            conf = vlm.confidence(teacher.model, image, teacher.model.token_ids(prompt))
            scored.append(ReplayItem(sample=image, prompt=prompt, confidence=conf,
                                     class_name=cname, provenance="real"))
        replay.set_class(cname, scored)
    return replay


def _group(buffer: list) -> dict:
    out: dict = {}
    for image, prompt, cname in buffer:
        out.setdefault(cname, []).append((image, prompt))
    return out


def _select_exemplars(scorer: DualEncoder, task, l: int, policy: str, rng):
    """Step 3 selection: per-class exemplars for adapter finetuning."""
    if policy == "top_and_bottom":
        return selection.select_lora_data(scorer, task.train_images, task.train_labels,
                                          task.class_names, l)
    images = np.asarray(task.train_images)
    labels = np.asarray(task.train_labels)
    sel_idx, per_class = [], {}
    for ci, name in enumerate(task.class_names):
        idx = np.flatnonzero(labels == ci)
        if len(idx) < l:
            raise ValueError(f"class {name!r} has {len(idx)} < l={l} examples")
        confs = vlm.confidences(scorer, images[idx], scorer.prompt_ids(name))
        ids = selection.select_policy(confs, l, policy, rng=rng)
        chosen = [int(idx[i]) for i in ids]
        sel_idx.extend(chosen)
        per_class[name] = {"selected": chosen, "confidence": confs.tolist()}
    sel_idx = np.asarray(sel_idx, dtype=np.int64)
    return selection.ExemplarSelection(images=images[sel_idx], labels=labels[sel_idx],
                                       per_class=per_class)


def run_method(seq: TaskSequence, cfg: ExperimentConfig, seed: int | None = None,
               pretrained: tuple | None = None) -> RunResult:
    """Run the configured method over the task sequence."""
    master = cfg["run.seed"] if seed is None else seed
    plan = _plan(cfg)
    if pretrained is None:
        pretrained = build_models(seq, cfg, master)
    base_model, gen = pretrained
    model = base_model.clone(frozen=False)

    n = len(seq.tasks)
    class_incremental = cfg["run.class_incremental"]
    matrix = np.full((n + 1, n + 1), np.nan)
    matrix[0] = eval_row(model, seq, class_incremental)
    registry = AdapterRegistry()
    loss_log: list = []
    replay_sets: list = []
    debug = {"teacher_fp": [], "scorer_fp": [], "pre_task_fp": [], "post_task_fp": [],
             "pretrained_fp": base_model.fingerprint(), "generator_fp": gen.fingerprint()}
    opt = OptSettings(lr=cfg["run.lr"], betas=(cfg["run.beta1"], cfg["run.beta2"]),
                      weight_decay=cfg["run.weight_decay"], freeze_tau=cfg["run.freeze_tau"])
    anchor0 = model.store.clone_values()
    importance = ImportanceMap(model, decay=cfg["loss.awc_decay"])
    real_buffer: list = []
    batch_size = cfg["run.batch"]
    steps = cfg["run.steps_per_task"]
    weights = plan.weights

    if not plan.train:
        for i in range(1, n + 1):
            matrix[i] = matrix[0]
        report = compute_metrics(matrix, cfg["run.include_row0_transfer"])
        return RunResult(cfg["run.method"], master, model, gen, matrix, report, registry,
                         loss_log, [], _storage(real_buffer, registry), debug)

    pool_names = list(seq.base.class_names)
    for i, task in enumerate(seq.tasks, start=1):
        teacher = TeacherSnapshot(model)
        debug["pre_task_fp"].append(model.fingerprint())
        debug["teacher_fp"].append(teacher.fingerprint)

        replay_set = None
        if plan.replay_active:
            try:
                if plan.replay == "synthetic":
                    replay_set = _generate_replay(seq, pool_names, registry, gen, teacher,
                                                  cfg, master, i, plan.use_adapters,
                                                  plan.use_filter)
                else:
                    replay_set = _real_replay_set(real_buffer, teacher, cfg["run.real_replay_per_class"])
            except Exception as exc:
                raise RuntimeError(f"task {i} replay generation failed: {exc}") from exc
        replay_sets.append(replay_set)
        replay_items = replay_set.items() if replay_set is not None else []

        importance.reset_anchor(model)
        batch_stream = derive(master, "task-batch", i)
        replay_stream = derive(master, "task-replay", i)
        n_train = len(task.train_images)
        use_replay = bool(replay_items)
        replay_n = int(round(batch_size * cfg["run.replay_fraction"])) if use_replay else 0
        task_n = batch_size - replay_n

        for step in range(steps):
            try:
                idx = batch_stream.integers(n_train, task_n)
                rb = [replay_items[j] for j in replay_stream.integers(len(replay_items), replay_n)] \
                    if use_replay else []
                if plan.l2_lambda > 0.0:
                    total, parts = distill.composite_loss(
                        model, None, task.train_images[idx], task.train_labels[idx],
                        task.class_names, [], pool_names, LossWeights.disabled(), None)
                    total = total + distill.l2_anchor_loss(model, anchor0, plan.l2_lambda)
                    parts["total"] = total.item()
                else:
                    total, parts = distill.composite_loss(
                        model, teacher, task.train_images[idx], task.train_labels[idx],
                        task.class_names, rb, pool_names, weights, importance)
                vlm.apply_update(model, total, opt)
                if weights.use_awc:
                    importance.update(model)
            except Exception as exc:
                raise RuntimeError(f"task {i} finetune step {step} failed: {exc}") from exc
            parts["task"] = i
            parts["step"] = step
            loss_log.append(parts)

        debug["post_task_fp"].append(model.fingerprint())

        if plan.use_adapters:
            try:
                scorer = TeacherSnapshot(model)
                debug["scorer_fp"].append(scorer.fingerprint)
                debug.setdefault("scorers", []).append(scorer)
                exemplars = _select_exemplars(scorer.model, task, cfg["lora.select_l"],
                                              cfg["lora.policy"], derive(master, "lora-policy", i))
                gen_ids = np.array([gen.class_row(task.class_names[y]) - 1
                                    for y in exemplars.labels], dtype=np.int64)
                alpha = None if cfg["lora.alpha"] == 0.0 else cfg["lora.alpha"]
                adapter = finetune_adapter(gen, exemplars.images, gen_ids,
                                           rank=cfg["lora.rank"], epochs=cfg["lora.epochs"],
                                           rng=derive(master, "adapter", i),
                                           lr=cfg["lora.lr"],
                                           betas=(cfg["run.beta1"], cfg["run.beta2"]),
                                           weight_decay=cfg["run.weight_decay"],
                                           alpha=alpha, cond_dropout=cfg["lora.cond_dropout"])
                registry.register(adapter, task.class_names)
            except Exception as exc:
                raise RuntimeError(f"task {i} adapter finetune failed: {exc}") from exc

        if plan.replay == "real":
            rng = derive(master, "real-buffer", i)
            b = cfg["run.real_replay_per_class"]
            for ci, cname in enumerate(task.class_names):
                idxs = np.flatnonzero(task.train_labels == ci)
                for j in rng.choice(len(idxs), min(b, len(idxs))):
                    real_buffer.append((task.train_images[idxs[j]].copy(),
                                        model.template.fill(cname), cname))

        pool_names = pool_names + list(task.class_names)
        try:
            matrix[i] = eval_row(model, seq, class_incremental)
        except Exception as exc:
            raise RuntimeError(f"task {i} evaluation failed: {exc}") from exc

    report = compute_metrics(matrix, cfg["run.include_row0_transfer"])
    return RunResult(cfg["run.method"], master, model, gen, matrix, report, registry,
                     loss_log, replay_sets, _storage(real_buffer, registry), debug)


def _storage(real_buffer: list, registry: AdapterRegistry) -> dict:
    return {
        "real_replay_bytes": len(real_buffer) * PIXELS * 8,
        "adapter_bytes": sum(a.storage_bytes() for a, _ in registry.entries),
    }


def run_baseline(seq: TaskSequence, cfg: ExperimentConfig, kind: str,
                 seed: int | None = None, pretrained: tuple | None = None) -> RunResult:
    """Run one of the reference methods over the same sequence."""
    return run_method(seq, cfg.with_overrides({"run.method": kind}), seed=seed,
                      pretrained=pretrained)


def paired_generator_confidences(gen: GeneratorModel, registry: AdapterRegistry,
                                 scorer: DualEncoder, class_names: list,
                                 per_class: int, seed: int, guidance: float):
    """Confidence of base vs adapted samples, paired by (class, draw seed).

    The same candidate seed feeds both generators so each pair differs only
    in the weights that produced it.
    """
    base_confs, adapted_confs = [], []
    for c in class_names:
        adapter = registry.lookup(c)
        if adapter is None:
            raise KeyError(f"class {c!r} has no registered adapter")
        view = select_generator(registry, gen, c)
        ids = scorer.prompt_ids(c)
        for m in range(per_class):
            cand_seed = derive_key(seed, "preview", c, m)
            cand_base = sample_cfg(gen, c, guidance, cand_seed)
            cand_adap = sample_cfg(view, c, guidance, cand_seed)
            base_confs.append(vlm.confidence(scorer, cand_base.sample, ids))
            adapted_confs.append(vlm.confidence(scorer, cand_adap.sample, ids))
    return np.asarray(base_confs), np.asarray(adapted_confs)
