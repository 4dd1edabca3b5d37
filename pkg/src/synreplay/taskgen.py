"""Procedural multi-domain benchmark suite.

Classes are 16x16 grayscale pattern renders drawn from five families
(stripes, dots, checker, rings, gradient); within a family, classes differ
only in pattern parameters, which supplies the fine-grained discrimination
pressure.  Each task wraps its classes in a domain transform (intensity
remap, additive noise, rotation, occlusion) of configurable strength, which
supplies the domain shift.  Everything is a pure function of the suite seed.
"""

from dataclasses import dataclass, field

import numpy as np

from synreplay.numcore.rng import RngStream, derive_key

IMG_SIDE = 16
PIXELS = IMG_SIDE * IMG_SIDE

_YY, _XX = np.mgrid[0:IMG_SIDE, 0:IMG_SIDE].astype(np.float64)
_CENTER = (IMG_SIDE - 1) / 2.0


@dataclass(frozen=True)
class ClassSpec:
    name: str
    family: str
    params: dict

    def __post_init__(self):
        if not self.name:
            raise ValueError("class name must be nonempty")


@dataclass(frozen=True)
class DomainSpec:
    """Deterministic per-sample transform; identity() leaves renders alone."""
    gamma: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    noise_sigma: float = 0.0
    rot_quarters: tuple = (0,)
    occlusion_prob: float = 0.0
    occlusion_size: int = 4

    @staticmethod
    def identity() -> "DomainSpec":
        return DomainSpec()


@dataclass
class TaskData:
    name: str
    class_names: list
    specs: list
    domain: DomainSpec
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray


@dataclass
class TaskSequence:
    base: TaskData
    tasks: list
    seed: int
    gap: str

    @property
    def all_class_names(self) -> list:
        names = list(self.base.class_names)
        for task in self.tasks:
            names.extend(task.class_names)
        return names


def _class_grid() -> list:
    """The full deterministic class universe, family by family.

    Parameter steps are chosen so neighbouring classes stay farther apart
    in pixel space than the per-sample render jitter can move them.
    """
    specs = []
    for f, phases in ((2, (0, 1, 2, 3)), (3, (0, 1, 2, 3)), (4, (0, 2))):
        for p in phases:
            specs.append(ClassSpec(f"stripes-f{f}-p{p}", "stripes", {"freq": f, "phase": p}))
    for r in (2, 3, 4, 5):
        for q in (0, 1, 2):
            specs.append(ClassSpec(f"rings-r{r}-q{q}", "rings", {"freq": r, "phase": q}))
    for s in (3, 4, 5):
        for o in (0, 1, 2):
            specs.append(ClassSpec(f"dots-s{s}-o{o}", "dots", {"spacing": s, "offset": o}))
    for c in (2, 3, 4):
        for v in (0, 1):
            specs.append(ClassSpec(f"checker-c{c}-v{v}", "checker", {"cell": c, "invert": v}))
    for a in (0, 45, 90, 135, 180, 225):
        for g in (1, 2):
            specs.append(ClassSpec(f"grad-a{a}-g{g}", "grad", {"angle": a, "curve": g}))
    return specs


def _pattern(spec: ClassSpec, jx: float, jy: float, jphase: float, jamp: float) -> np.ndarray:
    p = spec.params
    if spec.family == "stripes":
        arg = 2.0 * np.pi * p["freq"] * (_XX + jx) / IMG_SIDE + p["phase"] * np.pi / 2.0 + jphase
        img = 0.5 + 0.5 * np.cos(arg)
    elif spec.family == "rings":
        rho = np.sqrt((_XX - _CENTER - jx) ** 2 + (_YY - _CENTER - jy) ** 2)
        img = 0.5 + 0.5 * np.cos(2.0 * np.pi * p["freq"] * rho / IMG_SIDE + p["phase"] * 2.0 * np.pi / 3.0 + jphase)
    elif spec.family == "dots":
        s = p["spacing"]
        cx = 0.5 + 0.5 * np.cos(2.0 * np.pi * (_XX + p["offset"] + jx) / s)
        cy = 0.5 + 0.5 * np.cos(2.0 * np.pi * (_YY + p["offset"] + jy) / s)
        img = (cx * cy) ** 2
    elif spec.family == "checker":
        # Smooth square wave: hard floor-quantized cells would snap
        # sub-pixel jitter into whole-pixel shifts.
        c = p["cell"]
        wave = np.sin(np.pi * (_XX + 0.5 + jx) / c) * np.sin(np.pi * (_YY + 0.5 + jy) / c)
        img = 0.5 + 0.5 * np.tanh(2.5 * wave)
        if p["invert"]:
            img = 1.0 - img
    elif spec.family == "grad":
        theta = np.deg2rad(p["angle"])
        t = ((_XX + jx) * np.cos(theta) + (_YY + jy) * np.sin(theta))
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = t ** p["curve"]
    else:
        raise ValueError(f"unknown pattern family {spec.family!r}")
    img = 0.5 + jamp * (img - 0.5)
    return np.clip(img, 0.0, 1.0)


def render_canonical(spec: ClassSpec) -> np.ndarray:
    """Jitter-free render, no domain transform; used as a class prototype."""
    return _pattern(spec, 0.0, 0.0, 0.0, 1.0).reshape(-1)


def render_sample(spec: ClassSpec, domain: DomainSpec, seed: int,
                  wide_appearance: bool = False) -> np.ndarray:
    """One deterministic sample: jittered pattern, then the domain transform.

    ``wide_appearance`` smears both appearance (contrast/brightness) and
    the fine pattern parameters (position/phase); it is used only for the
    generator's pretraining corpus, which therefore renders plausible
    family images whose discriminative details are loose - the gap that
    exemplar-finetuned adapters close.  Labeled suite data keeps jitter
    narrow so classes stay crisp.

    Returns a flat [0,1] float64 array of 256 pixels.
    """
    rng = RngStream(seed)
    if wide_appearance:
        jx = 3.0 * (rng.uniform() - 0.5)
        jy = 3.0 * (rng.uniform() - 0.5)
        jphase = 2.4 * (rng.uniform() - 0.5)
        jamp = 0.55 + 0.5 * rng.uniform()
        jbright = 0.3 * (rng.uniform() - 0.5)
    else:
        jx = 0.6 * (rng.uniform() - 0.5)
        jy = 0.6 * (rng.uniform() - 0.5)
        jphase = 0.25 * (rng.uniform() - 0.5)
        jamp = 1.0 + 0.16 * (rng.uniform() - 0.5)
        jbright = 0.0
    img = _pattern(spec, jx, jy, jphase, jamp)
    img = np.clip(img + jbright, 0.0, 1.0)

    k = domain.rot_quarters[rng.randint(len(domain.rot_quarters))]
    if k % 4:
        img = np.rot90(img, k % 4)
    img = domain.lo + (domain.hi - domain.lo) * np.clip(img, 0.0, 1.0) ** domain.gamma
    if domain.noise_sigma > 0.0:
        img = img + domain.noise_sigma * rng.normal(img.shape)
    if domain.occlusion_prob > 0.0 and rng.uniform() < domain.occlusion_prob:
        sz = domain.occlusion_size
        y0 = rng.randint(IMG_SIDE - sz)
        x0 = rng.randint(IMG_SIDE - sz)
        img = img.copy()
        img[y0:y0 + sz, x0:x0 + sz] = 0.0
    return np.clip(img, 0.0, 1.0).reshape(-1)


def _domain_for(gap: str, task_index: int) -> DomainSpec:
    i = task_index  # 1-based
    if gap == "mild":
        return DomainSpec(gamma=1.1 if i % 2 else 0.9, noise_sigma=0.03)
    if gap == "hard":
        # Moderate intensity remaps plus growing noise and occlusion: hard
        # enough to drive forgetting in the classifier, while the dominant
        # generator-side gap stays the smeared fine parameters that the
        # task adapters pin down from real exemplars.
        gammas = (1.3, 0.75, 1.5, 0.65, 1.8)
        los = (0.05, 0.00, 0.10, 0.05, 0.10)
        his = (1.00, 0.90, 0.95, 0.85, 0.90)
        j = (i - 1) % 5
        return DomainSpec(gamma=gammas[j], lo=los[j], hi=his[j],
                          noise_sigma=min(0.04 + 0.015 * i, 0.12),
                          rot_quarters=(0,),
                          occlusion_prob=min(0.04 + 0.03 * i, 0.22),
                          occlusion_size=4)
    raise ValueError(f"unknown gap profile {gap!r}; expected mild or hard")


def _materialize(name: str, specs: list, domain: DomainSpec, seed: int,
                 n_train: int, n_test: int, wide_train: bool = False) -> TaskData:
    train_x, train_y, test_x, test_y = [], [], [], []
    for label, spec in enumerate(specs):
        for split, count, xs, ys in (("train", n_train, train_x, train_y),
                                     ("test", n_test, test_x, test_y)):
            for idx in range(count):
                sample_seed = derive_key(seed, "sample", spec.name, split, idx)
                xs.append(render_sample(spec, domain, sample_seed,
                                        wide_appearance=wide_train and split == "train"))
                ys.append(label)
    return TaskData(name=name, class_names=[s.name for s in specs], specs=list(specs),
                    domain=domain,
                    train_images=np.asarray(train_x), train_labels=np.asarray(train_y),
                    test_images=np.asarray(test_x), test_labels=np.asarray(test_y))


def make_generator_pool(seq: "TaskSequence", per_class: int):
    """Identity-domain renders of every suite class, for generator pretraining.

    This is the desk analog of the generator's broad pretraining corpus: it
    can render any class, but only in the pretraining appearance domain -
    task-specific domains stay unseen until an adapter learns them.
    """
    images, class_ids = [], []
    idx = 0
    for data in [seq.base] + list(seq.tasks):
        for spec in data.specs:
            for j in range(per_class):
                sample_seed = derive_key(seq.seed, "gen-pool", spec.name, j)
                images.append(render_sample(spec, DomainSpec.identity(), sample_seed,
                                            wide_appearance=True))
                class_ids.append(idx)
            idx += 1
    return np.asarray(images), np.asarray(class_ids, dtype=np.int64)


def make_suite(seed: int, n_tasks: int = 5, classes_per_task: int = 8,
               train_per_class: int = 100, test_per_class: int = 50,
               gap: str = "hard", base_classes: int = 8) -> TaskSequence:
    """Build the base pool plus ``n_tasks`` domain-shifted tasks.

    Train/test splits are disjoint by construction (split-keyed sample
    seeds); class names are globally unique because every class spec is
    used at most once.
    """
    if train_per_class < 2 or test_per_class < 1:
        raise ValueError("per-class sizes too small")
    grid = _class_grid()
    needed = base_classes + n_tasks * classes_per_task
    if needed > len(grid):
        raise ValueError(f"parameter ranges exhausted: need {needed} classes, "
                         f"grid supplies {len(grid)}")

    by_family: dict[str, list] = {}
    for spec in grid:
        by_family.setdefault(spec.family, []).append(spec)
    families = list(by_family)
    # Round-robin over families so both the base pool and every task see
    # a spread of pattern types.
    order = []
    cursors = {f: 0 for f in families}
    while len(order) < len(grid):
        for f in families:
            if cursors[f] < len(by_family[f]):
                order.append(by_family[f][cursors[f]])
                cursors[f] += 1

    base_specs = order[:base_classes]
    # Wide-appearance training renders give the pretrained encoders an
    # intensity-robust prior, so zero-shot transfer survives the task
    # domains; test renders stay narrow like everything else.
    base = _materialize("base", base_specs, DomainSpec.identity(), seed,
                        train_per_class, test_per_class, wide_train=True)
    tasks = []
    for i in range(1, n_tasks + 1):
        lo = base_classes + (i - 1) * classes_per_task
        specs = order[lo:lo + classes_per_task]
        tasks.append(_materialize(f"task{i}", specs, _domain_for(gap, i), seed,
                                  train_per_class, test_per_class))
    return TaskSequence(base=base, tasks=tasks, seed=seed, gap=gap)
