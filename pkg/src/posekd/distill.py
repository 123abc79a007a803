"""Staged dual-teacher distillation: plans, schedules, and the trainer.

A :class:`DistillationPlan` lists training phases in order.  Ten canonical
paths ``a``..``j`` cover every combination of plain/distilled second teacher
and student teacher ordering; path ``j`` (mask-aware teacher bridged into the
RGB teacher, student taught by each in turn) is the headline schedule.

Two execution modes share all loss code:
  * ``phased`` (default): phases run to completion one after another, so the
    student sees the first teacher's targets only before the second's.
  * ``interleaved``: the second teacher and the student co-train batch by
    batch (one teacher update, then one student update per teacher) after
    the first teacher finishes.

Everything is deterministic given (plan, datasets, seed).  Each phase draws
from an RNG stream derived from the phase's content fingerprint rather than
from one shared sequential stream, so a cached teacher phase can be skipped
without disturbing downstream randomness.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from posekd.evaluate import EvalResult, OKSParams, evaluate_model
from posekd.losses import (
    LossOutput,
    LossWeights,
    loss_second_teacher,
    loss_student,
    mse_loss,
    mse_via_sigmoid,
)
from posekd.nn.checkpoint import load_params, save_params
from posekd.nn.layers import Conv1x1, Conv2d, ReLU
from posekd.nn.model import (
    ModelSpec,
    ParamStore,
    backward_from_cache,
    forward_batch,
    forward_with_cache,
    init_params,
    outputs_to_prob,
    param_checksum,
)
from posekd.nn.optim import AdamState, SGDState, adam_step, init_optimizer, sgd_step
from posekd.synthdata import SyntheticSample, make_st_input

Array = np.ndarray

MODEL_NAMES = ("ST", "PT", "S")

PATH_IDS = "abcdefghij"

# Per path: ordered (trainee, distillation teachers); GT is always implied.
_PATH_LAYOUT: dict[str, tuple[tuple[str, tuple[str, ...]], ...]] = {
    "a": (("S", ()),),
    "b": (("ST", ()), ("S", ("ST",))),
    "c": (("PT", ()), ("S", ("PT",))),
    "d": (("ST", ()), ("PT", ()), ("S", ("ST", "PT"))),
    "e": (("ST", ()), ("PT", ()), ("S", ("PT",)), ("S", ("ST",))),
    "f": (("ST", ()), ("PT", ()), ("S", ("ST",)), ("S", ("PT",))),
    "g": (("ST", ()), ("PT", ("ST",)), ("S", ("PT",))),
    "h": (("ST", ()), ("PT", ("ST",)), ("S", ("ST", "PT"))),
    "i": (("ST", ()), ("PT", ("ST",)), ("S", ("PT",)), ("S", ("ST",))),
    "j": (("ST", ()), ("PT", ("ST",)), ("S", ("ST",)), ("S", ("PT",))),
}


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass(frozen=True)
class Phase:
    """One stage: who trains, against which teachers, for how many epochs."""

    trainee: str
    teachers: tuple[str, ...]  # always includes "GT"; may add "ST"/"PT"
    epochs: int

    @property
    def distill_teachers(self) -> tuple[str, ...]:
        return tuple(t for t in self.teachers if t != "GT")

    def label(self) -> str:
        return f"{self.trainee}<-" + "+".join(self.teachers)


@dataclass(frozen=True)
class DistillationPlan:
    """Ordered phases plus the weights and mode they run under.

    ``student_loss`` selects the student objective: ``bce`` trains on
    binarized targets (the main method), ``mse`` regresses raw probability
    maps (the no-binarization control arm).
    """

    path_id: str
    phases: tuple[Phase, ...]
    weights: LossWeights = LossWeights()
    mode: str = "phased"
    student_loss: str = "bce"
    preloaded: tuple[str, ...] = ()

    def label(self) -> str:
        return f"path {self.path_id} ({self.mode}, {self.student_loss})"


def make_plan(
    path_id: str,
    weights: LossWeights = LossWeights(),
    teacher_epochs: int = 8,
    student_epochs: int = 8,
    mode: str = "phased",
    student_loss: str = "bce",
) -> DistillationPlan:
    """Builds the canonical plan for one of the ten paths.

    When a path trains the student in two phases the epoch budget is split
    evenly, the first phase taking the extra epoch if the budget is odd.
    """
    if path_id not in _PATH_LAYOUT:
        raise ValueError(f"unknown path {path_id!r}, expected one of {PATH_IDS!r}")
    layout = _PATH_LAYOUT[path_id]
    student_phases = sum(1 for trainee, _ in layout if trainee == "S")
    budgets = iter(
        [student_epochs]
        if student_phases == 1
        else [(student_epochs + 1) // 2, student_epochs // 2]
    )
    phases = []
    for trainee, extra in layout:
        epochs = next(budgets) if trainee == "S" else teacher_epochs
        phases.append(Phase(trainee, ("GT",) + extra, epochs))
    return DistillationPlan(
        path_id=path_id,
        phases=tuple(phases),
        weights=weights,
        mode=mode,
        student_loss=student_loss,
    )


def validate_plan(plan: DistillationPlan) -> list[str]:
    """Returns human-readable violations; an empty list means the plan is sound."""
    problems = [f"weights: {p}" for p in plan.weights.validate()]
    if plan.mode not in ("phased", "interleaved"):
        problems.append(f"unknown mode {plan.mode!r}")
    if plan.student_loss not in ("bce", "mse"):
        problems.append(f"unknown student_loss {plan.student_loss!r}")

    trained: set[str] = set(plan.preloaded)
    for i, phase in enumerate(plan.phases):
        where = f"phase {i} ({phase.label()})"
        if phase.trainee not in MODEL_NAMES:
            problems.append(f"{where}: unknown trainee")
            continue
        if phase.epochs < 0:
            problems.append(f"{where}: negative epoch count")
        if "GT" not in phase.teachers:
            problems.append(f"{where}: ground truth missing from teacher set")
        for t in phase.distill_teachers:
            if t not in ("ST", "PT"):
                problems.append(f"{where}: unknown teacher {t!r}")
            elif t == phase.trainee:
                problems.append(f"{where}: model cannot teach itself")
            elif t not in trained:
                problems.append(f"{where}: teacher {t} has not been trained or loaded")
        if phase.trainee == "ST" and i != 0:
            problems.append(f"{where}: the mask-aware teacher must be trained first")
        trained.add(phase.trainee)
    if not any(p.trainee == "S" for p in plan.phases):
        problems.append("plan never trains the student")

    if plan.path_id in _PATH_LAYOUT:
        expected = _PATH_LAYOUT[plan.path_id]
        actual = tuple((p.trainee, p.distill_teachers) for p in plan.phases)
        if actual != expected:
            problems.append(
                f"phases {actual} do not match path {plan.path_id!r} layout {expected}"
            )
    if plan.mode == "interleaved":
        actual = tuple((p.trainee, p.distill_teachers) for p in plan.phases)
        if actual != _PATH_LAYOUT["j"]:
            problems.append("interleaved mode requires the path-j phase structure")
    return problems


def build_models(
    joint_count: int = 5, image_size: tuple[int, int] = (64, 48)
) -> dict[str, ModelSpec]:
    """The three desk-scale networks.

    PT: five 3x3 convs, 32 channels, one stride-2 downsample, linear
        regression head (MSE on [0,1] targets; a sigmoid head starves the
        gradient on these mostly-zero maps), RGB input.
    ST: PT with a 1x1 adapter in front that mixes RGB+mask down to 3 channels.
    S:  three 3x3 convs, 8 channels, raw logit head for the BCE losses.
    """
    h, w = image_size
    trunk = (
        Conv2d(3, 32, 3, stride=2),
        ReLU(),
        Conv2d(32, 32, 3),
        ReLU(),
        Conv2d(32, 32, 3),
        ReLU(),
        Conv2d(32, 32, 3),
        ReLU(),
        Conv2d(32, joint_count, 3),
    )
    pt = ModelSpec(trunk, 3, (h, w), joint_count, out_kind="linear01")
    st = ModelSpec((Conv1x1(4, 3),) + trunk, 4, (h, w), joint_count, out_kind="linear01")
    student = ModelSpec(
        (
            Conv2d(3, 8, 3, stride=2),
            ReLU(),
            Conv2d(8, 8, 3),
            ReLU(),
            Conv2d(8, joint_count, 3),
        ),
        3,
        (h, w),
        joint_count,
        out_kind="logits",
    )
    return {"ST": st, "PT": pt, "S": student}


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs shared by every phase."""

    batch_size: int = 8
    optimizer: str = "adam"
    learning_rate: float = 5e-3
    momentum: float = 0.9
    val_every: int = 0  # epochs between student val evals; 0 = final eval only
    eval_flip: bool = True

    def validate(self) -> list[str]:
        problems = []
        if self.batch_size < 1:
            problems.append(f"batch_size={self.batch_size} must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate={self.learning_rate} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum={self.momentum} outside [0, 1)")
        if self.val_every < 0:
            problems.append(f"val_every={self.val_every} must be >= 0")
        return problems


@dataclass
class TrainState:
    """Everything needed to resume a run bit-exactly at an epoch boundary."""

    seed: int
    run_key: str  # fingerprint of (plan, config, dataset); guards resume misuse
    segment_index: int = 0
    epoch_in_segment: int = 0
    step: int = 0
    params: dict[str, ParamStore] = field(default_factory=dict)
    opt_states: dict[str, AdamState | SGDState] = field(default_factory=dict)
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    completed: bool = False


@dataclass
class RunResult:
    """State of a plan run; ``final_eval`` is None if the run was paused."""

    plan: DistillationPlan
    state: TrainState
    final_eval: EvalResult | None

    @property
    def student(self) -> ParamStore:
        return self.state.params["S"]

    @property
    def final_ap(self) -> float:
        if self.final_eval is None:
            raise ValueError("run is paused; resume it to get a final score")
        return self.final_eval.ap


class PhaseCache:
    """Shares trained teacher parameters across plans with identical phases.

    Keys fingerprint everything that influences a teacher phase (model,
    data, seed, weights, optimizer), so a hit is bit-identical to retraining.
    Optionally backed by a directory so separate runs can share it.
    """

    def __init__(self, directory: str | None = None):
        self._mem: dict[str, ParamStore] = {}
        self.directory = directory
        if directory is not None:
            os.makedirs(directory, exist_ok=True)

    def get(self, key: str) -> ParamStore | None:
        if key in self._mem:
            return self._mem[key].copy()
        if self.directory is not None:
            path = os.path.join(self.directory, key)
            if os.path.isdir(path):
                store = load_params(path)
                self._mem[key] = store.copy()
                return store
        return None

    def put(self, key: str, store: ParamStore, model: ModelSpec) -> None:
        self._mem[key] = store.copy()
        if self.directory is not None:
            save_params(store, os.path.join(self.directory, key), model)


def dataset_fingerprint(samples: list[SyntheticSample]) -> str:
    """Content hash of a dataset, used in cache keys and resume guards."""
    digest = hashlib.sha256()
    digest.update(str(len(samples)).encode())
    for s in samples:
        digest.update(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
        for inst in s.instances:
            for kp in inst.keypoints:
                digest.update(np.float64(kp.x).tobytes())
                digest.update(np.float64(kp.y).tobytes())
                digest.update(str(kp.v).encode())
        for hs in s.heatmaps:
            digest.update(np.ascontiguousarray(hs.values, dtype="<f8").tobytes())
    return digest.hexdigest()


def _relevant_weights(phase: Phase, plan: DistillationPlan) -> dict:
    """The loss-weight fields that actually influence this phase's training.

    Restricting the fingerprint to these lets e.g. a threshold sweep reuse
    cached teachers: teacher phases never consume the student's betas.
    """
    w = plan.weights
    distill = phase.distill_teachers
    if phase.trainee in ("ST", "PT"):
        return {"alpha0": w.alpha0} if distill else {}
    rel: dict[str, float] = {}
    if plan.student_loss == "bce":
        rel["beta_gt"] = w.beta_gt
        if distill:
            rel["beta_teacher"] = w.beta_teacher
    if distill:
        # dual distillation blends with the senior teacher's weight
        if "ST" in distill:
            rel["alpha1"] = w.alpha1
        else:
            rel["alpha2"] = w.alpha2
    return rel


def _phase_fingerprint(
    phase: Phase,
    plan: DistillationPlan,
    models: dict[str, ModelSpec],
    tconf: TrainConfig,
    state: TrainState,
    dataset_key: str,
) -> str:
    """Content hash of everything that determines a phase's outcome.

    Distillation teachers enter by parameter checksum, not just architecture,
    so a cache hit is guaranteed to mean "the exact same training happened".
    """
    involved = (phase.trainee,) + phase.distill_teachers
    for t in phase.distill_teachers:
        if t not in state.params:
            raise ValueError(f"teacher {t} has no parameters; train or preload it first")
    payload = {
        "trainee": phase.trainee,
        "teachers": list(phase.teachers),
        "epochs": phase.epochs,
        "student_loss": plan.student_loss if phase.trainee == "S" else "",
        "weights": _relevant_weights(phase, plan),
        "models": {name: models[name].hash() for name in involved},
        "teacher_params": {
            t: param_checksum(state.params[t]) for t in phase.distill_teachers
        },
        "train": {
            "batch_size": tconf.batch_size,
            "optimizer": tconf.optimizer,
            "learning_rate": tconf.learning_rate,
            "momentum": tconf.momentum,
        },
        "seed": state.seed,
        "dataset": dataset_key,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _model_init_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"init:{seed}:{name}".encode()).hexdigest()
    return int(digest[:16], 16)


@dataclass(frozen=True)
class _Segment:
    """Executor unit: one phase, or the fused teacher+student interleave."""

    kind: str  # "single" | "fused"
    phases: tuple[Phase, ...]
    epochs: int


def segments(plan: DistillationPlan) -> list[_Segment]:
    if plan.mode == "phased":
        return [_Segment("single", (p,), p.epochs) for p in plan.phases]
    # Interleaved: first phase as-is, the remaining three fused.  Each fused
    # iteration performs one second-teacher update plus two student updates,
    # so the fused epoch count is half the student budget, rounded up.
    head, rest = plan.phases[0], tuple(plan.phases[1:])
    fused_epochs = (sum(p.epochs for p in rest if p.trainee == "S") + 1) // 2
    return [_Segment("single", (head,), head.epochs), _Segment("fused", rest, fused_epochs)]


@dataclass
class _Workspace:
    """Precomputed tensors for one segment over the training pairs."""

    inputs: dict[str, Array]  # model name -> (n_samples, C, H, W)
    pair_sample: np.ndarray  # (n_pairs,) sample index per training pair
    gt: Array  # (n_pairs, K, h, w) rendered probability targets
    gt_bin: Array  # the same, binarized at beta_gt
    teacher_probs: dict[str, Array]  # frozen teachers, per sample
    teacher_bins: dict[str, Array]


def _stack_inputs(model: ModelSpec, samples: list[SyntheticSample]) -> Array:
    if model.in_channels == 4:
        return np.stack([make_st_input(s) for s in samples])
    return np.stack([s.image for s in samples])


def _frozen_teacher_maps(
    name: str,
    models: dict[str, ModelSpec],
    params: dict[str, ParamStore],
    samples: list[SyntheticSample],
    batch: int = 16,
) -> Array:
    """Probability-space heatmaps of a frozen model over the whole dataset."""
    model = models[name]
    x = _stack_inputs(model, samples)
    outs = []
    for start in range(0, len(samples), batch):
        outs.append(forward_batch(model, params[name], x[start : start + batch]))
    return outputs_to_prob(model, np.concatenate(outs))


def _build_workspace(
    segment: _Segment,
    plan: DistillationPlan,
    models: dict[str, ModelSpec],
    state: TrainState,
    samples: list[SyntheticSample],
) -> _Workspace:
    pair_sample = []
    gt_list = []
    for i, sample in enumerate(samples):
        for hs in sample.heatmaps:
            pair_sample.append(i)
            gt_list.append(hs.values)
    if not gt_list:
        raise ValueError("training set has no instances")
    gt = np.stack(gt_list)
    gt_bin = (gt > plan.weights.beta_gt).astype(np.float64)

    trainees = {p.trainee for p in segment.phases}
    inputs = {t: _stack_inputs(models[t], samples) for t in trainees}

    frozen = set()
    for p in segment.phases:
        frozen.update(p.distill_teachers)
    frozen -= trainees  # a co-training teacher (fused mode) is evaluated per batch
    teacher_probs = {}
    teacher_bins = {}
    for name in sorted(frozen):
        if name not in state.params:
            raise ValueError(f"teacher {name} has no parameters; train or preload it first")
        maps = _frozen_teacher_maps(name, models, state.params, samples)
        teacher_probs[name] = maps
        teacher_bins[name] = (maps > plan.weights.beta_teacher).astype(np.float64)
    return _Workspace(
        inputs, np.array(pair_sample), gt, gt_bin, teacher_probs, teacher_bins
    )


def _student_alpha(weights: LossWeights, distill: tuple[str, ...]) -> float:
    if not distill:
        return 0.0
    return weights.alpha1 if "ST" in distill else weights.alpha2


def _phase_loss(
    plan: DistillationPlan,
    phase: Phase,
    out: Array,
    pair_id: int,
    work: _Workspace,
    live_teacher: dict[str, Array] | None = None,
) -> LossOutput:
    """Loss and gradient for one training pair; teachers enter as constants."""
    sample_id = int(work.pair_sample[pair_id])
    distill = phase.distill_teachers

    def teacher_prob(name: str) -> Array:
        if live_teacher is not None and name in live_teacher:
            return live_teacher[name]
        return work.teacher_probs[name][sample_id]

    def teacher_bin(name: str) -> Array:
        if live_teacher is not None and name in live_teacher:
            return (live_teacher[name] > plan.weights.beta_teacher).astype(np.float64)
        return work.teacher_bins[name][sample_id]

    if phase.trainee in ("ST", "PT"):
        if distill:
            return loss_second_teacher(
                out, work.gt[pair_id], teacher_prob(distill[0]), plan.weights.alpha0
            )
        return mse_loss(out, work.gt[pair_id])

    alpha = _student_alpha(plan.weights, distill)
    if plan.student_loss == "bce":
        bins = [teacher_bin(t) for t in distill]
        return loss_student(out, work.gt_bin[pair_id], bins, alpha)
    probs = [teacher_prob(t) for t in distill]
    return mse_via_sigmoid(out, work.gt[pair_id], probs, alpha)


def _train_batch(
    plan: DistillationPlan,
    phase: Phase,
    model: ModelSpec,
    state: TrainState,
    work: _Workspace,
    batch_pairs: np.ndarray,
    tconf: TrainConfig,
    live_teacher: dict[str, Array] | None = None,
) -> tuple[float, Array]:
    """One optimizer update; returns (mean batch loss, trainee batch output)."""
    name = phase.trainee
    xb = work.inputs[name][work.pair_sample[batch_pairs]]
    out, fwd_cache = forward_with_cache(model, state.params[name], xb)
    bsz = len(batch_pairs)
    total = 0.0
    gy = np.empty_like(out)
    for row, pid in enumerate(batch_pairs):
        lt = None
        if live_teacher is not None:
            lt = {k: v[row] for k, v in live_teacher.items()}
        res = _phase_loss(plan, phase, out[row], int(pid), work, lt)
        total += res.value
        gy[row] = res.grad / bsz
    mean_loss = total / bsz
    if not np.isfinite(mean_loss):
        raise DivergenceError(
            f"non-finite loss while training {phase.label()} at step {state.step}; "
            "try a lower learning rate"
        )
    grads = backward_from_cache(model, state.params[name], fwd_cache, gy)

    store = state.params[name]
    opt = state.opt_states[name]
    if isinstance(opt, AdamState):
        new_store, new_opt = adam_step(store, grads, opt, tconf.learning_rate)
    else:
        new_store, new_opt = sgd_step(store, grads, opt, tconf.learning_rate, tconf.momentum)
    state.params[name] = new_store
    state.opt_states[name] = new_opt

    state.trace.append(
        {
            "kind": "update",
            "step": state.step,
            "segment": state.segment_index,
            "trainee": name,
            "teachers": list(phase.teachers),
        }
    )
    state.step += 1
    return mean_loss, out


def _restore_rng(state: TrainState) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state.rng_state
    return gen


def _frozen_checksums(phases: tuple[Phase, ...], state: TrainState) -> dict[str, str]:
    trainees = {p.trainee for p in phases}
    frozen = set()
    for p in phases:
        frozen.update(p.distill_teachers)
    frozen -= trainees
    return {name: param_checksum(state.params[name]) for name in sorted(frozen)}


def _fused_batch(
    seg: _Segment,
    plan: DistillationPlan,
    models: dict[str, ModelSpec],
    state: TrainState,
    work: _Workspace,
    batch: np.ndarray,
    tconf: TrainConfig,
    epoch_losses: dict[str, list[float]],
) -> None:
    """Interleaved iteration: teacher update, then one student update per phase.

    The second teacher's targets for the student are its outputs from before
    its own update this iteration.
    """
    pt_phase = next(p for p in seg.phases if p.trainee == "PT")
    s_phases = [p for p in seg.phases if p.trainee == "S"]

    loss_pt, pt_out = _train_batch(plan, pt_phase, models["PT"], state, work, batch, tconf)
    epoch_losses["PT"].append(loss_pt)
    pt_maps = outputs_to_prob(models["PT"], pt_out)

    for phase in s_phases:
        live = {"PT": pt_maps} if "PT" in phase.distill_teachers else None
        loss_s, _ = _train_batch(
            plan, phase, models["S"], state, work, batch, tconf, live_teacher=live
        )
        epoch_losses["S"].append(loss_s)


def _run_segment(
    seg: _Segment,
    plan: DistillationPlan,
    models: dict[str, ModelSpec],
    state: TrainState,
    train_samples: list[SyntheticSample],
    val_samples: list[SyntheticSample],
    tconf: TrainConfig,
    dataset_key: str,
    cache: PhaseCache | None,
    oks_params: OKSParams,
    stride: int,
    epoch_budget: int,
) -> int:
    """Runs up to ``epoch_budget`` epochs of one segment; returns epochs done."""
    phase0 = seg.phases[0]
    seed = state.seed
    trainees = tuple(dict.fromkeys(p.trainee for p in seg.phases))
    cacheable = seg.kind == "single" and phase0.trainee != "S"

    if cacheable and cache is not None and state.epoch_in_segment == 0:
        key = _phase_fingerprint(phase0, plan, models, tconf, state, dataset_key)
        hit = cache.get(key)
        if hit is not None:
            state.params[phase0.trainee] = hit
            state.epoch_in_segment = seg.epochs
            state.trace.append(
                {
                    "kind": "phase_cached",
                    "segment": state.segment_index,
                    "trainee": phase0.trainee,
                    "teachers": list(phase0.teachers),
                }
            )
            return 0

    _ensure_initialized(trainees, models, state)
    if state.epoch_in_segment == 0:
        for t in trainees:
            state.opt_states[t] = init_optimizer(tconf.optimizer, state.params[t].params)
        fp = _phase_fingerprint(phase0, plan, models, tconf, state, dataset_key)
        rng = np.random.default_rng([seed, int(fp[:16], 16)])
        state.rng_state = rng.bit_generator.state
        state.trace.append(
            {
                "kind": "segment_start",
                "segment": state.segment_index,
                "phases": [p.label() for p in seg.phases],
                "frozen_checksums": _frozen_checksums(seg.phases, state),
            }
        )

    work = _build_workspace(seg, plan, models, state, train_samples)
    start_checksums = _frozen_checksums(seg.phases, state)
    rng = _restore_rng(state)

    n_pairs = len(work.pair_sample)
    first_epoch = state.epoch_in_segment
    last_epoch = min(seg.epochs, first_epoch + epoch_budget)
    for epoch in range(first_epoch, last_epoch):
        order = rng.permutation(n_pairs)
        epoch_losses: dict[str, list[float]] = {t: [] for t in trainees}
        for start in range(0, n_pairs, tconf.batch_size):
            batch = order[start : start + tconf.batch_size]
            if seg.kind == "single":
                loss, _ = _train_batch(
                    plan, phase0, models[phase0.trainee], state, work, batch, tconf
                )
                epoch_losses[phase0.trainee].append(loss)
            else:
                _fused_batch(seg, plan, models, state, work, batch, tconf, epoch_losses)
        state.epoch_in_segment = epoch + 1
        state.rng_state = rng.bit_generator.state
        for t in trainees:
            record = {
                "path": plan.path_id,
                "seed": seed,
                "segment": state.segment_index,
                "phase_label": " & ".join(
                    p.label() for p in seg.phases if p.trainee == t
                ),
                "trainee": t,
                "epoch_in_phase": epoch,
                "loss": float(np.mean(epoch_losses[t])) if epoch_losses[t] else None,
                "val_ap": None,
            }
            if t == "S" and tconf.val_every and (epoch + 1) % tconf.val_every == 0:
                record["val_ap"] = evaluate_model(
                    models["S"], state.params["S"], val_samples, oks_params, stride,
                    flip=tconf.eval_flip,
                ).ap
            state.history.append(record)

    end_checksums = _frozen_checksums(seg.phases, state)
    if end_checksums != start_checksums:
        changed = sorted(
            k for k in end_checksums if end_checksums[k] != start_checksums.get(k)
        )
        raise RuntimeError(f"frozen teacher parameters changed during training: {changed}")

    if state.epoch_in_segment == seg.epochs:
        state.trace.append(
            {
                "kind": "segment_end",
                "segment": state.segment_index,
                "frozen_checksums": end_checksums,
            }
        )
        if cacheable and cache is not None:
            key = _phase_fingerprint(phase0, plan, models, tconf, state, dataset_key)
            cache.put(key, state.params[phase0.trainee], models[phase0.trainee])
    return last_epoch - first_epoch


def _ensure_initialized(
    names: tuple[str, ...], models: dict[str, ModelSpec], state: TrainState
) -> None:
    for name in names:
        if name not in state.params:
            state.params[name] = init_params(models[name], _model_init_seed(state.seed, name))


def run_plan(
    plan: DistillationPlan,
    train_samples: list[SyntheticSample],
    val_samples: list[SyntheticSample],
    seed: int,
    tconf: TrainConfig = TrainConfig(),
    *,
    models: dict[str, ModelSpec] | None = None,
    initial_params: dict[str, ParamStore] | None = None,
    cache: PhaseCache | None = None,
    dataset_key: str | None = None,
    state: TrainState | None = None,
    oks_params: OKSParams | None = None,
    max_epochs: int | None = None,
) -> RunResult:
    """Executes a plan end to end, or resumes one from a saved ``state``.

    Teachers trained in earlier phases are frozen afterwards; their parameter
    checksums are recorded around every phase that consumes them and verified
    unchanged.  ``cache`` short-circuits teacher phases whose fingerprint
    (model, data, seed, weights, optimizer) was seen before; the cached
    parameters are bit-identical to retraining, so results do not change.
    ``max_epochs`` pauses the run after that many epochs (the state can be
    serialized and resumed later bit-exactly); the result then has no score.
    """
    problems = validate_plan(plan) + tconf.validate()
    if problems:
        raise ValueError("invalid plan: " + "; ".join(problems))
    if not train_samples or not val_samples:
        raise ValueError("need non-empty train and val datasets")

    first = train_samples[0]
    if not first.heatmaps:
        raise ValueError("first training sample has no instances")
    joint_count = first.heatmaps[0].joint_count
    image_size = (first.image.shape[1], first.image.shape[2])
    stride = image_size[0] // first.heatmaps[0].grid_size[0]
    if models is None:
        models = build_models(joint_count, image_size)
    if oks_params is None:
        oks_params = OKSParams.uniform(joint_count)
    if dataset_key is None:
        dataset_key = dataset_fingerprint(train_samples)

    run_key = hashlib.sha256(
        json.dumps(
            {
                "plan": {
                    "path": plan.path_id,
                    "phases": [[p.trainee, list(p.teachers), p.epochs] for p in plan.phases],
                    "weights": asdict(plan.weights),
                    "mode": plan.mode,
                    "student_loss": plan.student_loss,
                },
                "models": {n: m.hash() for n, m in models.items()},
                "tconf": asdict(tconf),
                "seed": seed,
                "dataset": dataset_key,
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()

    if state is None:
        state = TrainState(seed=seed, run_key=run_key)
        for name, store in (initial_params or {}).items():
            state.params[name] = store.copy()
    elif state.run_key != run_key:
        raise ValueError(
            "resume state was produced by a different (plan, config, dataset, seed)"
        )

    segs = segments(plan)
    budget = max_epochs if max_epochs is not None else sum(s.epochs for s in segs) + 1
    while state.segment_index < len(segs):
        seg = segs[state.segment_index]
        # Even a 0-epoch phase instantiates its trainee (with init weights).
        _ensure_initialized(tuple(dict.fromkeys(p.trainee for p in seg.phases)), models, state)
        if state.epoch_in_segment < seg.epochs:
            if budget <= 0:
                return RunResult(plan=plan, state=state, final_eval=None)
            budget -= _run_segment(
                seg, plan, models, state, train_samples, val_samples,
                tconf, dataset_key, cache, oks_params, stride, budget,
            )
        if state.epoch_in_segment < seg.epochs:
            return RunResult(plan=plan, state=state, final_eval=None)  # paused
        state.segment_index += 1
        state.epoch_in_segment = 0
        state.rng_state = None
        state.opt_states = {}

    final_eval = evaluate_model(
        models["S"], state.params["S"], val_samples, oks_params, stride,
        flip=tconf.eval_flip,
    )
    if not state.completed:
        state.history.append(
            {
                "path": plan.path_id,
                "seed": seed,
                "segment": len(segs),
                "phase_label": "final",
                "trainee": "S",
                "epoch_in_phase": 0,
                "loss": None,
                "val_ap": final_eval.ap,
            }
        )
        state.completed = True
    return RunResult(plan=plan, state=state, final_eval=final_eval)


def state_to_dict(state: TrainState) -> dict:
    """JSON-safe snapshot; arrays become nested lists (floats round-trip exactly)."""

    def store_dict(store: ParamStore) -> dict:
        return {"seed": store.seed, "params": {k: v.tolist() for k, v in store.params.items()}}

    def opt_dict(opt) -> dict:
        if isinstance(opt, AdamState):
            return {
                "kind": "adam",
                "t": opt.t,
                "m": {k: v.tolist() for k, v in opt.m.items()},
                "v": {k: v.tolist() for k, v in opt.v.items()},
            }
        return {"kind": "sgd", "velocity": {k: v.tolist() for k, v in opt.velocity.items()}}

    return {
        "version": 1,
        "seed": state.seed,
        "run_key": state.run_key,
        "segment_index": state.segment_index,
        "epoch_in_segment": state.epoch_in_segment,
        "step": state.step,
        "params": {name: store_dict(s) for name, s in state.params.items()},
        "opt_states": {name: opt_dict(o) for name, o in state.opt_states.items()},
        "rng_state": state.rng_state,
        "history": state.history,
        "trace": state.trace,
        "completed": state.completed,
    }


def state_from_dict(data: dict) -> TrainState:
    if data.get("version") != 1:
        raise ValueError(f"unsupported train-state version {data.get('version')!r}")

    def to_store(d: dict) -> ParamStore:
        return ParamStore(
            {k: np.array(v, dtype=np.float64) for k, v in d["params"].items()}, d["seed"]
        )

    def to_opt(d: dict):
        if d["kind"] == "adam":
            return AdamState(
                {k: np.array(v, dtype=np.float64) for k, v in d["m"].items()},
                {k: np.array(v, dtype=np.float64) for k, v in d["v"].items()},
                d["t"],
            )
        return SGDState({k: np.array(v, dtype=np.float64) for k, v in d["velocity"].items()})

    state = TrainState(seed=data["seed"], run_key=data["run_key"])
    state.segment_index = data["segment_index"]
    state.epoch_in_segment = data["epoch_in_segment"]
    state.step = data["step"]
    state.params = {name: to_store(d) for name, d in data["params"].items()}
    state.opt_states = {name: to_opt(d) for name, d in data["opt_states"].items()}
    state.rng_state = data["rng_state"]
    state.history = data["history"]
    state.trace = data["trace"]
    state.completed = data["completed"]
    return state


def save_state(state: TrainState, path: str) -> None:
    with open(path, "w") as f:
        json.dump(state_to_dict(state), f, sort_keys=True)


def load_state(path: str) -> TrainState:
    with open(path) as f:
        return state_from_dict(json.load(f))
