"""Keypoint-similarity evaluation: OKS, AP/AR ladders, model evaluation.

Every (sample, instance) pair is one evaluation example: the model decodes a
single pose per image and that pose is scored against each GT instance of
the image.  Association is therefore one-to-one by construction, which makes
average recall equal average precision; both are reported for symmetry.
"""

from dataclasses import dataclass, field

import numpy as np

from posekd.heatmaps import HeatmapSet, decode, flip_merge
from posekd.nn.model import ModelSpec, ParamStore, forward_batch, outputs_to_prob
from posekd.synthdata import FLIP_PAIRS, SyntheticSample, make_st_input
from posekd.synthtypes import PoseInstance

THRESHOLD_LADDER = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))

DEFAULT_FALLOFF = 0.1

# Split between "medium" and "large" instances, in squared-scale units
# (bbox area, image pixels^2).  Chosen so typical scenes populate both sides.
DEFAULT_AREA_BOUNDARY = 322.0


@dataclass(frozen=True)
class OKSParams:
    """Per-joint falloff constants and the evaluation ladder."""

    falloff: tuple[float, ...]
    thresholds: tuple[float, ...] = THRESHOLD_LADDER
    area_boundary: float = DEFAULT_AREA_BOUNDARY

    def __post_init__(self) -> None:
        if any(k <= 0.0 for k in self.falloff):
            raise ValueError("falloff constants must be positive")
        if not self.thresholds:
            raise ValueError("threshold ladder must be non-empty")

    @classmethod
    def uniform(cls, joint_count: int, k: float = DEFAULT_FALLOFF, **kwargs) -> "OKSParams":
        return cls(falloff=(k,) * joint_count, **kwargs)


def oks(pred: PoseInstance, gt: PoseInstance, params: OKSParams) -> float:
    """Object keypoint similarity between a prediction and one GT instance.

    Only GT joints with v > 0 contribute: mean of exp(-d_i^2 / (2 s^2 k_i^2))
    with s the GT instance scale.  Raises if the GT has no labelled joints.
    """
    if gt.joint_count != len(params.falloff):
        raise ValueError(
            f"gt has {gt.joint_count} joints, params expect {len(params.falloff)}"
        )
    if pred.joint_count != gt.joint_count:
        raise ValueError("prediction and gt joint counts differ")
    total = 0.0
    count = 0
    s2 = gt.scale * gt.scale
    for i, (p, g) in enumerate(zip(pred.keypoints, gt.keypoints)):
        if g.v <= 0:
            continue
        d2 = (p.x - g.x) ** 2 + (p.y - g.y) ** 2
        denom = 2.0 * s2 * params.falloff[i] ** 2
        if denom == 0.0:
            total += 1.0 if d2 == 0.0 else 0.0
        else:
            total += float(np.exp(-d2 / denom))
        count += 1
    if count == 0:
        raise ValueError("OKS is undefined for a GT instance with no labelled joints")
    return total / count


@dataclass
class EvalResult:
    """AP/AR over the ladder plus size-bucket APs and per-threshold rates."""

    ap: float
    ar: float
    ap_medium: float | None
    ap_large: float | None
    per_threshold: list[tuple[float, float]] = field(default_factory=list)
    instance_count: int = 0

    def _rate_at(self, threshold: float) -> float | None:
        for t, rate in self.per_threshold:
            if abs(t - threshold) < 1e-9:
                return rate
        return None

    @property
    def ap50(self) -> float | None:
        return self._rate_at(0.50)

    @property
    def ap75(self) -> float | None:
        return self._rate_at(0.75)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ar": self.ar,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "per_threshold": [[t, r] for t, r in self.per_threshold],
            "instance_count": self.instance_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalResult":
        return cls(
            ap=data["ap"],
            ar=data["ar"],
            ap_medium=data["ap_medium"],
            ap_large=data["ap_large"],
            per_threshold=[(t, r) for t, r in data["per_threshold"]],
            instance_count=data["instance_count"],
        )


def _ladder_mean(scores: list[float], thresholds: tuple[float, ...]) -> float:
    rates = [sum(1 for s in scores if s >= t) / len(scores) for t in thresholds]
    return sum(rates) / len(rates)


def ap_ar(pairs: list[tuple[PoseInstance, PoseInstance]], params: OKSParams) -> EvalResult:
    """Scores (prediction, gt) pairs: mean pass rate over the ladder.

    A pair passes threshold t when its OKS is >= t.  Buckets split on the
    GT squared scale at ``params.area_boundary``; an empty bucket reports None.
    """
    if not pairs:
        raise ValueError("ap_ar needs at least one (prediction, gt) pair")
    scores = [oks(pred, gt, params) for pred, gt in pairs]
    medium = [s for s, (_, gt) in zip(scores, pairs)
              if gt.scale * gt.scale <= params.area_boundary]
    large = [s for s, (_, gt) in zip(scores, pairs)
             if gt.scale * gt.scale > params.area_boundary]
    per_threshold = [
        (t, sum(1 for s in scores if s >= t) / len(scores)) for t in params.thresholds
    ]
    ap = sum(r for _, r in per_threshold) / len(per_threshold)
    return EvalResult(
        ap=ap,
        ar=ap,  # one-to-one association: recall equals precision here
        ap_medium=_ladder_mean(medium, params.thresholds) if medium else None,
        ap_large=_ladder_mean(large, params.thresholds) if large else None,
        per_threshold=per_threshold,
        instance_count=len(pairs),
    )


def model_input(model: ModelSpec, sample: SyntheticSample) -> np.ndarray:
    """Builds the network input a model expects: RGB, or RGB plus mask."""
    if model.in_channels == 3:
        return sample.image
    if model.in_channels == 4:
        return make_st_input(sample)
    raise ValueError(f"no input recipe for a {model.in_channels}-channel model")


def predict_heatmaps(
    model: ModelSpec,
    store: ParamStore,
    samples: list[SyntheticSample],
    flip: bool = True,
    flip_pairs: tuple[tuple[int, int], ...] = FLIP_PAIRS,
    batch_size: int = 16,
) -> list[HeatmapSet]:
    """Probability heatmaps per sample, optionally flip-averaged."""
    out: list[HeatmapSet] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = np.stack([model_input(model, s) for s in chunk])
        y = outputs_to_prob(model, forward_batch(model, store, x))
        if flip:
            y_flip = outputs_to_prob(model, forward_batch(model, store, x[:, :, :, ::-1]))
        for i in range(len(chunk)):
            hs = HeatmapSet(y[i], "prob")
            if flip:
                hs = flip_merge(hs, HeatmapSet(y_flip[i], "prob"), flip_pairs)
            out.append(hs)
    return out


def evaluate_model(
    model: ModelSpec,
    store: ParamStore,
    samples: list[SyntheticSample],
    params: OKSParams,
    stride: int,
    flip: bool = True,
    quarter_offset: bool = True,
    flip_pairs: tuple[tuple[int, int], ...] = FLIP_PAIRS,
) -> EvalResult:
    """Decodes model predictions for every sample and scores all instances."""
    maps = predict_heatmaps(model, store, samples, flip=flip, flip_pairs=flip_pairs)
    pairs = []
    for sample, hs in zip(samples, maps):
        pred = decode(hs, stride, quarter_offset=quarter_offset)
        for inst in sample.instances:
            pairs.append((pred, inst))
    return ap_ar(pairs, params)


def evaluate_gt_oracle(
    samples: list[SyntheticSample],
    params: OKSParams,
    stride: int,
    quarter_offset: bool = True,
) -> EvalResult:
    """Scores decode() applied to each instance's own rendered GT heatmaps.

    This bypasses any model and measures pure codec error; with the quarter
    offset disabled it is exact on grid-centred keypoints (AP = 1).
    """
    pairs = []
    for sample in samples:
        for inst, hs in zip(sample.instances, sample.heatmaps):
            pred = decode(hs, stride, quarter_offset=quarter_offset)
            pairs.append((pred, inst))
    return ap_ar(pairs, params)
