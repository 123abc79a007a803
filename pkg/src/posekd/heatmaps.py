"""Heatmap containers and codec operations.

A :class:`HeatmapSet` is a (K, h, w) float64 stack, one channel per joint,
tagged with what its values mean: raw ``logits``, ``prob`` in [0, 1], or
``binary`` in {0, 1}.  Binary sets are valid probability sets, which makes
:func:`binarize` idempotent.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit

from posekd.synthtypes import Keypoint, PoseInstance, instance_scale

Array = np.ndarray

KINDS = ("logits", "prob", "binary")


@dataclass
class HeatmapSet:
    """Stack of per-joint heatmaps with an explicit value semantics tag."""

    values: Array
    kind: str

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"heatmaps must be (K, h, w), got shape {self.values.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not np.isfinite(self.values).all():
            raise ValueError("heatmaps contain non-finite values")
        if self.kind == "prob":
            if self.values.min() < 0.0 or self.values.max() > 1.0:
                raise ValueError("prob heatmaps must lie in [0, 1]")
        elif self.kind == "binary":
            if not np.isin(self.values, (0.0, 1.0)).all():
                raise ValueError("binary heatmaps must contain only 0 and 1")

    @property
    def joint_count(self) -> int:
        return self.values.shape[0]

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


def to_prob(heatmaps: HeatmapSet) -> HeatmapSet:
    """Logits -> probabilities via the logistic function; prob passes through."""
    if heatmaps.kind == "logits":
        return HeatmapSet(expit(heatmaps.values), "prob")
    return HeatmapSet(heatmaps.values.copy(), heatmaps.kind)


def binarize(heatmaps: HeatmapSet, beta: float) -> HeatmapSet:
    """Thresholds a probability map: 1 where value > beta, else 0.

    The comparison is strict, so a pixel exactly at ``beta`` maps to 0.
    Binary inputs are fixed points for any beta in (0, 1).
    """
    if heatmaps.kind == "logits":
        raise ValueError("binarize expects probability heatmaps, not logits")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    return HeatmapSet((heatmaps.values > beta).astype(np.float64), "binary")


def decode(heatmaps: HeatmapSet, stride: int, quarter_offset: bool = True) -> PoseInstance:
    """Recovers image-space keypoints from a probability heatmap stack.

    Per joint: take the row-major argmax cell, then (optionally) shift a
    quarter cell toward the best of the in-grid 4-neighbours, ties broken in
    up/down/left/right order.  Image coordinates are ``(cell + shift) * stride``.
    An all-zero channel decodes as a not-visible keypoint at the origin.
    """
    if heatmaps.kind == "logits":
        raise ValueError("decode expects probability heatmaps; apply to_prob first")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    h, w = heatmaps.grid_size
    keypoints = []
    for k in range(heatmaps.joint_count):
        ch = heatmaps.values[k]
        if not ch.any():
            keypoints.append(Keypoint(0.0, 0.0, 0))
            continue
        flat = int(np.argmax(ch))
        r, c = divmod(flat, w)
        dr, dc = 0.0, 0.0
        if quarter_offset:
            neighbours = [(r - 1, c, -0.25, 0.0), (r + 1, c, 0.25, 0.0),
                          (r, c - 1, 0.0, -0.25), (r, c + 1, 0.0, 0.25)]
            valid = [(nr, nc, sr, sc) for nr, nc, sr, sc in neighbours
                     if 0 <= nr < h and 0 <= nc < w]
            if valid:
                best = max(ch[nr, nc] for nr, nc, _, _ in valid)
                for nr, nc, sr, sc in valid:
                    if ch[nr, nc] == best:
                        dr, dc = sr, sc
                        break
        keypoints.append(Keypoint((c + dc) * stride, (r + dr) * stride, 2))
    scale = instance_scale(keypoints)
    return PoseInstance(keypoints=keypoints, scale=scale, instance_id=0)


def flip_merge(
    original: HeatmapSet, flipped: HeatmapSet, flip_pairs: tuple[tuple[int, int], ...]
) -> HeatmapSet:
    """Averages a heatmap stack with its horizontally-flipped counterpart.

    ``flipped`` is assumed to come from a mirrored input; it is mirrored back
    along width and its left/right channel pairs are swapped before averaging.
    """
    if original.kind == "logits" or flipped.kind == "logits":
        raise ValueError("flip_merge expects probability heatmaps")
    if original.values.shape != flipped.values.shape:
        raise ValueError(
            f"shape mismatch: {original.values.shape} vs {flipped.values.shape}"
        )
    k = original.joint_count
    perm = np.arange(k)
    seen = set()
    for a, b in flip_pairs:
        if not (0 <= a < k and 0 <= b < k) or a == b:
            raise ValueError(f"bad flip pair ({a}, {b}) for {k} joints")
        if a in seen or b in seen:
            raise ValueError(f"joint appears in more than one flip pair: ({a}, {b})")
        seen.update((a, b))
        perm[a], perm[b] = b, a
    restored = flipped.values[perm][:, :, ::-1]
    return HeatmapSet((original.values + restored) / 2.0, "prob")


_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def count_peaks(heatmaps: HeatmapSet) -> list[int]:
    """Number of 4-connected components of ones in each binary channel."""
    if heatmaps.kind != "binary":
        raise ValueError("count_peaks expects binary heatmaps")
    counts = []
    for k in range(heatmaps.joint_count):
        _, n = ndimage.label(heatmaps.values[k], structure=_FOUR_CONN)
        counts.append(int(n))
    return counts


def write_heatmaps(sets: list[HeatmapSet], path: str) -> None:
    """One JSON object per line: {"kind": ..., "values": [[[...]]]}."""
    with open(path, "w") as f:
        for hs in sets:
            f.write(json.dumps({"kind": hs.kind, "values": hs.values.tolist()},
                               sort_keys=True) + "\n")


def read_heatmaps(path: str) -> list[HeatmapSet]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(HeatmapSet(np.array(rec["values"], dtype=np.float64), rec["kind"]))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad heatmap record: {exc}") from exc
    return out
