"""Synthetic stick-figure scenes with segmentation masks and GT heatmaps.

Each scene holds one or two star-shaped figures (head hub plus four limbs)
rasterized onto a noisy background.  Figures are drawn in order, so a later
figure occludes an earlier one; the segmentation mask is exactly the union
of the rendered silhouettes.  Every keypoint stays on its own silhouette,
and occluded keypoints keep visibility 1 rather than dropping to 0.

Generation is deterministic per (seed, index): each sample draws from
``np.random.default_rng([seed, index])`` and never touches global RNG state.
"""

import json
from dataclasses import dataclass

import numpy as np

from posekd.heatmaps import HeatmapSet
from posekd.synthtypes import Keypoint, PoseInstance, instance_scale

Array = np.ndarray

JOINT_NAMES = ("head", "hand_l", "hand_r", "foot_l", "foot_r")
SKELETON = ((0, 1), (0, 2), (0, 3), (0, 4))
FLIP_PAIRS = ((1, 2), (3, 4))

_MAX_TRIES = 200


class GenerationError(RuntimeError):
    """Raised when a scene cannot be placed within bounds or overlap forced."""


class SchemaError(ValueError):
    """Raised for malformed or inconsistent dataset records."""


@dataclass(frozen=True)
class SceneConfig:
    """Scene geometry and sampling knobs.

    ``height``/``width`` are the image size; heatmaps are rendered at
    ``height // stride`` by ``width // stride``.
    """

    height: int = 64
    width: int = 48
    stride: int = 2
    sigma: float = 1.5
    min_instances: int = 1
    max_instances: int = 2
    overlap_prob: float = 0.5

    def __post_init__(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError("image must be at least 16x16")
        if self.stride < 1 or self.height % self.stride or self.width % self.stride:
            raise ValueError("height and width must be positive multiples of stride")
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ValueError("overlap_prob must lie in [0, 1]")

    @property
    def joint_count(self) -> int:
        return len(JOINT_NAMES)

    @property
    def heatmap_size(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride


@dataclass
class SyntheticSample:
    """One rendered scene: image, mask, instances, and per-instance heatmaps."""

    index: int
    image: Array  # (3, H, W) float64 in [0, 1]
    mask: Array  # (H, W) uint8 in {0, 1}
    instances: list[PoseInstance]
    heatmaps: list[HeatmapSet]  # parallel to instances, kind "prob"


def _paint_segment(sil: Array, p0: Array, p1: Array, radius: float) -> None:
    """Marks pixels whose center is within ``radius`` of segment p0-p1."""
    h, w = sil.shape
    ys, xs = np.mgrid[0:h, 0:w]
    d = p1 - p0
    denom = float(d @ d)
    if denom == 0.0:
        t = np.zeros_like(xs, dtype=np.float64)
    else:
        t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / denom, 0.0, 1.0)
    dist2 = (xs - p0[0] - t * d[0]) ** 2 + (ys - p0[1] - t * d[1]) ** 2
    sil[dist2 <= radius * radius] = True


# Limb angle ranges in degrees, screen convention (x right, y down).
_LIMB_ANGLES = {
    1: (145.0, 215.0),  # hand_l
    2: (-35.0, 35.0),  # hand_r
    3: (95.0, 130.0),  # foot_l
    4: (50.0, 85.0),  # foot_r
}


def _sample_figure(
    cfg: SceneConfig, rng: np.random.Generator, anchor: Array | None
) -> tuple[Array, float] | None:
    """Draws joint positions (5, 2) and a size factor, or None if out of bounds."""
    unit = min(cfg.height, cfg.width)
    f = rng.uniform(0.75, 1.3)
    if anchor is None:
        head = np.array(
            [rng.uniform(6.0, cfg.width - 7.0), rng.uniform(6.0, cfg.height - 7.0)]
        )
    else:
        head = anchor + rng.uniform(-8.0, 8.0, size=2)
    joints = np.zeros((5, 2))
    joints[0] = head
    for j, (lo, hi) in _LIMB_ANGLES.items():
        theta = np.deg2rad(rng.uniform(lo, hi))
        if j in (1, 2):
            length = rng.uniform(0.12, 0.22) * unit * f
        else:
            length = rng.uniform(0.16, 0.30) * unit * f
        joints[j] = head + length * np.array([np.cos(theta), np.sin(theta)])
    margin = 1.5
    if (
        joints[:, 0].min() < margin
        or joints[:, 0].max() > cfg.width - 1 - margin
        or joints[:, 1].min() < margin
        or joints[:, 1].max() > cfg.height - 1 - margin
    ):
        return None
    return joints, f


def _rasterize(cfg: SceneConfig, joints: Array, f: float) -> Array:
    """Silhouette of one figure: limb strokes, head disc, joint dots."""
    unit = min(cfg.height, cfg.width)
    sil = np.zeros((cfg.height, cfg.width), dtype=bool)
    stroke = 0.028 * unit * f
    for a, b in SKELETON:
        _paint_segment(sil, joints[a], joints[b], stroke)
    _paint_segment(sil, joints[0], joints[0], 0.055 * unit * f)
    for j in range(1, 5):
        _paint_segment(sil, joints[j], joints[j], max(1.0, 0.022 * unit * f))
    return sil


def generate_scene(cfg: SceneConfig, seed: int, index: int) -> SyntheticSample:
    """Renders sample ``index`` of the stream identified by ``seed``."""
    rng = np.random.default_rng([seed, index])
    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    force_overlap = n >= 2 and rng.random() < cfg.overlap_prob

    figures: list[Array] = []
    sils: list[Array] = []
    for i in range(n):
        anchor = figures[0][0] if (force_overlap and i == 1) else None
        for _ in range(_MAX_TRIES):
            drawn = _sample_figure(cfg, rng, anchor)
            if drawn is None:
                continue
            joints, fac = drawn
            sil = _rasterize(cfg, joints, fac)
            if anchor is not None and not (sil & sils[0]).any():
                continue
            break
        else:
            raise GenerationError(
                f"could not place figure {i} of sample (seed={seed}, index={index})"
            )
        figures.append(joints)
        sils.append(sil)

    owner = np.full((cfg.height, cfg.width), -1, dtype=np.int64)
    for i, sil in enumerate(sils):
        owner[sil] = i
    mask = (owner >= 0).astype(np.uint8)

    # Background: vertical ramp plus tint and noise, figures painted on top.
    ys = np.arange(cfg.height)[:, None] / cfg.height
    base = 0.12 + 0.10 * ys + rng.normal(0.0, 0.02, size=(cfg.height, cfg.width))
    tint = rng.uniform(0.0, 0.06, size=3)
    image = np.stack([base + t for t in tint])
    for i in range(n):
        color = rng.uniform(0.35, 0.95, size=3)
        sel = owner == i
        for c in range(3):
            image[c][sel] = color[c]
    image += rng.normal(0.0, 0.01, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    instances = []
    heatmaps = []
    for i, joints in enumerate(figures):
        keypoints = []
        for j in range(5):
            x, y = float(joints[j, 0]), float(joints[j, 1])
            px = int(np.clip(round(x), 0, cfg.width - 1))
            py = int(np.clip(round(y), 0, cfg.height - 1))
            v = 2 if owner[py, px] == i else 1
            keypoints.append(Keypoint(x, y, v))
        inst = PoseInstance(keypoints=keypoints, scale=instance_scale(keypoints), instance_id=i)
        instances.append(inst)
        heatmaps.append(render_gt_heatmaps(inst, cfg.heatmap_size, cfg.sigma, cfg.stride))

    return SyntheticSample(index=index, image=image, mask=mask, instances=instances,
                           heatmaps=heatmaps)


def render_gt_heatmaps(
    instance: PoseInstance, grid_size: tuple[int, int], sigma: float, stride: int = 1
) -> HeatmapSet:
    """Unnormalized Gaussian per joint, peak exactly 1 at the nearest grid cell.

    Keypoints are mapped to heatmap coordinates by dividing by ``stride`` and
    snapping to the nearest cell; joints with v == 0 render as all zeros.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = grid_size
    ys, xs = np.mgrid[0:h, 0:w]
    values = np.zeros((instance.joint_count, h, w))
    for k, kp in enumerate(instance.keypoints):
        if kp.v == 0:
            continue
        mx = int(np.clip(round(kp.x / stride), 0, w - 1))
        my = int(np.clip(round(kp.y / stride), 0, h - 1))
        values[k] = np.exp(-((xs - mx) ** 2 + (ys - my) ** 2) / (2.0 * sigma * sigma))
    return HeatmapSet(values, "prob")


def make_st_input(sample: SyntheticSample) -> Array:
    """Stacks the RGB image with the mask as a fourth channel."""
    return np.concatenate([sample.image, sample.mask[None].astype(np.float64)])


def _sample_to_record(sample: SyntheticSample, cfg: SceneConfig) -> dict:
    return {
        "index": sample.index,
        "height": cfg.height,
        "width": cfg.width,
        "stride": cfg.stride,
        "joint_count": cfg.joint_count,
        "image": sample.image.tolist(),
        "mask": sample.mask.tolist(),
        "instances": [
            {
                "id": inst.instance_id,
                "scale": inst.scale,
                "keypoints": [[kp.x, kp.y, kp.v] for kp in inst.keypoints],
            }
            for inst in sample.instances
        ],
        "heatmaps": [hs.values.tolist() for hs in sample.heatmaps],
    }


def _record_to_sample(rec: dict, lineno: int, path: str) -> SyntheticSample:
    def fail(msg: str) -> SchemaError:
        return SchemaError(f"{path}:{lineno}: {msg}")

    for key in ("index", "height", "width", "stride", "joint_count", "image", "mask",
                "instances", "heatmaps"):
        if key not in rec:
            raise fail(f"missing field {key!r}")
    h, w, stride, k = rec["height"], rec["width"], rec["stride"], rec["joint_count"]
    if k != len(JOINT_NAMES):
        raise fail(f"joint_count is {k}, this package is built for {len(JOINT_NAMES)}")
    image = np.array(rec["image"], dtype=np.float64)
    if image.shape != (3, h, w):
        raise fail(f"image shape {image.shape} does not match (3, {h}, {w})")
    mask = np.array(rec["mask"], dtype=np.uint8)
    if mask.shape != (h, w):
        raise fail(f"mask shape {mask.shape} does not match ({h}, {w})")
    if len(rec["instances"]) != len(rec["heatmaps"]):
        raise fail("instances and heatmaps are not parallel")
    instances = []
    heatmaps = []
    for inst_rec, hm_rec in zip(rec["instances"], rec["heatmaps"]):
        kps = inst_rec.get("keypoints", [])
        if len(kps) != k:
            raise fail(f"instance has {len(kps)} keypoints, expected {k}")
        keypoints = [Keypoint(float(x), float(y), int(v)) for x, y, v in kps]
        instances.append(
            PoseInstance(keypoints=keypoints, scale=float(inst_rec["scale"]),
                         instance_id=int(inst_rec["id"]))
        )
        values = np.array(hm_rec, dtype=np.float64)
        if values.shape != (k, h // stride, w // stride):
            raise fail(f"heatmap shape {values.shape} does not match grid")
        heatmaps.append(HeatmapSet(values, "prob"))
    return SyntheticSample(index=int(rec["index"]), image=image, mask=mask,
                           instances=instances, heatmaps=heatmaps)


def write_dataset(cfg: SceneConfig, count: int, seed: int, path: str) -> list[SyntheticSample]:
    """Generates ``count`` scenes, writes them as JSON Lines, returns them.

    Identical (cfg, count, seed) always produce byte-identical files.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    samples = []
    with open(path, "w") as f:
        for index in range(count):
            sample = generate_scene(cfg, seed, index)
            f.write(json.dumps(_sample_to_record(sample, cfg), sort_keys=True) + "\n")
            samples.append(sample)
    return samples


def read_dataset(path: str) -> list[SyntheticSample]:
    """Loads a JSON Lines dataset; an empty file yields an empty list."""
    samples = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            samples.append(_record_to_sample(rec, lineno, path))
    return samples


def export_pgm(sample: SyntheticSample, path: str, what: str = "image") -> None:
    """Writes the sample's image (grayscale) or mask as an ASCII PGM."""
    if what == "image":
        gray = np.clip(sample.image.mean(axis=0) * 255.0, 0, 255).astype(np.uint8)
    elif what == "mask":
        gray = sample.mask * 255
    else:
        raise ValueError(f"what must be 'image' or 'mask', got {what!r}")
    h, w = gray.shape
    with open(path, "w") as f:
        f.write(f"P2\n{w} {h}\n255\n")
        for row in gray:
            f.write(" ".join(str(int(v)) for v in row) + "\n")
