"""Scene generation invariants, heatmap rendering analytics, dataset I/O."""

import numpy as np
import pytest

from posekd.heatmaps import HeatmapSet
from posekd.synthdata import (
    FLIP_PAIRS,
    JOINT_NAMES,
    SceneConfig,
    SchemaError,
    generate_scene,
    make_st_input,
    read_dataset,
    render_gt_heatmaps,
    write_dataset,
)
from posekd.synthtypes import Keypoint, PoseInstance, instance_scale


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(height=12, width=48)
    with pytest.raises(ValueError):
        SceneConfig(height=63, width=48)  # not a stride multiple
    with pytest.raises(ValueError):
        SceneConfig(sigma=0.0)
    with pytest.raises(ValueError):
        SceneConfig(min_instances=2, max_instances=1)
    with pytest.raises(ValueError):
        SceneConfig(overlap_prob=1.5)


def test_generation_is_deterministic(small_cfg):
    a = generate_scene(small_cfg, 123, 5)
    b = generate_scene(small_cfg, 123, 5)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert len(a.instances) == len(b.instances)
    for ia, ib in zip(a.instances, b.instances):
        for ka, kb in zip(ia.keypoints, ib.keypoints):
            assert (ka.x, ka.y, ka.v) == (kb.x, kb.y, kb.v)
    c = generate_scene(small_cfg, 124, 5)
    assert not np.array_equal(a.image, c.image)


def test_image_and_mask_invariants(small_cfg):
    for i in range(20):
        s = generate_scene(small_cfg, 50, i)
        assert s.image.shape == (3, small_cfg.height, small_cfg.width)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.mask.dtype == np.uint8
        assert set(np.unique(s.mask)) <= {0, 1}
        assert 1 <= len(s.instances) <= small_cfg.max_instances


def test_visible_keypoints_lie_on_mask(small_cfg):
    # v=2 means "on its own silhouette", which is a subset of the union mask
    for i in range(100):
        s = generate_scene(small_cfg, 99, i)
        for inst in s.instances:
            for kp in inst.keypoints:
                if kp.v == 2:
                    px = int(np.clip(round(kp.x), 0, small_cfg.width - 1))
                    py = int(np.clip(round(kp.y), 0, small_cfg.height - 1))
                    assert s.mask[py, px] == 1


def test_occluded_keypoints_keep_v1(small_cfg):
    # overlap_prob 1 forces two-figure scenes to overlap; occlusion shows as v=1
    cfg = SceneConfig(height=small_cfg.height, width=small_cfg.width,
                      min_instances=2, max_instances=2, overlap_prob=1.0)
    seen_occluded = 0
    for i in range(30):
        s = generate_scene(cfg, 7, i)
        assert len(s.instances) == 2
        for inst in s.instances:
            seen_occluded += sum(1 for kp in inst.keypoints if kp.v == 1)
    assert seen_occluded > 0


def test_render_peak_is_one_at_nearest_cell():
    inst = PoseInstance(
        keypoints=[Keypoint(10.0, 6.0, 2)] + [Keypoint(0.0, 0.0, 0)] * 4,
        scale=5.0,
        instance_id=0,
    )
    hs = render_gt_heatmaps(inst, (16, 12), sigma=1.5, stride=2)
    ch = hs.values[0]
    assert ch[3, 5] == 1.0  # (10, 6) / stride 2 -> cell (r=3, c=5)
    assert ch.max() == 1.0
    for k in range(1, 5):
        assert hs.values[k].sum() == 0.0


def test_render_value_at_sigma_sqrt2_is_inv_e():
    inst = PoseInstance(
        keypoints=[Keypoint(8.0, 8.0, 2)] + [Keypoint(0.0, 0.0, 0)] * 4,
        scale=5.0,
        instance_id=0,
    )
    sigma = 2.0
    hs = render_gt_heatmaps(inst, (16, 16), sigma=sigma, stride=1)
    ch = hs.values[0]
    # distance sigma*sqrt(2) has squared distance 2*sigma^2: cells (8+2, 8+2)
    np.testing.assert_allclose(ch[10, 10], np.exp(-1.0), atol=1e-12)
    np.testing.assert_allclose(ch[8, 10], np.exp(-(4.0) / (2 * sigma * sigma)), atol=1e-12)


def test_render_symmetry_about_grid_center():
    inst = PoseInstance(
        keypoints=[Keypoint(6.0, 6.0, 2)] + [Keypoint(0.0, 0.0, 0)] * 4,
        scale=5.0,
        instance_id=0,
    )
    ch = render_gt_heatmaps(inst, (13, 13), sigma=1.5, stride=1).values[0]
    np.testing.assert_allclose(ch, ch[::-1, :], atol=1e-15)
    np.testing.assert_allclose(ch, ch[:, ::-1], atol=1e-15)


def test_render_rejects_bad_sigma():
    inst = PoseInstance(keypoints=[Keypoint(1.0, 1.0, 2)], scale=1.0, instance_id=0)
    with pytest.raises(ValueError):
        render_gt_heatmaps(inst, (8, 8), sigma=-1.0)


def test_sample_heatmaps_match_rendering(small_cfg):
    s = generate_scene(small_cfg, 11, 0)
    for inst, hs in zip(s.instances, s.heatmaps):
        again = render_gt_heatmaps(inst, small_cfg.heatmap_size, small_cfg.sigma,
                                   small_cfg.stride)
        np.testing.assert_array_equal(hs.values, again.values)
        for k, kp in enumerate(inst.keypoints):
            if kp.v > 0:
                assert hs.values[k].max() == 1.0


def test_make_st_input_stacks_mask(small_cfg):
    s = generate_scene(small_cfg, 3, 0)
    x = make_st_input(s)
    assert x.shape == (4, small_cfg.height, small_cfg.width)
    np.testing.assert_array_equal(x[:3], s.image)
    np.testing.assert_array_equal(x[3], s.mask.astype(np.float64))


def test_instance_scale_is_bbox_sqrt():
    kps = [Keypoint(0.0, 0.0, 2), Keypoint(4.0, 3.0, 2), Keypoint(2.0, 1.0, 1),
           Keypoint(100.0, 100.0, 0)]  # v=0 excluded from the box
    np.testing.assert_allclose(instance_scale(kps), np.sqrt(12.0), atol=1e-12)
    assert instance_scale([Keypoint(1.0, 1.0, 0)]) == 0.0


def test_dataset_round_trip(tmp_path, small_cfg):
    path = str(tmp_path / "data.jsonl")
    written = write_dataset(small_cfg, 5, 77, path)
    assert len(written) == 5
    loaded = read_dataset(path)
    assert len(loaded) == 5
    for a, b in zip(written, loaded):
        assert a.index == b.index
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert len(a.instances) == len(b.instances)
        for ia, ib in zip(a.instances, b.instances):
            assert ia.instance_id == ib.instance_id
            np.testing.assert_allclose(ia.scale, ib.scale, atol=0)
            for ka, kb in zip(ia.keypoints, ib.keypoints):
                assert (ka.x, ka.y, ka.v) == (kb.x, kb.y, kb.v)
        for ha, hb in zip(a.heatmaps, b.heatmaps):
            np.testing.assert_array_equal(ha.values, hb.values)


def test_dataset_files_byte_identical(tmp_path, small_cfg):
    p1, p2 = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    write_dataset(small_cfg, 4, 5, p1)
    write_dataset(small_cfg, 4, 5, p2)
    with open(p1, "rb") as f:
        one = f.read()
    with open(p2, "rb") as f:
        two = f.read()
    assert one == two


def test_empty_dataset_round_trip(tmp_path, small_cfg):
    path = str(tmp_path / "empty.jsonl")
    assert write_dataset(small_cfg, 0, 1, path) == []
    assert read_dataset(path) == []


def test_malformed_record_names_line(tmp_path):
    path = str(tmp_path / "bad.jsonl")
    with open(path, "w") as f:
        f.write('{"index": 0}\n')
    with pytest.raises(SchemaError, match="bad.jsonl:1"):
        read_dataset(path)
    with open(path, "w") as f:
        f.write("not json\n")
    with pytest.raises(SchemaError, match=":1"):
        read_dataset(path)


def test_wrong_joint_count_rejected(tmp_path, small_cfg):
    path = str(tmp_path / "data.jsonl")
    write_dataset(small_cfg, 1, 5, path)
    with open(path) as f:
        text = f.read()
    with open(path, "w") as f:
        f.write(text.replace('"joint_count": 5', '"joint_count": 7'))
    with pytest.raises(SchemaError, match="joint_count"):
        read_dataset(path)


def test_flip_pairs_cover_lr_joints():
    assert len(JOINT_NAMES) == 5
    names = dict(enumerate(JOINT_NAMES))
    for a, b in FLIP_PAIRS:
        assert names[a].rsplit("_", 1)[0] == names[b].rsplit("_", 1)[0]
        assert names[a] != names[b]
