import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advseg.cascade import (
    BBox,
    MONOLITHIC,
    PLANS,
    STAGE1,
    STAGE2,
    STAGE3,
    InvalidLabelError,
    ShapeMismatchError,
    cascade_predict,
    crop,
    fuse,
    ground_truth_boxes,
    locate_bbox,
    oracle_trace,
    relabel,
    run_cascade,
)
from advseg.dataio import Sample
from advseg.labels import BG, GM, B, WM, L, CSF, V, C, BS, N_LABELS, ROI_IDS


def test_plan_sizes():
    assert [p.n_classes for p in (MONOLITHIC,) + PLANS] == [9, 5, 5, 3]
    assert STAGE1.names[STAGE1.locating] == "LOC1"
    assert STAGE2.names[STAGE2.locating] == "LOC2"
    assert STAGE3.locating is None


def test_every_roi_is_owned_by_exactly_one_stage():
    owners = {}
    for plan in PLANS:
        for full in ROI_IDS:
            name = plan.names[plan.mapping[full]]
            if name not in ("BG", "OTHER") and not name.startswith("LOC"):
                owners.setdefault(full, []).append(plan.stage)
    assert sorted(owners) == sorted(ROI_IDS)
    assert all(len(v) == 1 for v in owners.values())


def test_relabel_examples():
    assert not relabel(STAGE1, np.zeros((3, 3), dtype=np.uint8)).any()
    m = np.zeros((3, 3), dtype=np.uint8)
    m[1, 1] = GM
    out = relabel(STAGE1, m)
    assert out[1, 1] == STAGE1.locating and out.sum() == STAGE1.locating
    with pytest.raises(InvalidLabelError):
        relabel(STAGE1, np.array([[9]]))


def test_locate_examples():
    assert locate_bbox(np.zeros((5, 5)), 1) is None
    m = np.zeros((10, 10), dtype=int)
    m[3, 4] = 1
    assert locate_bbox(m, 1, margin=2, align=1) == BBox(1, 2, 6, 7)


def test_alignment_growth_is_symmetric_and_clipped():
    m = np.zeros((16, 16), dtype=int)
    m[0, 5:8] = 1
    box = locate_bbox(m, 1, margin=0, align=4)
    assert box.aligned(4)
    assert box.y0 == 0 and box.height == 4
    assert (box.x0, box.x1) == (5, 9)  # odd deficit goes to the far side


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 3), st.sampled_from([1, 2, 4]))
def test_box_covers_blob_and_is_tight(seed, margin, align):
    rng = np.random.default_rng(seed)
    m = (rng.random((20, 24)) < rng.uniform(0.01, 0.2)).astype(int)
    box = locate_bbox(m, 1, margin, align)
    if not m.any():
        assert box is None
        return
    ys, xs = np.nonzero(m)
    assert box.y0 <= ys.min() and ys.max() < box.y1 and box.x0 <= xs.min() and xs.max() < box.x1
    assert box.aligned(align) or box.height == 20 or box.width == 24
    tight = locate_bbox(m, 1, 0, 1)
    assert tight == BBox(ys.min(), xs.min(), ys.max() + 1, xs.max() + 1)
    for shrunk in (BBox(tight.y0 + 1, tight.x0, tight.y1, tight.x1) if tight.height > 1 else None,
                   BBox(tight.y0, tight.x0, tight.y1 - 1, tight.x1) if tight.height > 1 else None,
                   BBox(tight.y0, tight.x0 + 1, tight.y1, tight.x1) if tight.width > 1 else None,
                   BBox(tight.y0, tight.x0, tight.y1, tight.x1 - 1) if tight.width > 1 else None):
        if shrunk is not None:
            inside = np.zeros_like(m, dtype=bool)
            inside[shrunk.slices] = True
            assert (m.astype(bool) & ~inside).any()


def test_crop_identity_and_paste_back():
    rng = np.random.default_rng(0)
    s = Sample(rng.uniform(0, 1, (3, 8, 8)).astype(np.float32), rng.integers(0, 9, (8, 8)).astype(np.uint8))
    assert crop(s, BBox(0, 0, 8, 8)) == s
    box = BBox(2, 1, 6, 7)
    part = crop(s, box)
    canvas = np.zeros_like(s.labels)
    canvas[box.slices] = part.labels
    np.testing.assert_array_equal(canvas[box.slices], s.labels[box.slices])
    with pytest.raises(IndexError):
        crop(s, BBox(0, 0, 9, 8))


def test_degenerate_box_is_rejected():
    with pytest.raises(ValueError):
        BBox(2, 2, 2, 5)


def test_fuse_background_only():
    out = fuse(np.zeros((6, 6), dtype=np.uint8), None, None, None, None, (6, 6))
    assert not out.any()


def test_fuse_deeper_stage_wins():
    s1 = np.full((4, 4), STAGE1.locating, dtype=np.uint8)
    box = BBox(0, 0, 4, 4)
    s2 = np.full((4, 4), STAGE2.names.index("GM"), dtype=np.uint8)
    s2[1, 1] = 0
    out = fuse(s1, box, s2, None, None, (4, 4))
    assert out[1, 1] == BG and out[0, 0] == GM
    with pytest.raises(ShapeMismatchError):
        fuse(s1, BBox(0, 0, 2, 2), s2, None, None, (4, 4))


def random_full_map(rng, size=16):
    return rng.integers(0, N_LABELS, (size, size)).astype(np.uint8)


def test_round_trip_random_maps():
    rng = np.random.default_rng(0)
    for _ in range(200):
        labels = random_full_map(rng)
        np.testing.assert_array_equal(oracle_trace(labels, margin=2, align=4).labels, labels)


def test_oracle_stages_reproduce_ground_truth():
    rng = np.random.default_rng(1)
    labels = random_full_map(rng)
    box2, box3 = ground_truth_boxes(labels, margin=2, align=1)

    def stage(plan, box):
        def run(image):
            region = labels if box is None else labels[box.slices]
            assert image.shape[-2:] == region.shape
            lab = relabel(plan, region)
            return lab, np.ones(plan.n_classes - 1, dtype=bool)
        return run

    stages = [stage(STAGE1, None), stage(STAGE2, box2), stage(STAGE3, box3)]
    image = np.zeros((3, 16, 16), dtype=np.float32)
    trace = cascade_predict(stages, image, margin=2, align=1)
    np.testing.assert_array_equal(trace.labels, labels)
    assert trace.invoked == 3


def test_all_background_stage_one_short_circuits():
    calls = []

    def s1(image):
        return np.zeros(image.shape[-2:], dtype=np.uint8), np.zeros(4, dtype=bool)

    def never(image):
        calls.append(image.shape)
        raise AssertionError("deeper stage invoked")

    out = run_cascade(s1, never, never, np.zeros((3, 8, 8), dtype=np.float32))
    assert not out.any() and not calls


def test_trained_parameters_produce_valid_labels():
    from advseg.segnet import NetSpec, init_params

    stages = [init_params(NetSpec(stage_classes=p.n_classes, base_width=2, depth=1), seed=i)
              for i, p in enumerate(PLANS)]
    image = np.random.default_rng(0).uniform(0, 1, (3, 16, 16)).astype(np.float32)
    out = run_cascade(*stages, image)
    assert out.shape == (16, 16) and out.max() < N_LABELS
