"""Three-stage coarse-to-fine label taxonomy, locating boxes, crops and fusion.

Stage 1 segments the large structures (CSF, cerebellum, brain stem) plus a
merged locating class LOC1.  Stage 2 runs on the LOC1 box and separates GM, WM
and lesions from a second locating class LOC2 (basal ganglia + ventricles),
whose box feeds stage 3.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .dataio import Sample
from .labels import BG, GM, B, WM, L, CSF, V, C, BS, N_LABELS, NAMES, ROI_IDS
from .segnet import forward, predict_labelmap, predict_presence


@dataclass(frozen=True)
class StagePlan:
    stage: int
    names: tuple[str, ...]  # stage-label names, index = stage id
    mapping: tuple[int, ...]  # full label -> stage label
    locating: int | None

    @property
    def n_classes(self) -> int:
        return len(self.names)

    @property
    def foreground(self) -> tuple[int, ...]:
        return tuple(range(1, self.n_classes))

    def table(self) -> str:
        rows = [f"stage {self.stage}: K={self.n_classes}, locating="
                f"{self.names[self.locating] if self.locating is not None else '-'}"]
        for full, st in enumerate(self.mapping):
            rows.append(f"  {NAMES[full]:>4} -> {self.names[st]}")
        return "\n".join(rows)


def _plan(stage, names, assign, locating=None, default=None):
    idx = {n: i for i, n in enumerate(names)}
    mapping = []
    for full in range(N_LABELS):
        target = assign.get(full, default)
        if target is None:
            raise ValueError(f"stage {stage} leaves {NAMES[full]} unmapped")
        mapping.append(idx[target])
    return StagePlan(stage, tuple(names), tuple(mapping), None if locating is None else idx[locating])


MONOLITHIC = _plan(0, NAMES, {i: NAMES[i] for i in range(N_LABELS)})
STAGE1 = _plan(
    1, ("BG", "CSF", "C", "BS", "LOC1"),
    {BG: "BG", CSF: "CSF", C: "C", BS: "BS", GM: "LOC1", WM: "LOC1", L: "LOC1", B: "LOC1", V: "LOC1"},
    locating="LOC1",
)
STAGE2 = _plan(
    2, ("OTHER", "GM", "WM", "L", "LOC2"),
    {GM: "GM", WM: "WM", L: "L", B: "LOC2", V: "LOC2"},
    locating="LOC2", default="OTHER",
)
STAGE3 = _plan(3, ("OTHER", "B", "V"), {B: "B", V: "V"}, default="OTHER")
PLANS = (STAGE1, STAGE2, STAGE3)


class InvalidLabelError(ValueError):
    pass


def relabel(plan: StagePlan, full: np.ndarray) -> np.ndarray:
    full = np.asarray(full)
    bad = full >= N_LABELS
    if bad.any():
        y, x = np.argwhere(bad)[0][-2:]
        raise InvalidLabelError(f"label {int(full[..., y, x].flat[0])} at ({y}, {x}) is not a valid LabelId")
    return np.asarray(plan.mapping, dtype=np.uint8)[full.astype(np.intp)]


def stage_presence(plan: StagePlan, stage_labels: np.ndarray) -> np.ndarray:
    counts = np.bincount(np.asarray(stage_labels).ravel().astype(np.intp), minlength=plan.n_classes)
    return counts[1:plan.n_classes] > 0


@dataclass(frozen=True)
class BBox:
    """Half-open pixel rectangle [y0, y1) x [x0, x1)."""

    y0: int
    x0: int
    y1: int
    x1: int

    def __post_init__(self):
        if not (0 <= self.y0 < self.y1 and 0 <= self.x0 < self.x1):
            raise ValueError(f"degenerate box {self}")

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def within(self, h: int, w: int) -> bool:
        return self.y1 <= h and self.x1 <= w

    def contains(self, other: "BBox") -> bool:
        return self.y0 <= other.y0 and self.x0 <= other.x0 and other.y1 <= self.y1 and other.x1 <= self.x1

    def shift(self, dy: int, dx: int) -> "BBox":
        return BBox(self.y0 + dy, self.x0 + dx, self.y1 + dy, self.x1 + dx)

    def aligned(self, align: int) -> bool:
        return self.height % align == 0 and self.width % align == 0


def _grow(lo: int, hi: int, extent: int, align: int) -> tuple[int, int]:
    need = (-(hi - lo)) % align
    if hi - lo + need > extent:
        raise ValueError(f"extent {extent} cannot hold an aligned span")
    lo -= need // 2
    hi += need - need // 2
    if lo < 0:
        hi -= lo
        lo = 0
    if hi > extent:
        lo -= hi - extent
        hi = extent
    return lo, hi


def locate_bbox(stage_map: np.ndarray, locating_id: int, margin: int = 4, align: int = 1) -> BBox | None:
    """Box around every ``locating_id`` pixel, padded by ``margin`` and grown to ``align``."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    h, w = stage_map.shape
    ys, xs = np.nonzero(stage_map == locating_id)
    if ys.size == 0:
        return None
    y0, y1 = max(int(ys.min()) - margin, 0), min(int(ys.max()) + 1 + margin, h)
    x0, x1 = max(int(xs.min()) - margin, 0), min(int(xs.max()) + 1 + margin, w)
    y0, y1 = _grow(y0, y1, h, align)
    x0, x1 = _grow(x0, x1, w, align)
    return BBox(y0, x0, y1, x1)


def crop(sample: Sample, box: BBox) -> Sample:
    h, w = sample.labels.shape
    if not box.within(h, w):
        raise IndexError(f"box {box} outside {h}x{w} sample")
    ys, xs = box.slices
    return Sample(sample.image[:, ys, xs], sample.labels[ys, xs])


class ShapeMismatchError(ValueError):
    pass


def fuse(stage1, box2, stage2, box3, stage3, size) -> np.ndarray:
    """Compose stage verdicts into one full-taxonomy map; deeper stages win."""
    h, w = size
    stage1 = np.asarray(stage1)
    if stage1.shape != (h, w):
        raise ShapeMismatchError(f"stage-1 map {stage1.shape} != {(h, w)}")
    s1_to_full = np.array([BG, CSF, C, BS, BG], dtype=np.uint8)
    out = s1_to_full[stage1]
    loc1 = stage1 == STAGE1.locating
    loc2 = np.zeros((h, w), dtype=bool)
    if box2 is not None:
        stage2 = np.asarray(stage2)
        if stage2.shape != (box2.height, box2.width):
            raise ShapeMismatchError(f"stage-2 map {stage2.shape} != box {box2}")
        s2_to_full = np.array([BG, GM, WM, L, BG], dtype=np.uint8)
        ys, xs = box2.slices
        inside = loc1[ys, xs]
        region = out[ys, xs]
        region[inside] = s2_to_full[stage2[inside]]
        loc2[ys, xs] = inside & (stage2 == STAGE2.locating)
    if box3 is not None:
        stage3 = np.asarray(stage3)
        if stage3.shape != (box3.height, box3.width):
            raise ShapeMismatchError(f"stage-3 map {stage3.shape} != box {box3}")
        s3_to_full = np.array([BG, B, V], dtype=np.uint8)
        ys, xs = box3.slices
        inside = loc2[ys, xs]
        region = out[ys, xs]
        region[inside] = s3_to_full[stage3[inside]]
    return out


def ground_truth_boxes(labels: np.ndarray, margin: int = 4, align: int = 4):
    """Teacher-forced (box2, box3) in full-image coordinates; either may be None."""
    box2 = locate_bbox(relabel(STAGE1, labels), STAGE1.locating, margin, align)
    if box2 is None:
        return None, None
    inner = relabel(STAGE2, labels[box2.slices])
    box3 = locate_bbox(inner, STAGE2.locating, margin, align)
    return box2, None if box3 is None else box3.shift(box2.y0, box2.x0)


# A stage predictor maps an image [C,h,w] to (stage LabelMap, presence booleans).
Predictor = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class CascadeTrace:
    labels: np.ndarray
    box2: BBox | None
    box3: BBox | None
    stage_maps: list
    stage_presence: list
    invoked: int


def cascade_predict(stages: Sequence[Predictor], image: np.ndarray, margin: int = 4,
                    align: int | Sequence[int] = 4) -> CascadeTrace:
    """Run stage 1 on the full image, then deeper stages on their predicted boxes."""
    aligns = [align] * 3 if isinstance(align, int) else list(align)
    h, w = image.shape[-2:]
    s1, p1 = stages[0](image)
    maps, pres = [s1, None, None], [p1, None, None]
    box2 = box3 = None
    invoked = 1
    box2 = locate_bbox(s1, STAGE1.locating, margin, aligns[1])
    if box2 is not None:
        s2, p2 = stages[1](image[:, box2.y0:box2.y1, box2.x0:box2.x1])
        maps[1], pres[1] = s2, p2
        invoked = 2
        inner = locate_bbox(s2, STAGE2.locating, margin, aligns[2])
        if inner is not None:
            box3 = inner.shift(box2.y0, box2.x0)
            s3, p3 = stages[2](image[:, box3.y0:box3.y1, box3.x0:box3.x1])
            maps[2], pres[2] = s3, p3
            invoked = 3
    labels = fuse(s1, box2, maps[1], box3, maps[2], (h, w))
    return CascadeTrace(labels, box2, box3, maps, pres, invoked)


def oracle_trace(labels: np.ndarray, margin: int = 4, align: int = 4) -> CascadeTrace:
    """The cascade run with ground truth standing in for every stage network."""
    labels = np.asarray(labels)
    s1 = relabel(STAGE1, labels)
    box2, box3 = ground_truth_boxes(labels, margin, align)
    maps = [s1, None, None]
    if box2 is not None:
        maps[1] = relabel(STAGE2, labels[box2.slices])
    if box3 is not None:
        maps[2] = relabel(STAGE3, labels[box3.slices])
    pres = [None if m is None else stage_presence(plan, m) for plan, m in zip(PLANS, maps)]
    fused = fuse(s1, box2, maps[1], box3, maps[2], labels.shape)
    return CascadeTrace(fused, box2, box3, maps, pres, sum(m is not None for m in maps))


def params_predictor(params) -> Predictor:
    def run(image):
        with ad.no_tape():
            out = forward(params, ad.Tensor(image))
        return predict_labelmap(out.seg_logits), predict_presence(out.presence_logits)

    return run


def run_cascade(params1, params2, params3, image, margin: int = 4) -> np.ndarray:
    stages = [p if callable(p) else params_predictor(p) for p in (params1, params2, params3)]
    aligns = [1] + [p.spec.align if not callable(p) else 1 for p in (params2, params3)]
    return cascade_predict(stages, np.asarray(image.data if hasattr(image, "data") else image),
                           margin, aligns).labels


def cascade_presence(trace: CascadeTrace) -> np.ndarray:
    """Per-ROI presence assembled from the stage heads (absent if a stage was skipped)."""
    out = np.zeros(8, dtype=bool)
    roi_pos = {lab: i for i, lab in enumerate(ROI_IDS)}
    p1, p2, p3 = trace.stage_presence
    for stage_id, full in ((1, CSF), (2, C), (3, BS)):
        out[roi_pos[full]] = bool(p1[stage_id - 1])
    if p2 is not None:
        for stage_id, full in ((1, GM), (2, WM), (3, L)):
            out[roi_pos[full]] = bool(p2[stage_id - 1])
    if p3 is not None:
        for stage_id, full in ((1, B), (2, V)):
            out[roi_pos[full]] = bool(p3[stage_id - 1])
    return out
