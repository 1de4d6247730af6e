import numpy as np
import pytest

from densedistill.masks import (
    BoundingBox,
    CellRect,
    build_category_masks,
    central_slot,
    marginal_slot,
    project_box_to_grid,
    split_central_marginal,
    write_mask_pgms,
)
from densedistill.scenes import SceneSpec, generate_scene


def box(x1, y1, x2, y2, cat=1):
    return BoundingBox(x1, y1, x2, y2, cat)


# ------------------------------------------------------ project_box_to_grid


def test_project_exact_alignment_single_cell():
    rect = project_box_to_grid(box(0, 0, 8, 8), 8, (8, 8))
    assert rect == CellRect(0, 0, 1, 1)
    assert rect.num_cells == 1


def test_project_floor_ceil_expansion():
    rect = project_box_to_grid(box(3, 3, 20, 20), 8, (8, 8))
    assert rect == CellRect(0, 0, 3, 3)
    assert rect.num_cells == 9


def test_project_out_of_range_is_empty():
    assert project_box_to_grid(box(100, 100, 120, 120), 8, (8, 8)) is None


def test_project_partial_overlap_claims_a_cell():
    rect = project_box_to_grid(box(-5, -5, 1, 1), 8, (8, 8))
    assert rect == CellRect(0, 0, 1, 1)


def test_project_clamps_to_grid_edge():
    rect = project_box_to_grid(box(40, 40, 64, 64), 8, (8, 8))
    assert rect == CellRect(5, 5, 8, 8)


# --------------------------------------------------- split_central_marginal


def test_split_4x4_ring_and_interior():
    central, marginal = split_central_marginal(CellRect(0, 0, 4, 4))
    assert len(marginal) == 12 and len(central) == 4
    assert central == {(1, 1), (1, 2), (2, 1), (2, 2)}


def test_split_3x3():
    central, marginal = split_central_marginal(CellRect(2, 2, 5, 5))
    assert len(marginal) == 8 and central == {(3, 3)}


def test_split_thin_rectangle_all_marginal():
    central, marginal = split_central_marginal(CellRect(0, 0, 5, 1))
    assert central == set() and len(marginal) == 5


def test_split_2xn_all_marginal():
    central, marginal = split_central_marginal(CellRect(0, 0, 2, 6))
    assert central == set() and len(marginal) == 12


def test_split_disjoint_and_covering():
    rect = CellRect(1, 2, 6, 9)
    central, marginal = split_central_marginal(rect)
    assert not central & marginal
    assert len(central) + len(marginal) == rect.num_cells


# ----------------------------------------------------- build_category_masks


class FakeSample:
    def __init__(self, boxes):
        self.boxes = boxes


def test_empty_batch_is_all_background():
    maskset = build_category_masks([], 8, (8, 8), 2)
    bg = maskset.background_slot
    assert bg == 5
    np.testing.assert_array_equal(maskset.masks[bg], np.ones((8, 8)))
    for slot in range(1, bg):
        assert maskset.masks[slot].sum() == 0
        assert not maskset.present[slot]
    assert maskset.present[bg]


def test_single_3x3_instance_counts():
    # a 3x3-cell instance: 1 central, 8 marginal, 55 background cells
    sample = FakeSample([box(8, 8, 32, 32, cat=1)])
    maskset = build_category_masks([sample], 8, (8, 8), 2)
    assert maskset.masks[central_slot(1)].sum() == 1
    assert maskset.masks[marginal_slot(1)].sum() == 8
    assert maskset.masks[maskset.background_slot].sum() == 55
    assert not maskset.present[central_slot(2)]
    assert not maskset.present[marginal_slot(2)]


def test_overlapping_same_category_or_resolution():
    boxes = [box(0, 0, 24, 24, 1), box(16, 16, 40, 40, 1)]
    maskset = build_category_masks([FakeSample(boxes)], 8, (8, 8), 1)

    # brute-force cellwise OR oracle
    expect_central = np.zeros((8, 8))
    expect_marginal = np.zeros((8, 8))
    for b in boxes:
        rect = project_box_to_grid(b, 8, (8, 8))
        central, marginal = split_central_marginal(rect)
        for y, x in central:
            expect_central[y, x] = 1
        for y, x in marginal:
            expect_marginal[y, x] = 1
    np.testing.assert_array_equal(maskset.masks[1], expect_central)
    np.testing.assert_array_equal(maskset.masks[2], expect_marginal)


def test_category_out_of_range_rejected():
    with pytest.raises(ValueError, match="category"):
        build_category_masks([FakeSample([box(0, 0, 8, 8, cat=4)])], 8, (8, 8), 3)


def test_masks_cover_and_background_disjoint():
    spec = SceneSpec(seed=21, objects_per_image=(2, 4))
    for i in range(20):
        sample = generate_scene(spec, i)
        for stride in (4, 8, 16):
            grid = (64 // stride, 64 // stride)
            maskset = build_category_masks([sample], stride, grid, spec.num_categories)
            union = np.zeros(grid, dtype=bool)
            bg = maskset.background_slot
            for slot in range(1, bg):
                union |= maskset.masks[slot] > 0
            np.testing.assert_array_equal(maskset.masks[bg], (~union).astype(float))
            for slot in range(1, bg):
                assert not np.any((maskset.masks[slot] > 0) & (maskset.masks[bg] > 0))


def test_instance_central_marginal_disjoint_and_area():
    sample = FakeSample([box(4, 4, 44, 36, cat=2)])
    maskset = build_category_masks([sample], 4, (16, 16), 2)
    central = maskset.masks[central_slot(2)]
    marginal = maskset.masks[marginal_slot(2)]
    assert not np.any((central > 0) & (marginal > 0))
    rect = project_box_to_grid(sample.boxes[0], 4, (16, 16))
    assert central.sum() + marginal.sum() == rect.num_cells


def test_batch_masks_or_across_images():
    a = FakeSample([box(0, 0, 16, 16, 1)])
    b = FakeSample([box(32, 32, 48, 48, 1)])
    merged = build_category_masks([a, b], 8, (8, 8), 1)
    alone_a = build_category_masks([a], 8, (8, 8), 1)
    alone_b = build_category_masks([b], 8, (8, 8), 1)
    for slot in (1, 2):
        np.testing.assert_array_equal(
            merged.masks[slot],
            np.maximum(alone_a.masks[slot], alone_b.masks[slot]),
        )


def test_boxes_override_filters_instances():
    sample = FakeSample([box(0, 0, 16, 16, 1), box(32, 32, 48, 48, 2)])
    maskset = build_category_masks([sample], 8, (8, 8), 2, boxes=[sample.boxes[0]])
    assert maskset.present[central_slot(1)] or maskset.present[marginal_slot(1)]
    assert not maskset.present[marginal_slot(2)]


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        box(5, 5, 5, 10)


def test_pgm_dump(tmp_path):
    maskset = build_category_masks([FakeSample([box(8, 8, 32, 32, 1)])], 8, (8, 8), 1)
    paths = write_mask_pgms(maskset, str(tmp_path))
    assert len(paths) == 3
    header = open(paths[0]).read().splitlines()
    assert header[0] == "P2" and header[1] == "8 8" and header[2] == "255"
