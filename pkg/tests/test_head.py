import numpy as np
import pytest

from densedistill.autograd import Tensor, finite_difference_check
from densedistill.head import (
    Detection,
    HeadConfig,
    assign_level,
    decode_predictions,
    detection_loss,
    evaluate_toy_ap,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from densedistill.masks import BoundingBox
from densedistill.scenes import SceneSample, SceneSpec, generate_scene

RNG = np.random.default_rng(77)


@pytest.fixture
def small_config():
    return HeadConfig(num_levels=3, channels=6, num_convs=2, num_categories=3, backbone_channels=6)


@pytest.fixture
def params(small_config):
    return init_params(small_config, np.random.default_rng(0))


def blank_sample(h=64, w=64, boxes=()):
    image = np.full((3, h, w), 0.5)
    return SceneSample(image=image, boxes=list(boxes), labels=[b.category for b in boxes])


# ------------------------------------------------------------------ forward


def test_forward_feature_pyramid_sizes(small_config, params):
    out = forward(Tensor(RNG.random((3, 64, 64))), small_config, params)
    assert [tuple(t.shape[-2:]) for t in out.cls_logits] == [(16, 16), (8, 8), (4, 4)]
    assert out.strides == [4, 8, 16]


def test_forward_records_every_branch_feature(small_config, params):
    out = forward(Tensor(RNG.random((3, 64, 64))), small_config, params)
    assert len(out.cls_features) == small_config.num_convs * small_config.num_levels == 6
    assert len(out.box_features) == 6
    assert set(out.cls_features) == {(d, k) for d in range(2) for k in range(3)}


def test_forward_zero_params_constant_logits(small_config, params):
    zeros = {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}
    out = forward(Tensor(RNG.random((3, 64, 64))), small_config, zeros)
    for logits in out.cls_logits:
        assert np.ptp(logits.data) == 0.0


def test_forward_rejects_indivisible_size(small_config, params):
    with pytest.raises(ValueError, match="divisible"):
        forward(Tensor(RNG.random((3, 60, 64))), small_config, params)


def test_forward_deterministic(small_config, params):
    image = Tensor(RNG.random((3, 64, 64)))
    a = forward(image, small_config, params)
    b = forward(image, small_config, params)
    for t1, t2 in zip(a.cls_logits, b.cls_logits):
        assert np.array_equal(t1.data, t2.data)


def test_forward_batched_matches_single(small_config, params):
    images = RNG.random((2, 3, 64, 64))
    batch = forward(Tensor(images), small_config, params)
    single = forward(Tensor(images[1]), small_config, params)
    np.testing.assert_allclose(batch.cls_logits[0].data[1], single.cls_logits[0].data, atol=1e-11)
    np.testing.assert_allclose(batch.box_features[(1, 2)].data[1], single.box_features[(1, 2)].data, atol=1e-11)


def test_identical_params_identical_outputs(small_config, params):
    clones = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}
    image = Tensor(RNG.random((3, 64, 64)))
    a = forward(image, small_config, params)
    b = forward(image, small_config, clones)
    for key in a.cls_features:
        assert np.array_equal(a.cls_features[key].data, b.cls_features[key].data)


# ----------------------------------------------------------- detection loss


def test_assign_level_by_longer_side():
    strides = [4, 8, 16]
    assert assign_level(BoundingBox(0, 0, 16, 16, 1), strides) == 0
    assert assign_level(BoundingBox(0, 0, 40, 20, 1), strides) == 1
    assert assign_level(BoundingBox(0, 0, 63, 63, 1), strides) == 1
    assert assign_level(BoundingBox(0, 0, 64, 64, 1), strides) == 2


def test_detection_loss_no_objects_is_background_only(small_config, params):
    sample = blank_sample()
    out = forward(Tensor(sample.image), small_config, params)
    loss = detection_loss(out, [sample], small_config)
    assert loss.item() > 0.0
    # with no positives the regression residual is identically zero:
    # recompute with box deltas shifted, the loss must not change
    shifted = forward(Tensor(sample.image), small_config, params)
    shifted.box_deltas = [t + 5.0 for t in shifted.box_deltas]
    assert detection_loss(shifted, [sample], small_config).item() == pytest.approx(loss.item())


def test_detection_positive_count_centered_box(small_config, params):
    # 16x16 box centered in 64x64: longer side 16 -> stride 4; cell centers
    # at 4i+2 inside (24, 40) are i in {6,7,8,9} per axis -> 16 positives
    sample = blank_sample(boxes=[BoundingBox(24, 24, 40, 40, 1)])
    from densedistill.head import _build_targets

    cls_t, pos_t, box_t = _build_targets([sample], small_config, [(16, 16), (8, 8), (4, 4)])
    assert pos_t[0].sum() == 16
    assert pos_t[1].sum() == 0 and pos_t[2].sum() == 0
    ys, xs = np.nonzero(pos_t[0][0, 0])
    assert set(ys) == {6, 7, 8, 9} and set(xs) == {6, 7, 8, 9}


def test_detection_loss_nonnegative_and_decreases_for_perfect_logits(small_config, params):
    sample = blank_sample(boxes=[BoundingBox(24, 24, 40, 40, 2)])
    out = forward(Tensor(sample.image), small_config, params)
    loss_random = detection_loss(out, [sample], small_config)
    assert loss_random.item() >= 0.0

    from densedistill.head import _build_targets

    grids = [tuple(t.shape[-2:]) for t in out.cls_logits]
    cls_t, pos_t, box_t = _build_targets([sample], small_config, grids)
    perfect = forward(Tensor(sample.image), small_config, params)
    perfect.cls_logits = [Tensor((2.0 * cls_t[k][0] - 1.0) * 40.0) for k in range(3)]
    perfect.box_deltas = [Tensor(box_t[k][0]) for k in range(3)]
    assert detection_loss(perfect, [sample], small_config).item() == pytest.approx(0.0, abs=1e-12)


def test_detection_loss_gradient_check():
    config = HeadConfig(num_levels=1, channels=4, num_convs=1, num_categories=2, backbone_channels=4)
    params = init_params(config, np.random.default_rng(3))
    spec = SceneSpec(image_size=(16, 16), num_categories=2, objects_per_image=(1, 2),
                     box_size_range=(6, 10), seed=5)
    batch = [generate_scene(spec, 0)]

    def loss_wrt(name):
        def f(t):
            trial = dict(params)
            trial[name] = t
            out = forward(Tensor(batch[0].image), config, trial)
            return detection_loss(out, batch, config)
        return f

    for name in ("head.cls_pred.weight", "head.box_pred.bias", "backbone.stem.weight"):
        err = finite_difference_check(loss_wrt(name), params[name].detach())
        assert err < 1e-4, (name, err)


# ---------------------------------------------------------------- decoding


def test_decode_empty_below_threshold(small_config, params):
    zeros = {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}
    out = forward(Tensor(np.full((3, 64, 64), 0.5)), small_config, zeros)
    assert decode_predictions(out, score_threshold=0.5, nms_iou=0.5) == []


def test_decode_box_arithmetic(small_config, params):
    out = forward(Tensor(np.full((3, 64, 64), 0.5)), small_config,
                  {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()})
    # plant one dominant cell at stride 4, cell (2, 2) -> center (10, 10)
    logits = np.full(out.cls_logits[0].shape, -20.0)
    logits[1, 2, 2] = 20.0
    deltas = np.zeros(out.box_deltas[0].shape)
    deltas[:, 2, 2] = 1.0
    out.cls_logits[0] = Tensor(logits)
    out.box_deltas[0] = Tensor(deltas)
    out.cls_logits[1] = Tensor(np.full(out.cls_logits[1].shape, -20.0))
    out.cls_logits[2] = Tensor(np.full(out.cls_logits[2].shape, -20.0))
    dets = decode_predictions(out, score_threshold=0.5, nms_iou=0.5)
    assert len(dets) == 1
    det = dets[0]
    assert det.category == 2
    np.testing.assert_allclose(det.box, (6.0, 6.0, 14.0, 14.0))


def test_nms_deduplicates_identical_boxes():
    from densedistill.head import _nms

    twin = [Detection((0, 0, 10, 10), 1, 0.9), Detection((0, 0, 10, 10), 1, 0.8)]
    assert _nms(twin, 0.5) == [twin[0]]


# ---------------------------------------------------------------- evaluation


def gt(boxes):
    return blank_sample(boxes=boxes)


def test_ap_perfect_predictions():
    truth = [gt([BoundingBox(10, 10, 30, 30, 1)]), gt([BoundingBox(5, 5, 25, 25, 2)])]
    preds = [
        [Detection((10, 10, 30, 30), 1, 1.0)],
        [Detection((5, 5, 25, 25), 2, 1.0)],
    ]
    mean_ap, per_cat = evaluate_toy_ap(preds, truth)
    assert mean_ap == pytest.approx(1.0)
    assert per_cat == {1: pytest.approx(1.0), 2: pytest.approx(1.0)}


def test_ap_no_predictions():
    truth = [gt([BoundingBox(10, 10, 30, 30, 1)])]
    mean_ap, _ = evaluate_toy_ap([[]], truth)
    assert mean_ap == 0.0


def test_ap_tp_after_higher_scored_fp_is_half():
    truth = [gt([BoundingBox(10, 10, 30, 30, 1)])]
    preds = [[
        Detection((40, 40, 60, 60), 1, 0.9),   # FP, higher score
        Detection((10, 10, 30, 30), 1, 0.8),   # TP
    ]]
    mean_ap, _ = evaluate_toy_ap(preds, truth)
    assert mean_ap == pytest.approx(0.5)


def test_ap_each_gt_matched_once():
    truth = [gt([BoundingBox(10, 10, 30, 30, 1)])]
    preds = [[
        Detection((10, 10, 30, 30), 1, 0.9),
        Detection((10, 10, 30, 30), 1, 0.8),  # duplicate -> FP
    ]]
    mean_ap, _ = evaluate_toy_ap(preds, truth)
    assert mean_ap == pytest.approx(1.0)  # recall 1 reached at precision 1


# --------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, small_config, params):
    path = tmp_path / "head.bin"
    save_checkpoint(str(path), small_config, params)
    config2, params2 = load_checkpoint(str(path))
    assert config2 == small_config
    assert set(params2) == set(params)
    for name in params:
        np.testing.assert_array_equal(params[name].data, params2[name].data)


def test_checkpoint_save_is_bit_exact(tmp_path, small_config, params):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(str(p1), small_config, params)
    save_checkpoint(str(p2), small_config, params)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"WRONGMAG" + bytes(32))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(str(path))


def test_checkpoint_bad_version(tmp_path, small_config, params):
    path = tmp_path / "head.bin"
    save_checkpoint(str(path), small_config, params)
    raw = bytearray(path.read_bytes())
    raw[8] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(str(path))
