import logging
import math

import numpy as np
import pytest

from dadet.bsrwst.boxops import Box, Detection, generate_anchors, iou, nms, nms_indices
from dadet.bsrwst.detector import Prediction
from dadet.bsrwst.errors import ConfigError, InvalidInputError
from dadet.bsrwst.pseudolabel import (
    PseudoLabel,
    SrrsPolicy,
    epsilon_schedule,
    generate_pseudo_labels,
    pseudo_labels_from_prediction,
    pseudo_match,
    srrs,
)


def det(box, probs):
    return Detection(Box(*box), np.asarray(probs, dtype=np.float64))


def random_dets(rng, n, k1=4):
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        w, h = rng.uniform(0.05, 0.4, 2)
        box = Box(max(cx - w / 2, 0.0), max(cy - h / 2, 0.0), min(cx + w / 2, 1.0), min(cy + h / 2, 1.0))
        out.append(Detection(box, rng.dirichlet(np.ones(k1) * 0.5)))
    return out


def srrs_oracle(r_star, dets, delta):
    c = r_star.predicted_class
    total, count = 0.0, 0
    for d in dets:
        overlap = iou(d.box, r_star.box)
        if overlap >= delta:
            total += overlap * d.prob(c)
            count += 1
    return total / count


def algorithm_oracle(dets, finals, delta, epsilon):
    kept = []
    for i, r in enumerate(finals):
        score = srrs_oracle(r, dets, delta)
        if score >= epsilon:
            kept.append((i, r.predicted_class, score))
    return kept


def test_srrs_self_support_only():
    r = det((0.1, 0.1, 0.3, 0.3), [0.05, 0.9, 0.03, 0.02])
    assert srrs(r, [r]) == pytest.approx(0.9)


def test_srrs_two_supports():
    r = det((0.0, 0.0, 0.5, 0.5), [0.1, 0.8, 0.05, 0.05])
    half = det((0.0, 0.0, 0.25, 0.5), [0.2, 0.6, 0.1, 0.1])
    far = det((0.7, 0.7, 0.9, 0.9), [0.0, 1.0, 0.0, 0.0])
    assert srrs(r, [r, half, far]) == pytest.approx(0.55, abs=1e-12)


def test_srrs_reads_class_of_final_from_every_support():
    r = det((0.0, 0.0, 0.5, 0.5), [0.1, 0.8, 0.05, 0.05])
    other_class = det((0.0, 0.0, 0.5, 0.5), [0.1, 0.2, 0.7, 0.0])
    assert srrs(r, [r, other_class]) == pytest.approx((0.8 + 0.2) / 2)


def test_srrs_upper_bound():
    r = det((0.2, 0.2, 0.4, 0.4), [0.0, 0.0, 1.0, 0.0])
    assert srrs(r, [r, r, r]) == pytest.approx(1.0)


def test_srrs_rejects_bad_delta():
    r = det((0.2, 0.2, 0.4, 0.4), [0.0, 0.0, 1.0, 0.0])
    for delta in (0.0, 1.5):
        with pytest.raises(ConfigError):
            srrs(r, [r], delta)
    with pytest.raises(ConfigError):
        SrrsPolicy(delta=0.0)


def test_srrs_oracle_and_bounds():
    rng = np.random.default_rng(0)
    for _ in range(500):
        dets = random_dets(rng, int(rng.integers(1, 51)))
        r = dets[int(rng.integers(len(dets)))]
        delta = float(rng.uniform(0.05, 1.0))
        score = srrs(r, dets, delta)
        assert 0.0 <= score <= 1.0
        assert score == pytest.approx(srrs_oracle(r, dets, delta), abs=1e-9)


def test_srrs_full_overlap_delta_is_self_probability():
    rng = np.random.default_rng(1)
    for _ in range(50):
        dets = random_dets(rng, 10)
        r = dets[0]
        assert srrs(r, dets, 1.0) == pytest.approx(r.score, abs=1e-12)


def test_generate_pseudo_labels_threshold():
    r = det((0.1, 0.1, 0.3, 0.3), [0.05, 0.9, 0.03, 0.02])
    assert len(generate_pseudo_labels([r], [r], SrrsPolicy(), epsilon=0.8)) == 1
    weak = det((0.1, 0.1, 0.3, 0.3), [0.1, 0.7, 0.1, 0.1])
    assert generate_pseudo_labels([weak], [weak], SrrsPolicy(), epsilon=0.8) == []
    assert generate_pseudo_labels([r], [], SrrsPolicy()) == []


def test_generate_pseudo_labels_hand_example():
    a = det((0.0, 0.0, 0.5, 0.5), [0.1, 0.8, 0.05, 0.05])
    b = det((0.0, 0.0, 0.25, 0.5), [0.5, 0.3, 0.1, 0.1])
    c = det((0.5, 0.5, 1.0, 1.0), [0.2, 0.1, 0.65, 0.05])
    # a: (1.0 * 0.8 + 0.5 * 0.3) / 2 = 0.475; c: self-support only, 0.65
    labels = generate_pseudo_labels([a, b, c], [a, c], SrrsPolicy(), epsilon=0.6)
    assert [(pl.source_detection_index, pl.class_id) for pl in labels] == [(1, 2)]
    assert labels[0].srrs == pytest.approx(0.65)
    labels = generate_pseudo_labels([a, b, c], [a, c], SrrsPolicy(), epsilon=0.4)
    assert [pl.srrs for pl in labels] == pytest.approx([0.475, 0.65])


def test_generate_pseudo_labels_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(500):
        dets = random_dets(rng, int(rng.integers(1, 51)))
        finals = nms(dets, 0.45, 0.05)
        delta = float(rng.choice([0.3, 0.5, 0.7]))
        eps = float(rng.uniform(0.1, 0.9))
        labels = generate_pseudo_labels(dets, finals, SrrsPolicy(delta=delta), epsilon=eps)
        oracle = algorithm_oracle(dets, finals, delta, eps)
        assert [(pl.source_detection_index, pl.class_id) for pl in labels] == [(i, c) for i, c, _ in oracle]
        assert [pl.srrs for pl in labels] == pytest.approx([s for _, _, s in oracle], abs=1e-9)
        assert all(pl.class_id >= 1 and pl.srrs >= eps for pl in labels)


def test_raising_epsilon_gives_subset():
    rng = np.random.default_rng(3)
    for _ in range(100):
        dets = random_dets(rng, 30)
        finals = nms(dets, 0.45, 0.05)
        low = {pl.source_detection_index for pl in generate_pseudo_labels(dets, finals, epsilon=0.3)}
        high = {pl.source_detection_index for pl in generate_pseudo_labels(dets, finals, epsilon=0.6)}
        assert high <= low


def test_raising_delta_never_adds_supports():
    rng = np.random.default_rng(4)
    for _ in range(100):
        dets = random_dets(rng, 20)
        r = dets[0]
        supports = [sum(iou(d.box, r.box) >= delta for d in dets) for delta in (0.3, 0.5, 0.7, 1.0)]
        assert supports == sorted(supports, reverse=True)
        assert supports[-1] >= 1


def test_confidence_thresholding_without_srrs():
    a = det((0.0, 0.0, 0.5, 0.5), [0.05, 0.95, 0.0, 0.0])
    b = det((0.6, 0.6, 0.9, 0.9), [0.15, 0.0, 0.85, 0.0])
    labels = generate_pseudo_labels([a, b], [a, b], SrrsPolicy(confidence_epsilon=0.9), use_srrs=False)
    assert [pl.class_id for pl in labels] == [1]
    assert labels[0].srrs == pytest.approx(0.95)


def test_prediction_path_matches_object_path():
    rng = np.random.default_rng(5)
    for _ in range(50):
        dets = random_dets(rng, 25)
        boxes = np.stack([d.box.as_array() for d in dets])
        probs = np.stack([d.class_probs for d in dets])
        pred = Prediction(boxes, probs, nms_indices(dets))
        for use_srrs in (True, False):
            a = pseudo_labels_from_prediction(pred, SrrsPolicy(), 0.4, use_srrs)
            b = generate_pseudo_labels(pred.detections, pred.final, SrrsPolicy(), 0.4, use_srrs)
            assert [(p.box, p.class_id) for p in a] == [(p.box, p.class_id) for p in b]
            assert [p.srrs for p in a] == pytest.approx([p.srrs for p in b], abs=1e-12)


def test_pseudo_label_record():
    pl = PseudoLabel(Box(0.1, 0.2, 0.3, 0.4), 2, 0.85, 0)
    assert pl.to_record("target_train/00001", 0.8) == {
        "image_id": "target_train/00001",
        "box": [0.1, 0.2, 0.3, 0.4],
        "class_id": 2,
        "srrs": 0.85,
        "epsilon_used": 0.8,
    }
    with pytest.raises(InvalidInputError):
        PseudoLabel(Box(0.1, 0.2, 0.3, 0.4), 0, 0.9, 0)


def test_pseudo_match():
    anchors = generate_anchors()
    assert pseudo_match(anchors, []) is None
    pl = PseudoLabel(anchors[33], 3, 0.9, 0)
    m = pseudo_match(anchors, [pl])
    assert 33 in m.pos_indices
    assert m.matched_gt[33][1] == 3


def test_degenerate_final_box_gives_no_pseudo_label():
    boxes = np.array([[1.0, 0.8, 1.0, 0.95], [0.2, 0.2, 0.5, 0.5]])
    probs = np.array([[0.1, 0.9, 0.0, 0.0], [0.05, 0.0, 0.95, 0.0]])
    pred = Prediction(boxes, probs, np.array([0, 1]))
    for use_srrs, epsilon in ((False, 0.5), (True, 0.0)):
        labels = pseudo_labels_from_prediction(pred, SrrsPolicy(), epsilon, use_srrs)
        assert [(pl.class_id, pl.source_detection_index) for pl in labels] == [(2, 1)]
    m = pseudo_match(generate_anchors(), labels)
    assert m.num_pos > 0
    assert all(m.matched_gt[i][1] == 2 for i in m.pos_indices)


def test_epsilon_schedule_values():
    assert epsilon_schedule(0.0) == 0.5
    assert epsilon_schedule(1.0) == pytest.approx(0.952574, abs=1e-6)
    assert epsilon_schedule(1.0) == 1.0 / (1.0 + math.exp(-3.0))
    ps = np.linspace(0.0, 1.0, 50)
    values = [epsilon_schedule(p) for p in ps]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_epsilon_schedule_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="dadet.pseudolabel"):
        assert epsilon_schedule(1.5) == epsilon_schedule(1.0)
        assert epsilon_schedule(-0.2) == 0.5
    assert "clamped" in caplog.text


def test_policy_epsilon_modes():
    assert SrrsPolicy().epsilon() == 0.8
    assert SrrsPolicy().epsilon(0.0) == 0.5
    assert SrrsPolicy(epsilon_mode="fixed").epsilon(0.0) == 0.8
    assert SrrsPolicy(epsilon_mode="scheduled").epsilon(1.0) == epsilon_schedule(1.0)
    assert SrrsPolicy(confidence_epsilon=0.9).epsilon(use_srrs=False) == 0.9
    with pytest.raises(ConfigError):
        SrrsPolicy(epsilon_mode="scheduled").epsilon()
    with pytest.raises(ConfigError):
        SrrsPolicy(epsilon_fixed=1.0)
