import numpy as np
import pytest
import torch

from conftest import random_outputs
from graphdistill.datagen import ModalitySpec, Segment
from graphdistill.distill import pairwise_message
from graphdistill.encoders import ModalityOutputs, build_model
from graphdistill.evaluation import (
    DataError,
    DetectionSegment,
    EvalReport,
    OracleError,
    classify_video,
    detection_clip_probs,
    evaluate_classification,
    extract_segments,
    finite_difference_check,
    fuse_probabilities,
    map_at_tiou,
    nearest_centroid_accuracy,
    segment_probabilities,
    temporal_iou,
    uniform_clip_starts,
)

VEC = ModalitySpec(name="m", kind="vector", shape=(5,))


def probs_row(active_class, score, num_classes=3):
    row = np.zeros(num_classes + 1)
    row[active_class] = score
    row[-1] = 1.0 - score
    return row


# -- classification inference ---------------------------------------------------


def test_classify_video_single_clip_equals_softmax():
    model = build_model("classification", VEC, clip_len=4, num_classes=3, feature_dim=8, seed=0)
    video = np.random.default_rng(0).standard_normal((4, 5)).astype(np.float32)
    probs = classify_video(model, video, n_clips=1, clip_len=4)
    with torch.no_grad():
        direct = torch.softmax(model(torch.from_numpy(video[None])).logits, -1)[0].numpy()
    assert np.allclose(probs, direct)


def test_classify_video_identical_clips_averaging_noop():
    model = build_model("classification", VEC, clip_len=2, num_classes=3, feature_dim=8, seed=0)
    frame = np.random.default_rng(1).standard_normal((1, 5)).astype(np.float32)
    video = np.repeat(frame, 8, axis=0)
    one = classify_video(model, video, n_clips=1, clip_len=2)
    many = classify_video(model, video, n_clips=5, clip_len=2)
    assert np.allclose(one, many, atol=1e-7)
    assert abs(many.sum() - 1.0) < 1e-6


def test_classify_video_too_short_is_data_error():
    model = build_model("classification", VEC, clip_len=4, num_classes=3, feature_dim=8, seed=0)
    with pytest.raises(DataError, match="shorter"):
        classify_video(model, np.zeros((3, 5), dtype=np.float32), n_clips=1, clip_len=4)


def test_classify_video_class_permutation_equivariant():
    model = build_model("classification", VEC, clip_len=4, num_classes=4, feature_dim=8, seed=2)
    video = np.random.default_rng(2).standard_normal((10, 5)).astype(np.float32)
    probs = classify_video(model, video, n_clips=3, clip_len=4)
    perm = [2, 0, 3, 1]
    with torch.no_grad():
        model.head.linear.weight.copy_(model.head.linear.weight[perm])
        model.head.linear.bias.copy_(model.head.linear.bias[perm])
    permuted = classify_video(model, video, n_clips=3, clip_len=4)
    assert np.allclose(permuted, probs[perm], atol=1e-7)


def test_uniform_clip_starts_span_video():
    starts = uniform_clip_starts(30, 10, 5)
    assert starts[0] == 0 and starts[-1] == 20
    assert (np.diff(starts) > 0).all()


def test_fuse_probabilities_mean():
    fused = fuse_probabilities([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    assert np.allclose(fused, [0.5, 0.5])


# -- segment extraction -----------------------------------------------------------


def test_all_background_no_segments():
    probs = np.stack([probs_row(0, 0.0) for _ in range(6)])
    assert extract_segments(probs, 0.4, clip_len=10, clip_step=10) == []


def test_single_run_segment():
    rows = [probs_row(0, 0.0)] + [probs_row(2, 0.9)] * 4 + [probs_row(0, 0.0)]
    segments = extract_segments(np.stack(rows), 0.4, clip_len=10, clip_step=10)
    assert len(segments) == 1
    seg = segments[0]
    assert seg.label == 2
    assert seg.start == 10 and seg.end == 50
    assert abs(seg.score - 0.9) < 1e-12


def test_sub_threshold_gap_splits_runs():
    # hand enumeration: clips 0-1 class 1, clip 2 inactive (gap), clips 3-5 class 1
    rows = [
        probs_row(1, 0.8), probs_row(1, 0.7),
        probs_row(1, 0.3),             # activity 0.3 <= 0.4 gate
        probs_row(1, 0.9), probs_row(1, 0.9), probs_row(1, 0.6),
    ]
    segments = extract_segments(np.stack(rows), 0.4, clip_len=10, clip_step=10)
    assert [(s.start, s.end, s.label) for s in segments] == [(0, 20, 1), (30, 60, 1)]
    assert abs(segments[0].score - 0.75) < 1e-12
    assert abs(segments[1].score - 0.8) < 1e-12


def test_class_change_splits_runs():
    rows = [probs_row(0, 0.9)] * 2 + [probs_row(1, 0.9)] * 2
    segments = extract_segments(np.stack(rows), 0.4, clip_len=10, clip_step=10)
    assert [(s.start, s.end, s.label) for s in segments] == [(0, 20, 0), (20, 40, 1)]


def test_malformed_probabilities_rejected():
    rows = np.stack([probs_row(0, 0.5), probs_row(1, 0.5)])
    rows[1, 0] += 0.01
    with pytest.raises(DataError, match="sum"):
        extract_segments(rows, 0.4, clip_len=10, clip_step=10)
    with pytest.raises(DataError, match="threshold"):
        extract_segments(np.stack([probs_row(0, 0.5)]), 1.5, clip_len=10, clip_step=10)


def test_max_gate_alternative():
    # activity mass 0.6 exceeds 0.4 but the best class has only 0.3
    row = np.array([0.3, 0.3, 0.0, 0.4])
    segs_mass = extract_segments(np.stack([row]), 0.4, 10, 10, gate="mass")
    segs_max = extract_segments(np.stack([row]), 0.4, 10, 10, gate="max")
    assert len(segs_mass) == 1 and segs_max == []


def test_extraction_roundtrip_idempotent():
    rng = np.random.default_rng(0)
    for _ in range(20):
        raw = rng.dirichlet(np.ones(4) * 0.4, size=12)
        first = extract_segments(raw, 0.4, clip_len=8, clip_step=8)
        implied = segment_probabilities(first, 12, num_classes=3, clip_len=8, clip_step=8)
        second = extract_segments(implied, 0.4, clip_len=8, clip_step=8)
        implied2 = segment_probabilities(second, 12, num_classes=3, clip_len=8, clip_step=8)
        third = extract_segments(implied2, 0.4, clip_len=8, clip_step=8)
        assert second == third  # the extract-imply round trip is a fixed point
        confident = [s for s in first if s.score > 0.4]
        if len(confident) == len(first):
            assert first == second


# -- temporal IoU and mAP -------------------------------------------------------------


def test_temporal_iou_values():
    assert temporal_iou(0, 10, 0, 10) == 1.0
    assert temporal_iou(0, 10, 10, 20) == 0.0
    assert abs(temporal_iou(0, 13, 4, 20) - 0.45) < 1e-12


def test_exact_predictions_perfect_map():
    gt = {0: [Segment(0, 10, 0), Segment(20, 35, 1)], 1: [Segment(5, 25, 0)]}
    preds = {
        0: [DetectionSegment(0, 10, 0, 1.0), DetectionSegment(20, 35, 1, 1.0)],
        1: [DetectionSegment(5, 25, 0, 1.0)],
    }
    report = map_at_tiou(preds, gt, thresholds=(0.1, 0.3, 0.5))
    assert all(v == 1.0 for v in report.map_at.values())


def test_zero_overlap_zero_map():
    gt = {0: [Segment(0, 10, 0)]}
    preds = {0: [DetectionSegment(50, 60, 0, 0.9)]}
    report = map_at_tiou(preds, gt, thresholds=(0.1, 0.5))
    assert all(v == 0.0 for v in report.map_at.values())


def test_hand_computed_iou_boundary_case():
    # class 0: one GT [0, 13), one prediction [4, 20): tIoU exactly 0.45
    # class 1: exact match. Hand PR: at 0.3 both classes AP 1 -> mAP 1;
    # at 0.5 class 0 prediction misses -> AP 0 -> mAP 0.5.
    gt = {0: [Segment(0, 13, 0), Segment(30, 40, 1)]}
    preds = {0: [DetectionSegment(4, 20, 0, 0.9), DetectionSegment(30, 40, 1, 0.8)]}
    report = map_at_tiou(preds, gt, thresholds=(0.3, 0.5))
    assert report.per_class_ap[0.3] == {0: 1.0, 1: 1.0}
    assert report.per_class_ap[0.5] == {0: 0.0, 1: 1.0}
    assert report.map_at[0.3] == 1.0 and report.map_at[0.5] == 0.5


def test_duplicate_predictions_penalized():
    # second prediction on an already-matched GT counts as a false positive
    gt = {0: [Segment(0, 10, 0)]}
    preds = {0: [DetectionSegment(0, 10, 0, 0.9), DetectionSegment(1, 11, 0, 0.8)]}
    report = map_at_tiou(preds, gt, thresholds=(0.5,))
    assert report.per_class_ap[0.5][0] == 1.0  # AP unaffected: TP found first
    preds = {0: [DetectionSegment(1, 11, 0, 0.9), DetectionSegment(0, 10, 0, 0.8)]}
    report = map_at_tiou(preds, gt, thresholds=(0.9,))
    assert report.per_class_ap[0.9][0] == pytest.approx(0.5)


def test_map_monotone_in_threshold():
    rng = np.random.default_rng(3)
    gt, preds = {}, {}
    for vid in range(4):
        segs, ps = [], []
        pos = 0
        for _ in range(3):
            start = pos + int(rng.integers(0, 10))
            end = start + int(rng.integers(5, 20))
            label = int(rng.integers(0, 3))
            segs.append(Segment(start, end, label))
            jitter = int(rng.integers(-6, 7))
            ps.append(DetectionSegment(max(0, start + jitter), end + jitter + 1,
                                       label, float(rng.random())))
            pos = end + 1
        gt[vid], preds[vid] = segs, ps
    thresholds = (0.1, 0.3, 0.5, 0.7)
    report = map_at_tiou(preds, gt, thresholds)
    values = [report.map_at[t] for t in thresholds]
    assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))


def test_ap_invariant_to_monotone_score_rescaling():
    gt = {0: [Segment(0, 10, 0), Segment(20, 30, 0), Segment(50, 70, 0)]}
    preds = {0: [
        DetectionSegment(0, 10, 0, 0.9),
        DetectionSegment(21, 31, 0, 0.5),
        DetectionSegment(40, 45, 0, 0.3),
    ]}
    a = map_at_tiou(preds, gt, (0.5,)).map_at[0.5]
    rescaled = {0: [DetectionSegment(s.start, s.end, s.label, s.score ** 3 * 10)
                    for s in preds[0]]}
    b = map_at_tiou(rescaled, gt, (0.5,)).map_at[0.5]
    assert a == b


def test_classes_without_ground_truth_excluded():
    gt = {0: [Segment(0, 10, 0)]}
    preds = {0: [DetectionSegment(0, 10, 0, 1.0), DetectionSegment(20, 30, 5, 1.0)]}
    report = map_at_tiou(preds, gt, (0.5,))
    assert set(report.per_class_ap[0.5]) == {0}
    assert report.map_at[0.5] == 1.0


def test_eval_report_json_round_trip():
    report = map_at_tiou({0: [DetectionSegment(0, 10, 0, 1.0)]},
                         {0: [Segment(0, 10, 0)]}, (0.1, 0.5))
    report.accuracy["m"] = 0.75
    back = EvalReport.from_json(report.to_json())
    assert back.map_at == report.map_at
    assert back.per_class_ap == report.per_class_ap
    assert back.accuracy == report.accuracy


# -- detection sliding-window inference ------------------------------------------------


def test_detection_clip_probs_shapes_and_overlap_average():
    model = build_model("detection", VEC, clip_len=4, num_classes=3, feature_dim=8, seed=3)
    frames = np.random.default_rng(4).standard_normal((40, 5)).astype(np.float32)
    probs = detection_clip_probs(model, frames, clip_len=4, clip_step=4,
                                 window_len=5, window_step=8)
    assert probs.shape == (10, 4)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    with pytest.raises(DataError, match="multiple"):
        detection_clip_probs(model, frames, 4, 4, 5, 10)
    with pytest.raises(DataError, match="shorter"):
        detection_clip_probs(model, frames[:10], 4, 4, 5, 8)


# -- finite differences ------------------------------------------------------------------


def test_fd_quadratic_nearly_exact():
    params = [torch.tensor([1.5, -2.0, 0.5], dtype=torch.float64, requires_grad=True)]
    a = torch.tensor([0.7, 1.3, -0.4], dtype=torch.float64)
    err = finite_difference_check(lambda: (a * params[0] ** 2).sum(), params)
    assert err < 1e-9


def test_fd_pairwise_message():
    receiver = random_outputs(1, batch=2, seed=5, requires_grad=True)[0]
    sender = random_outputs(1, batch=2, seed=6)[0]
    err = finite_difference_check(
        lambda: pairwise_message(receiver, sender, 10, 5).sum(),
        [receiver.logits, receiver.representation],
    )
    assert err < 1e-4


def test_fd_detached_sender_reports_zero_both_ways():
    # sender outputs are precomputed constants: analytic gradient is zero and
    # the numeric difference is exactly zero too
    spec = VEC
    sender_model = build_model("classification", spec, 3, 3, feature_dim=6, seed=7).double()
    receiver = random_outputs(1, batch=2, feature_dim=6, num_classes=3,
                              seed=8, requires_grad=True)[0]
    clips = torch.randn(2, 3, 5, dtype=torch.float64)
    with torch.no_grad():
        sender_out = sender_model(clips)
    err = finite_difference_check(
        lambda: pairwise_message(receiver, sender_out, 10, 5).sum(),
        list(sender_model.parameters()), max_evals_per_tensor=10,
    )
    assert err == 0.0


def test_fd_requires_float64_and_finite():
    p32 = [torch.randn(3, requires_grad=True)]
    with pytest.raises(OracleError, match="float64"):
        finite_difference_check(lambda: (p32[0] ** 2).sum(), p32)
    p = [torch.tensor([1.0], dtype=torch.float64, requires_grad=True)]
    with pytest.raises(OracleError, match="finite"):
        finite_difference_check(lambda: p[0].log() * float("nan"), p)


# -- classification corpus evaluation -------------------------------------------------------


def test_evaluate_classification_counts(tiny_corpus):
    models = {
        name: build_model("classification", tiny_corpus.spec.modality(name),
                          clip_len=6, num_classes=4, feature_dim=8, base_channels=4, seed=0)
        for name in ("img0", "vec1")
    }
    report = evaluate_classification(models, tiny_corpus, split="test", n_clips=2, fused=True)
    assert set(report.accuracy) == {"img0", "vec1", "fused"}
    for name in ("img0", "vec1"):
        confusion = np.array(report.confusion[name])
        assert confusion.sum() == len(tiny_corpus.test)
        assert 0.0 <= report.accuracy[name] <= 1.0
