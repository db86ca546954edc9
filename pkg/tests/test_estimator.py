import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from actground import ActionGrounder
from actground.backbone import FrameBatch, InvalidInputError
from actground.evaluation import load_annotations
from actground.estimator import GroundingQuery
from actground.grounding import heatmap_for_target_frame, patch_text_similarity, predict_center, sample_frames
from actground.grounding import MediaSource
from conftest import random_frames


@pytest.fixture(scope="module")
def grounder(e2e_backbone):
    return ActionGrounder(backbone=e2e_backbone).fit()


@pytest.fixture(scope="module")
def records(fixtures_dir):
    return load_annotations(fixtures_dir / "annotations_eval.jsonl")


@pytest.fixture(scope="module")
def traced(grounder, fixtures_dir):
    batch = sample_frames(MediaSource.open(fixtures_dir / "frames"), 6, 8)
    return grounder.trace_query(GroundingQuery(batch, "cutting_onion"))


def test_params_and_clone():
    g = ActionGrounder(depth=5, static_weights=(1.0,) * 6)
    params = g.get_params()
    assert params["depth"] == 5 and params["tau_d"] == 20.0 and params["backbone"] == "seed:42"
    copy = clone(g)
    assert copy.get_params() == params and copy is not g
    g.set_params(tau_d=5.0)
    assert g.tau_d == 5.0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        ActionGrounder().predict([])


@pytest.mark.parametrize(
    "kwargs",
    [dict(depth=9), dict(num_frames=4), dict(pathway_input="skip"), dict(fusion_weights=(1, 1, 1)), dict(merge="max")],
)
def test_fit_validation(kwargs, e2e_backbone):
    with pytest.raises(ValueError):
        ActionGrounder(backbone=e2e_backbone, **kwargs).fit()


def test_predict_transform_score(grounder, records, fixtures_dir):
    preds = grounder.predict(records, root=fixtures_dir)
    assert preds.shape == (4, 2) and preds.dtype == np.int64
    maps = grounder.transform(records[:2], root=fixtures_dir)
    assert len(maps) == 2 and maps[0].shape == (3, 32, 40)
    assert grounder.score(records, root=fixtures_dir) == 0.75


def test_parallel_matches_serial(e2e_backbone, records, fixtures_dir):
    serial = ActionGrounder(backbone=e2e_backbone).fit().predict(records, root=fixtures_dir)
    threaded = ActionGrounder(backbone=e2e_backbone, n_jobs=3).fit().predict(records, root=fixtures_dir)
    assert np.array_equal(serial, threaded)


def test_bad_batch_items(grounder):
    with pytest.raises(InvalidInputError):
        grounder.predict([np.zeros(3)])
    with pytest.raises(InvalidInputError):
        grounder.predict([])


def test_empty_label_rejected(grounder, traced):
    with pytest.raises(InvalidInputError):
        grounder.ground_trace(traced, "  ")


def test_center_fusion(grounder, traced):
    res = grounder.ground_trace(traced, "cutting_onion")
    pts = [res.centers[k].point for k in ("verb", "obj", "act")]
    expected = (0.2 * pts[0][0] + 0.2 * pts[1][0] + 0.6 * pts[2][0], 0.2 * pts[0][1] + 0.2 * pts[1][1] + 0.6 * pts[2][1])
    assert res.c_dec == pytest.approx(expected, abs=1e-9)
    assert res.bundle.prompts == (
        "A photo of a person cutting something.",
        "A photo of a person using onion.",
        "A photo of a person cutting onion.",
    )
    d = res.to_json_dict()
    assert set(d["dynamic_weights"]["act"]) == {"6", "7", "8"}
    assert d["frame_indices"] == [2, 3, 4, 5, 6, 7, 8, 9]


def test_none_weighting_uses_plain_pathway(e2e_backbone, traced):
    from actground.gem import SelfSelfConfig, gem_accumulate

    g = ActionGrounder(backbone=e2e_backbone, weighting="none").fit()
    res = g.ground_trace(traced, "waving")
    state = gem_accumulate(traced.trace, 7, SelfSelfConfig(1, None, 2))
    e = e2e_backbone.encode_text("A photo of a person waving.").vector
    sims = patch_text_similarity(state.accumulated, e, traced.trace)
    expected = heatmap_for_target_frame(sims, 4, (4, 4), (32, 40))
    np.testing.assert_allclose(res.heatmaps["act"].grid, expected.grid, atol=1e-12)


def test_depth_zero_is_backbone_only(grounder, traced, e2e_backbone):
    res = grounder.ground_trace(traced, "cutting_onion", depth=0)
    e = e2e_backbone.encode_text("A photo of a person cutting onion.").vector
    sims = patch_text_similarity(traced.trace.layer_outputs[-1], e, traced.trace)
    expected = heatmap_for_target_frame(sims, 4, (4, 4), (32, 40))
    np.testing.assert_array_equal(res.heatmaps["act"].grid, expected.grid)
    assert res.dynamic["act"] is None


def test_full_depth_sweep_equals_baseline(grounder, traced):
    a = grounder.ground_trace(traced, "cutting_onion")
    b = grounder.ground_trace(traced, "cutting_onion", depth=7)
    for k in a.heatmaps:
        assert np.array_equal(a.heatmaps[k].grid, b.heatmaps[k].grid)
    assert a.prediction == b.prediction


def test_removing_zero_weight_layer_is_idempotent(e2e_backbone, traced):
    w = [0.3, 0.4, 0.5, 0.0, 0.7, 0.9, 0.9, 0.9]
    g = ActionGrounder(backbone=e2e_backbone, static_weights=w, weighting="static").fit()
    base = g.ground_trace(traced, "cutting_onion")
    # entry 3 of the weight vector is removal index depth + 1 - 3 = 5
    removed = g.ground_trace(traced, "cutting_onion", removed_layer=5)
    for k in base.heatmaps:
        assert np.array_equal(base.heatmaps[k].grid, removed.heatmaps[k].grid)
    with pytest.raises(ValueError):
        g.ground_trace(traced, "cutting_onion", removed_layer=9)


def test_removing_live_layer_changes_heatmap(grounder, traced):
    base = grounder.ground_trace(traced, "cutting_onion")
    removed = grounder.ground_trace(traced, "cutting_onion", removed_layer=1)
    assert not np.array_equal(base.heatmaps["act"].grid, removed.heatmaps["act"].grid)


@pytest.mark.parametrize("merge", ["heatmap_average", "heatmap_multiply"])
def test_heatmap_merges(e2e_backbone, traced, merge):
    g = ActionGrounder(backbone=e2e_backbone, merge=merge).fit()
    res = g.ground_trace(traced, "cutting_onion")
    assert res.merged is not None and res.merged.grid.shape == (32, 40)
    assert res.prediction == predict_center(res.merged).point


def test_image_backbone_repeated_frames(small_backbone):
    g = ActionGrounder(backbone=small_backbone, depth=3, static_weights=(1.0,) * 4, frame_mode="repeated_image").fit()
    frames = [f for f in random_frames(3, (16, 16), 4)]
    batch = sample_frames(frames, 1, 8, mode="repeated_image")
    res = g.ground(GroundingQuery(batch, "waving"))
    assert res.heatmaps["act"].grid.shape == (16, 16)
    assert res.bundle.prompts[1] == "A photo of a person."
