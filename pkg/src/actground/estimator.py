"""scikit-learn style front end for training-free action grounding."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adapters import resolve_backbone
from .backbone import FrameBatch, InvalidInputError, LayerTrace, TextEmbedding
from .evaluation import AnnotationRecord, accuracy
from .gem import PathwayState, SelfSelfConfig, gem_accumulate
from .grounding import (
    CenterPrediction,
    Heatmap,
    MediaSource,
    heatmap_for_target_frame,
    patch_text_similarity,
    predict_center,
    resize_frame,
    sample_frames,
)
from .prompts import (
    MergePolicy,
    DEFAULT_FUSION_WEIGHTS,
    PromptBundle,
    action_text,
    check_fusion_weights,
    combine_centers,
    decompose_label,
    merge_heatmaps,
    round_point,
)
from .weighting import (
    DEFAULT_STATIC_WEIGHTS,
    DynamicWeights,
    WeightConfig,
    dynamic_weights,
    layer_similarities,
    layer_weight_vector,
    weighted_output,
)

PROMPT_KEYS = ("verb", "obj", "act")


@dataclass(frozen=True)
class GroundingQuery:
    """Frames at their original resolution plus the action label."""

    frames: FrameBatch
    label: str
    sample_id: str | None = None


@dataclass
class TracedSample:
    trace: LayerTrace
    frame_size: tuple[int, int]
    target_index: int
    target_frame: np.ndarray
    frame_indices: tuple[int, ...] | None
    pathways: dict = field(default_factory=dict)


@dataclass
class GroundingResult:
    bundle: PromptBundle
    heatmaps: dict[str, Heatmap]
    centers: dict[str, CenterPrediction]
    dynamic: dict[str, DynamicWeights | None]
    c_dec: tuple[float, float]
    prediction: tuple[int, int]
    merged: Heatmap | None = None
    first_dynamic_layer: int = 0
    frame_indices: tuple[int, ...] | None = None

    def prediction_modes(self) -> dict[str, tuple[int, int]]:
        modes = {k: self.centers[k].point for k in PROMPT_KEYS}
        modes["dec"] = self.prediction
        return modes

    def to_json_dict(self, decimals: int = 6) -> dict:
        out = {
            "label": self.bundle.action,
            "verb": self.bundle.verb,
            "object": self.bundle.object,
            "prompts": dict(zip(PROMPT_KEYS, self.bundle.prompts)),
            "fusion_weights": list(self.bundle.weights),
            "c_verb": list(self.centers["verb"].point),
            "c_obj": list(self.centers["obj"].point),
            "c_act": list(self.centers["act"].point),
            "c_dec": [round(self.c_dec[0], decimals), round(self.c_dec[1], decimals)],
            "prediction": list(self.prediction),
        }
        out["dynamic_weights"] = {
            k: None
            if d is None
            else {
                layer: round(w, decimals) for layer, w in d.as_dict(self.first_dynamic_layer).items()
            }
            for k, d in self.dynamic.items()
        }
        if self.frame_indices is not None:
            out["frame_indices"] = list(self.frame_indices)
        return out


def check_label(label) -> str:
    if not isinstance(label, str) or not label.strip():
        raise InvalidInputError(f"label must be a non-empty string, got {label!r}")
    return label


class ActionGrounder(BaseEstimator):
    """Ground action labels in video frames with a frozen vision-language backbone.

    Nothing is learned: :meth:`fit` only resolves the backbone and validates
    the hyper-parameters. :meth:`predict` returns one pixel ``(x, y)`` per
    sample and :meth:`score` the pointing-game accuracy.

    Parameters
    ----------
    backbone : str or backbone object
        Fixture path, ``"seed:<n>"`` or ``"adapter:<name>"``; see
        :func:`actground.adapters.resolve_backbone`.
    depth : int
        Number of final blocks that get a self-self attention pathway.
    iterations : int
        Self-self clustering iterations per projection.
    temperature : float or None
        Self-self softmax temperature; ``None`` uses sqrt(head_dim).
    static_weights : sequence of float
        ``depth + 1`` weights, the first one for the pathway input.
    dynamic_depth, tau_d : int, float
        Number of prompt-dependent layer weights and their softmax temperature.
    weighting : {"none", "static", "dynamic", "combined"}
    fusion_weights : 3 floats
        Verb, object and action weights for averaging the center points.
    merge : {"center_average", "heatmap_average", "heatmap_multiply"}
    merge_ratio : 3 floats
        Verb:object:action ratio used by the heatmap merges.
    num_frames : int
        Frames sampled around the labeled frame.
    frame_mode : {"video", "repeated_image"}
    label_style : {"auto", "underscore", "natural"}
    extractor : callable, optional
        ``text -> (verbs, objects)`` for natural-language labels.
    pathway_input : {"chained", "original"}
    n_jobs : int
        Worker threads for batch prediction.
    """

    def __init__(
        self,
        backbone="seed:42",
        depth=7,
        iterations=1,
        temperature=None,
        static_weights=DEFAULT_STATIC_WEIGHTS,
        dynamic_depth=3,
        tau_d=20.0,
        weighting="combined",
        fusion_weights=DEFAULT_FUSION_WEIGHTS,
        merge="center_average",
        merge_ratio=(1.0, 1.0, 3.0),
        num_frames=8,
        frame_mode="video",
        label_style="auto",
        extractor=None,
        pathway_input="chained",
        n_jobs=1,
    ):
        self.backbone = backbone
        self.depth = depth
        self.iterations = iterations
        self.temperature = temperature
        self.static_weights = static_weights
        self.dynamic_depth = dynamic_depth
        self.tau_d = tau_d
        self.weighting = weighting
        self.fusion_weights = fusion_weights
        self.merge = merge
        self.merge_ratio = merge_ratio
        self.num_frames = num_frames
        self.frame_mode = frame_mode
        self.label_style = label_style
        self.extractor = extractor
        self.pathway_input = pathway_input
        self.n_jobs = n_jobs

    # -- fitting --------------------------------------------------------------

    def fit(self, X=None, y=None):
        backbone = resolve_backbone(self.backbone)
        desc = backbone.descriptor
        if self.depth > desc.layer_count:
            raise ValueError(f"depth {self.depth} exceeds the backbone's {desc.layer_count} layers")
        if desc.is_video and self.num_frames != desc.native_frames:
            raise ValueError(
                f"video backbone takes {desc.native_frames} frames, num_frames is {self.num_frames}"
            )
        if self.pathway_input not in ("chained", "original"):
            raise ValueError(f"pathway_input must be 'chained' or 'original', got {self.pathway_input!r}")
        if self.label_style not in ("auto", "underscore", "natural"):
            raise ValueError(f"unknown label_style {self.label_style!r}")
        if int(self.n_jobs) < 1:
            raise ValueError("n_jobs must be positive")
        self.weight_config_ = WeightConfig(
            depth=self.depth,
            dynamic_depth=self.dynamic_depth,
            tau_d=self.tau_d,
            static_weights=tuple(self.static_weights),
            mode=self.weighting,
        )
        self.self_self_config_ = SelfSelfConfig(self.iterations, self.temperature, desc.head_count)
        self.merge_policy_ = MergePolicy(self.merge, tuple(self.merge_ratio))
        self.fusion_weights_ = check_fusion_weights(self.fusion_weights)
        self.backbone_ = backbone
        self._text_cache = {}
        return self

    def weight_config_for(self, depth: int | None = None) -> WeightConfig:
        """Configured weights, truncated to the deepest ``depth + 1`` entries for shallower pathways.

        Depth 0 has no pathway and uses the backbone output with unit weight.
        """
        cfg = self.weight_config_
        if depth is None or depth == cfg.depth:
            return cfg
        if not 0 <= depth <= cfg.depth:
            raise ValueError(f"depth {depth} outside [0, {cfg.depth}]")
        if depth == 0:
            # no pathway left: the plain backbone output, unscaled
            return WeightConfig(depth=0, dynamic_depth=0, tau_d=cfg.tau_d, static_weights=(1.0,), mode="none")
        return WeightConfig(
            depth=depth,
            dynamic_depth=min(cfg.dynamic_depth, depth),
            tau_d=cfg.tau_d,
            static_weights=cfg.static_weights[len(cfg.static_weights) - depth - 1:],
            mode=cfg.mode,
        )

    # -- per-sample pipeline --------------------------------------------------

    def encode(self, prompt: str) -> TextEmbedding:
        check_is_fitted(self, "backbone_")
        emb = self._text_cache.get(prompt)
        if emb is None:
            emb = self.backbone_.encode_text(prompt)
            self._text_cache[prompt] = emb
        return emb

    def load_query(self, record: AnnotationRecord, root=None) -> GroundingQuery:
        path = Path(record.media_path)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        batch = sample_frames(
            MediaSource.open(path), record.labeled_frame_index, self.num_frames, self.frame_mode
        )
        return GroundingQuery(batch, record.label, record.sample_id)

    def trace_query(self, query: GroundingQuery) -> TracedSample:
        check_is_fitted(self, "backbone_")
        batch = query.frames
        size = self.backbone_.descriptor.input_size
        resized = FrameBatch(
            tuple(resize_frame(f, size) for f in batch.frames),
            batch.target_index,
            batch.mode,
            batch.source_indices,
        )
        return TracedSample(
            trace=self.backbone_.forward_with_trace(resized),
            frame_size=tuple(batch.frame_size),
            target_index=batch.target_index,
            target_frame=batch.target_frame,
            frame_indices=batch.source_indices,
        )

    def pathway(self, traced: TracedSample, depth: int) -> PathwayState:
        state = traced.pathways.get(depth)
        if state is None:
            state = gem_accumulate(traced.trace, depth, self.self_self_config_, self.pathway_input)
            traced.pathways[depth] = state
        return state

    def ground_trace(
        self, traced: TracedSample, label: str, depth: int | None = None, removed_layer: int | None = None
    ) -> GroundingResult:
        """Heatmaps and fused prediction for one traced sample.

        ``removed_layer`` zeroes one pathway term: 1 is the final layer,
        ``depth + 1`` the pathway input.
        """
        check_is_fitted(self, "backbone_")
        label = check_label(label)
        cfg = self.weight_config_for(depth)
        if removed_layer is not None and not 1 <= removed_layer <= cfg.depth + 1:
            raise ValueError(f"removed_layer must lie in [1, {cfg.depth + 1}], got {removed_layer}")
        trace = traced.trace
        state = self.pathway(traced, cfg.depth)
        verb, obj = decompose_label(
            label,
            self.label_style,
            extractor=self.extractor,
            encode=lambda p: self.encode(p).vector,
            visual_embedding=trace.cls_embedding(),
        )
        bundle = PromptBundle(action_text(label), verb, obj, self.fusion_weights_)
        desc = trace.descriptor
        heatmaps, centers, dyn = {}, {}, {}
        for key, prompt in zip(PROMPT_KEYS, bundle.prompts):
            e = self.encode(prompt).vector
            d = None
            if cfg.uses_text:
                d = dynamic_weights(layer_similarities(trace, e, cfg.dynamic_depth), cfg.tau_d)
            w = layer_weight_vector(cfg, d)
            if removed_layer is not None:
                w[cfg.depth + 1 - removed_layer] = 0.0
            sims = patch_text_similarity(weighted_output(state, w), e, trace)
            heatmaps[key] = heatmap_for_target_frame(
                sims, traced.target_index, desc.patch_grid, traced.frame_size
            )
            centers[key] = predict_center(heatmaps[key], key)
            dyn[key] = d
        c_dec = combine_centers(*(centers[k].point for k in PROMPT_KEYS), bundle.weights)
        merged = None
        if self.merge_policy_.strategy == "center_average":
            prediction = round_point(c_dec)
        else:
            merged = merge_heatmaps([heatmaps[k] for k in PROMPT_KEYS], self.merge_policy_)
            prediction = predict_center(merged, "merged").point
        return GroundingResult(
            bundle=bundle,
            heatmaps=heatmaps,
            centers=centers,
            dynamic=dyn,
            c_dec=c_dec,
            prediction=prediction,
            merged=merged,
            first_dynamic_layer=desc.layer_count - cfg.dynamic_depth + 1,
            frame_indices=traced.frame_indices,
        )

    def ground(self, query: GroundingQuery) -> GroundingResult:
        return self.ground_trace(self.trace_query(query), query.label)

    # -- batch API --------------------------------------------------------------

    def _queries(self, X, root=None) -> list[GroundingQuery]:
        if isinstance(X, (GroundingQuery, AnnotationRecord)):
            X = [X]
        out = []
        for item in X:
            if isinstance(item, GroundingQuery):
                out.append(item)
            elif isinstance(item, AnnotationRecord):
                out.append(self.load_query(item, root))
            else:
                raise InvalidInputError(
                    f"expected GroundingQuery or AnnotationRecord items, got {type(item).__name__}"
                )
        if not out:
            raise InvalidInputError("no samples given")
        return out

    def _map(self, fn, items: Sequence):
        if int(self.n_jobs) > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=int(self.n_jobs)) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def trace_records(self, X: Iterable, root=None) -> list[TracedSample]:
        check_is_fitted(self, "backbone_")
        items = list(X)

        def run(item):
            (query,) = self._queries([item], root)
            return self.trace_query(query)

        return self._map(run, items)

    def ground_many(self, X, root=None) -> list[GroundingResult]:
        check_is_fitted(self, "backbone_")
        items = list(X) if not isinstance(X, (GroundingQuery, AnnotationRecord)) else [X]

        def run(item):
            (query,) = self._queries([item], root)
            return self.ground(query)

        if not items:
            raise InvalidInputError("no samples given")
        return self._map(run, items)

    def predict(self, X, root=None) -> np.ndarray:
        """Fused ``(x, y)`` pixel per sample, shape (n, 2)."""
        return np.array([r.prediction for r in self.ground_many(X, root)], dtype=np.int64).reshape(-1, 2)

    def transform(self, X, root=None) -> list[np.ndarray]:
        """Per-sample stack of verb, object and action heatmaps, each (3, H, W)."""
        return [np.stack([r.heatmaps[k].grid for k in PROMPT_KEYS]) for r in self.ground_many(X, root)]

    def score(self, X, y=None, root=None) -> float:
        """Pointing-game accuracy; ``y`` holds the annotation records when X are queries."""
        records = list(y) if y is not None else list(X)
        if not all(isinstance(r, AnnotationRecord) for r in records):
            raise InvalidInputError("scoring needs AnnotationRecord ground truth")
        results = self.ground_many(X, root)
        if len(results) != len(records):
            raise InvalidInputError(f"{len(results)} samples but {len(records)} records")
        preds = {rec.sample_id: res.prediction_modes() for rec, res in zip(records, results)}
        return accuracy(preds, records).accuracy
