"""Verb/object/action prompts and fusion of their predictions."""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .grounding import Heatmap, min_max_normalize

VERB_TEMPLATE = "A photo of a person {verb} something."
OBJECT_TEMPLATE = "A photo of a person using {object}."
ACTION_TEMPLATE = "A photo of a person {action}."
VERB_FALLBACK = "A photo of a person doing something."
OBJECT_FALLBACK = "A photo of a person."

DEFAULT_FUSION_WEIGHTS = (0.2, 0.2, 0.6)
MERGE_STRATEGIES = ("center_average", "heatmap_multiply", "heatmap_average")


@dataclass(frozen=True)
class PromptBundle:
    action: str
    verb: str | None = None
    object: str | None = None
    weights: tuple[float, float, float] = DEFAULT_FUSION_WEIGHTS

    def __post_init__(self):
        if not self.action:
            raise ValueError("an action prompt is required")
        object.__setattr__(self, "weights", check_fusion_weights(self.weights))

    @property
    def prompts(self) -> tuple[str, str, str]:
        return render_prompts(self.verb, self.object, self.action)

    def to_json(self) -> str:
        d = asdict(self)
        d["weights"] = list(self.weights)
        d["prompts"] = dict(zip(("verb", "object", "action"), self.prompts))
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class MergePolicy:
    strategy: str = "center_average"
    ratio: tuple[float, float, float] = (1.0, 1.0, 3.0)

    def __post_init__(self):
        if self.strategy not in MERGE_STRATEGIES:
            raise ValueError(f"merge strategy must be one of {MERGE_STRATEGIES}, got {self.strategy!r}")
        ratio = tuple(float(r) for r in self.ratio)
        if len(ratio) != 3 or any(not r > 0 for r in ratio):
            raise ValueError(f"merge ratio needs three positive entries, got {self.ratio}")
        object.__setattr__(self, "ratio", ratio)

    @property
    def normalized(self) -> tuple[float, float, float]:
        total = sum(self.ratio)
        return tuple(r / total for r in self.ratio)


def check_fusion_weights(weights) -> tuple[float, float, float]:
    w = tuple(float(v) for v in weights)
    if len(w) != 3 or any(v < 0 for v in w):
        raise ValueError(f"fusion weights must be three non-negative numbers, got {weights}")
    if abs(sum(w) - 1.0) > 1e-9:
        raise ValueError(f"fusion weights must sum to 1, got {sum(w)!r}")
    return w


def render_prompts(verb: str | None, obj: str | None, action: str) -> tuple[str, str, str]:
    if not action:
        raise ValueError("an action prompt is required")
    verb_prompt = VERB_TEMPLATE.format(verb=verb) if verb else VERB_FALLBACK
    object_prompt = OBJECT_TEMPLATE.format(object=obj) if obj else OBJECT_FALLBACK
    return verb_prompt, object_prompt, ACTION_TEMPLATE.format(action=action)


# ---------------------------------------------------------------------------
# label decomposition


class Extractor(Protocol):
    def __call__(self, text: str) -> tuple[Sequence[str], Sequence[str]]: ...


_STOPWORDS = frozenset(
    """a an the this that these those it its of on in into onto to from with without
    for at by over under up down out off and or but then while some any all his her
    their them they he she we you i is are was were be been being has have had do
    does did not no very more most so too as until after before again also just""".split()
)
_VERBS = frozenset(
    """add bake beat blend boil break brush carry catch chop clean close cook cover crack
    cut dance dice dip drink drop eat fill flip fold fry grate grill hit hold jump kick
    knead lift melt mix open peel phone place play pour press pull push put remove ride
    roll rub run season serve shake slice smoke spread sprinkle squeeze stir strain take
    throw toss touch turn wash whisk wipe""".split()
)


def _lemma_known(word: str) -> bool:
    if word in _VERBS:
        return True
    for suffix, repl in (("ing", ""), ("ing", "e"), ("ed", ""), ("ed", "e"), ("s", ""), ("es", "")):
        if word.endswith(suffix) and word[: -len(suffix)] + repl in _VERBS:
            return True
    # doubled consonant: cutting -> cut, chopped -> chop
    for suffix in ("ing", "ed"):
        stem = word[: -len(suffix)]
        if word.endswith(suffix) and len(stem) > 2 and stem[-1] == stem[-2] and stem[:-1] in _VERBS:
            return True
    return False


def rule_based_extractor(text: str) -> tuple[list[str], list[str]]:
    """Verbs and objects from suffix rules and small closed word lists."""
    verbs, objects = [], []
    for word in re.findall(r"[a-z]+", text.lower()):
        if word in _STOPWORDS:
            continue
        if _lemma_known(word) or (word.endswith("ing") and len(word) > 5):
            bucket = verbs
        elif word.endswith("ly"):
            continue
        else:
            bucket = objects
        if word not in bucket:
            bucket.append(word)
    return verbs, objects


def split_underscore_label(label: str) -> tuple[str | None, str | None]:
    if not label:
        raise ValueError("label must be non-empty")
    verb, sep, obj = label.partition("_")
    return (verb or None), (obj if sep and obj else None)


def select_most_similar(
    candidates: Sequence[str],
    template: str,
    key: str,
    encode: Callable[[str], np.ndarray],
    visual_embedding: np.ndarray,
) -> str | None:
    """Candidate whose rendered prompt is most cosine-similar to the visual embedding."""
    best, best_sim = None, -math.inf
    v = np.asarray(visual_embedding, dtype=np.float64)
    vn = np.linalg.norm(v)
    for cand in candidates:
        e = np.asarray(encode(template.format(**{key: cand})), dtype=np.float64)
        den = np.linalg.norm(e) * vn
        sim = float(e @ v / den) if den > 0 else 0.0
        if sim > best_sim:
            best, best_sim = cand, sim
    return best


def decompose_label(
    label: str,
    style: str = "underscore",
    extractor: Extractor | None = None,
    encode: Callable[[str], np.ndarray] | None = None,
    visual_embedding=None,
) -> tuple[str | None, str | None]:
    """(verb, object) for a label; either may be ``None``.

    ``style="auto"`` treats labels without spaces as underscore labels.
    """
    if not label:
        raise ValueError("label must be non-empty")
    if style == "auto":
        style = "natural" if " " in label.strip() else "underscore"
    if style == "underscore":
        verb, obj = split_underscore_label(label)
        return verb, (obj.replace("_", " ") if obj else None)
    if style != "natural":
        raise ValueError(f"unknown label style {style!r}")
    verbs, objects = (extractor or rule_based_extractor)(label)
    if encode is None or visual_embedding is None:
        return (verbs[0] if verbs else None), (objects[0] if objects else None)
    verb = select_most_similar(verbs, VERB_TEMPLATE, "verb", encode, visual_embedding)
    obj = select_most_similar(objects, OBJECT_TEMPLATE, "object", encode, visual_embedding)
    return verb, obj


def action_text(label: str) -> str:
    return label.replace("_", " ").strip()


# ---------------------------------------------------------------------------
# fusion


def combine_centers(c_verb, c_obj, c_act, weights=DEFAULT_FUSION_WEIGHTS) -> tuple[float, float]:
    w = check_fusion_weights(weights)
    pts = [tuple(float(v) for v in c) for c in (c_verb, c_obj, c_act)]
    x = w[0] * pts[0][0] + w[1] * pts[1][0] + w[2] * pts[2][0]
    y = w[0] * pts[0][1] + w[1] * pts[1][1] + w[2] * pts[2][1]
    return x, y


def round_half_down(v: float) -> int:
    """Nearest integer; exact halves go to the lower integer."""
    return int(math.ceil(v - 0.5))


def round_point(point) -> tuple[int, int]:
    return round_half_down(point[0]), round_half_down(point[1])


def merge_heatmaps(maps: Sequence[Heatmap], policy: MergePolicy) -> Heatmap:
    if len(maps) != 3:
        raise ValueError(f"expected verb, object and action heatmaps, got {len(maps)}")
    grids = [np.asarray(m.grid, dtype=np.float64) for m in maps]
    if any(g.shape != grids[0].shape for g in grids):
        raise ValueError("heatmaps must share one grid shape")
    w = policy.normalized
    if policy.strategy == "heatmap_average":
        merged = w[0] * grids[0] + w[1] * grids[1] + w[2] * grids[2]
    elif policy.strategy == "heatmap_multiply":
        merged = grids[0] ** w[0] * grids[1] ** w[1] * grids[2] ** w[2]
    else:
        raise ValueError("center_average merges points, not heatmaps")
    return Heatmap(min_max_normalize(merged))
