"""Closed-grammar spatial prompts: generation, parsing, scene sampling.

The grammar has two families. Absolute prompts state every source's octant
and distance ("The music is located left, behind, below, 8.5m away.").
Relative prompts state one relation between exactly two sources (pairwise
distance, nearer/farther, left/right, above/below, or a Euclidean distance
comparison with or without front/back wording). Generation and parsing are
exact inverses over the whole grammar, which lets every dataset row be
validated by a round trip.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sim import Scene, SourceSpec, octant_of

# display labels per procedural class; the first entry is the canonical name
CLASS_LABELS = (
    ("tone", "music", "dance music", "telephone dialing with DTMF"),
    ("chirp", "emergency vehicle", "whip"),
    ("speech", "children playing", "animal", "baby crying"),
    ("noise burst", "spray", "mechanical fan", "boat, water vehicle"),
    ("click train", "scratching"),
)
LABEL_TO_CLASS = {
    label: cid for cid, labels in enumerate(CLASS_LABELS) for label in labels
}

LR_WORDS = ("left", "right")
FB_WORDS = ("front", "behind")
AB_WORDS = ("above", "below")

RELATIONS = ("pair_distance", "nearer_farther", "left_right", "above_below",
             "euclid_compare")

# category mix: renormalized sample-count proportions of the four families
_RAW_MIX = (36.8, 31.2, 13.4, 14.0)
CATEGORIES = ("single_abs", "double_abs", "rel_direction", "rel_distance")
CATEGORY_MIX = {c: p / sum(_RAW_MIX) for c, p in zip(CATEGORIES, _RAW_MIX)}

# scene sampling keeps angles away from octant boundaries so every stated
# label is acoustically unambiguous
AZ_MARGIN = 0.2
ELEV_MARGIN = 0.1


class PromptParseError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class SourceRef:
    """One source as described by a prompt; unknown fields stay None."""

    label: str
    lr: str | None = None
    fb: str | None = None
    ab: str | None = None
    distance: float | None = None


@dataclass(frozen=True)
class SpatialSpec:
    """Structured content of one prompt."""

    kind: str  # "absolute" | "relative"
    sources: tuple
    relation: str | None = None
    pair_distance_m: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        for ref in self.sources:
            if ref.label not in LABEL_TO_CLASS:
                raise VocabularyError(f"unknown class label: {ref.label!r}")
            if ref.distance is not None:
                _check_distance(ref.distance)
        if self.kind == "absolute":
            if not 1 <= len(self.sources) <= 2:
                raise ValueError("absolute spec needs 1 or 2 sources")
            for ref in self.sources:
                if None in (ref.lr, ref.fb, ref.ab, ref.distance):
                    raise ValueError("absolute spec needs full octant and distance")
                _check_octant_words(ref)
        elif self.kind == "relative":
            if len(self.sources) != 2:
                raise ValueError("relative spec needs exactly 2 sources")
            if self.relation not in RELATIONS:
                raise ValueError(f"unknown relation {self.relation!r}")
            if (self.pair_distance_m is not None) != (self.relation == "pair_distance"):
                raise ValueError("pair distance set iff relation is pair_distance")
            if self.pair_distance_m is not None:
                _check_distance(self.pair_distance_m)
            # relative prompts never state per-source octants or distances,
            # except the front/back surface form of the Euclidean comparison
            fbs = tuple(ref.fb for ref in self.sources)
            fb_ok = fbs == (None, None) or (
                self.relation == "euclid_compare" and fbs == ("behind", "front")
            )
            if not fb_ok or any(
                ref.lr is not None or ref.ab is not None or ref.distance is not None
                for ref in self.sources
            ):
                raise ValueError("relative spec states fields its template cannot say")
        else:
            raise ValueError(f"unknown spec kind {self.kind!r}")


def _check_distance(d: float):
    if not 0.5 <= d <= 10.0 or round(d * 2) != d * 2:
        raise ValueError(f"distance {d} not on the 0.5 m grid in [0.5, 10]")


def _check_octant_words(ref: SourceRef):
    if ref.lr not in LR_WORDS or ref.fb not in FB_WORDS or ref.ab not in AB_WORDS:
        raise ValueError(f"bad octant words ({ref.lr}, {ref.fb}, {ref.ab})")


def format_distance(d: float) -> str:
    return str(int(d)) if d == int(d) else f"{d:.1f}"


def _abs_clause(ref: SourceRef) -> str:
    return (f"the {ref.label} is located {ref.lr}, {ref.fb}, {ref.ab}, "
            f"{format_distance(ref.distance)}m away.")


def generate_prompt(spec: SpatialSpec, rng=None) -> str:
    """Render a spec with its family's canonical template. The rng argument
    is accepted for interface stability; templates are currently canonical,
    so generation is fully deterministic."""
    s = spec.sources
    if spec.kind == "absolute":
        text = "The " + _abs_clause(s[0])[4:]
        if len(s) == 2:
            text += " And " + _abs_clause(s[1])
        return text
    if spec.relation == "pair_distance":
        return (f"The distance between the sound of the {s[0].label} and the "
                f"sound of the {s[1].label} is "
                f"{format_distance(spec.pair_distance_m)}m away.")
    if spec.relation == "nearer_farther":
        return (f"The sound of the {s[0].label} is nearer to you than the "
                f"sound of the {s[1].label}.")
    if spec.relation == "left_right":
        return (f"The sound from the {s[0].label} originates on the left, and "
                f"the sound from the {s[1].label} originates on the right.")
    if spec.relation == "above_below":
        return (f"The sound from the {s[0].label} is above and the sound from "
                f"the {s[1].label} is below.")
    # euclid_compare: front/back surface form when both fb fields are stated
    if s[0].fb == "behind" and s[1].fb == "front":
        return (f"The sound from the {s[0].label} on the back is located "
                f"further away, while the sound from the {s[1].label} is "
                f"closer to the front.")
    return (f"The sound from the {s[0].label} is further away from you in "
            f"Euclidean distance than the sound from the {s[1].label}.")


_PREFIX_ABS = "The "
_PREFIX_PAIR = "The distance between the sound of the "
_PREFIX_FROM = "The sound from the "
_PREFIX_OF = "The sound of the "


def _check_label(label: str, text: str):
    if label not in LABEL_TO_CLASS:
        raise VocabularyError(
            f"unknown class label: {label!r} (position {text.find(label)})"
        )
    return label


def _parse_distance(tok: str) -> float:
    try:
        d = float(tok)
    except ValueError:
        raise PromptParseError(f"bad distance literal {tok!r}") from None
    _check_distance(d)
    return d


def _split_once(text: str, sep: str, what: str):
    head, found, tail = text.partition(sep)
    if not found:
        raise PromptParseError(f"parse error: missing {what!r} delimiter")
    return head, tail


def _parse_abs_clause(clause: str, text: str) -> SourceRef:
    label, rest = _split_once(clause, " is located ", " is located ")
    parts = rest.split(", ")
    if len(parts) != 4 or not parts[3].endswith("m away."):
        raise PromptParseError(
            f"parse error at position {len(text) - len(rest)}: "
            "expected 'lr, fb, ab, <d>m away.'"
        )
    lr, fb, ab = parts[0], parts[1], parts[2]
    d = _parse_distance(parts[3][: -len("m away.")])
    ref = SourceRef(_check_label(label, text), lr, fb, ab, d)
    _check_octant_words(ref)
    return ref


def parse_prompt(text: str) -> SpatialSpec:
    """Invert generate_prompt. Raises PromptParseError for text outside the
    grammar and VocabularyError for unknown class labels."""
    if not isinstance(text, str) or not text.startswith("The "):
        raise PromptParseError("parse error at position 0: not a grammar sentence")
    if text.startswith(_PREFIX_PAIR):
        body = text[len(_PREFIX_PAIR):]
        l1, rest = _split_once(body, " and the sound of the ", "and the sound of the")
        l2, rest = _split_once(rest, " is ", " is ")
        if not rest.endswith("m away."):
            raise PromptParseError("parse error: expected '<d>m away.' ending")
        d = _parse_distance(rest[: -len("m away.")])
        refs = (SourceRef(_check_label(l1, text)), SourceRef(_check_label(l2, text)))
        return SpatialSpec("relative", refs, "pair_distance", d)
    if text.startswith(_PREFIX_FROM):
        body = text[len(_PREFIX_FROM):]
        rules = (
            (" on the back is located further away, while the sound from the ",
             " is closer to the front.", "euclid_compare", ("behind", "front")),
            (" originates on the left, and the sound from the ",
             " originates on the right.", "left_right", None),
            (" is above and the sound from the ", " is below.", "above_below", None),
            (" is further away from you in Euclidean distance than the sound from the ",
             ".", "euclid_compare", None),
        )
        for mid, suffix, relation, fbs in rules:
            if mid in body and body.endswith(suffix):
                l1, rest = _split_once(body, mid, mid.strip())
                l2 = rest[: -len(suffix)]
                refs = (
                    SourceRef(_check_label(l1, text), fb=fbs[0] if fbs else None),
                    SourceRef(_check_label(l2, text), fb=fbs[1] if fbs else None),
                )
                return SpatialSpec("relative", refs, relation)
        raise PromptParseError(
            f"parse error at position {len(_PREFIX_FROM)}: "
            "no relative template matches"
        )
    if text.startswith(_PREFIX_OF):
        body = text[len(_PREFIX_OF):]
        mid = " is nearer to you than the sound of the "
        if mid not in body or not body.endswith("."):
            raise PromptParseError(
                f"parse error at position {len(_PREFIX_OF)}: "
                "expected the nearer/farther template"
            )
        l1, rest = _split_once(body, mid, mid.strip())
        refs = (SourceRef(_check_label(l1, text)),
                SourceRef(_check_label(rest[:-1], text)))
        return SpatialSpec("relative", refs, "nearer_farther")
    # absolute family: one clause, or two joined by ". And the "
    if " is located " not in text:
        raise PromptParseError("parse error at position 4: no template matches")
    first, found, second = text.partition(". And the ")
    refs = [_parse_abs_clause(first[len(_PREFIX_ABS):] + ("." if found else ""), text)]
    if found:
        refs.append(_parse_abs_clause(second, text))
    return SpatialSpec("absolute", tuple(refs))


# ---------------------------------------------------------------------------
# scene sampling

def _pick_labels(rng, n: int):
    cids = rng.choice(len(CLASS_LABELS), size=n, replace=False)
    return [(int(c), str(rng.choice(CLASS_LABELS[int(c)]))) for c in cids]


def _quantized_distance(rng) -> float:
    return float(rng.integers(1, 21)) * 0.5


def _azimuth_in(rng, lr: str, fb: str) -> float:
    lo, hi = AZ_MARGIN, math.pi / 2 - AZ_MARGIN
    if fb == "behind":
        lo, hi = math.pi / 2 + AZ_MARGIN, math.pi - AZ_MARGIN
    az = rng.uniform(lo, hi)
    return az if lr == "left" else -az

def _elevation_in(rng, ab: str) -> float:
    e = rng.uniform(ELEV_MARGIN, math.pi / 2 - ELEV_MARGIN)
    return e if ab == "above" else -e


def _free_azimuth(rng) -> float:
    return rng.uniform(-math.pi + 0.05, math.pi - 0.05)


def _free_elevation(rng) -> float:
    return rng.uniform(-math.pi / 2 + ELEV_MARGIN, math.pi / 2 - ELEV_MARGIN)


def _angles_of(pos: np.ndarray) -> tuple[float, float, float]:
    d = float(np.linalg.norm(pos))
    elev = math.asin(max(-1.0, min(1.0, pos[2] / d)))
    az = math.atan2(pos[1], pos[0])
    if az <= -math.pi:  # atan2 can return -pi; azimuth domain is (-pi, pi]
        az = math.pi
    return az, elev, d


def _abs_source(rng, cid: int, label: str) -> tuple[SourceSpec, SourceRef]:
    lr = str(rng.choice(LR_WORDS))
    fb = str(rng.choice(FB_WORDS))
    ab = str(rng.choice(AB_WORDS))
    d = _quantized_distance(rng)
    src = SourceSpec(cid, label, _azimuth_in(rng, lr, fb), _elevation_in(rng, ab), d)
    return src, SourceRef(label, lr, fb, ab, d)


def sample_scene_spec(rng, category: str) -> tuple[Scene, SpatialSpec]:
    """Draw a (scene, spec) pair whose geometry satisfies the spec exactly:
    stated octants hold with margin, stated distances are the true radial
    distances, and stated relations hold in 3D."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if category in ("single_abs", "double_abs"):
        n = 1 if category == "single_abs" else 2
        pairs = [_abs_source(rng, cid, label) for cid, label in _pick_labels(rng, n)]
        return (Scene(tuple(p[0] for p in pairs)),
                SpatialSpec("absolute", tuple(p[1] for p in pairs)))
    (c0, l0), (c1, l1) = _pick_labels(rng, 2)
    if category == "rel_direction":
        relation = str(rng.choice(["left_right", "above_below"]))
        if relation == "left_right":
            az0 = rng.uniform(AZ_MARGIN, math.pi - AZ_MARGIN)
            az1 = -rng.uniform(AZ_MARGIN, math.pi - AZ_MARGIN)
            e0, e1 = _free_elevation(rng), _free_elevation(rng)
        else:
            az0, az1 = _free_azimuth(rng), _free_azimuth(rng)
            e0 = _elevation_in(rng, "above")
            e1 = _elevation_in(rng, "below")
        scene = Scene((
            SourceSpec(c0, l0, az0, e0, rng.uniform(0.5, 10.0)),
            SourceSpec(c1, l1, az1, e1, rng.uniform(0.5, 10.0)),
        ))
        return scene, SpatialSpec("relative", (SourceRef(l0), SourceRef(l1)), relation)
    # rel_distance: four surface forms
    form = str(rng.choice(["pair_distance", "nearer_farther", "euclid_compare",
                           "euclid_compare_fb"]))
    if form == "pair_distance":
        pair_d = _quantized_distance(rng)
        for _ in range(1000):
            src0 = SourceSpec(c0, l0, _free_azimuth(rng), _free_elevation(rng),
                              rng.uniform(0.5, 10.0))
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            pos1 = src0.position() + pair_d * u
            az1, e1, d1 = _angles_of(pos1)
            if 0.5 < d1 < 10.0 and abs(e1) < math.pi / 2 - 1e-3:
                scene = Scene((src0, SourceSpec(c1, l1, az1, e1, d1)))
                return scene, SpatialSpec(
                    "relative", (SourceRef(l0), SourceRef(l1)),
                    "pair_distance", pair_d,
                )
        raise RuntimeError("could not place a source pair at the drawn distance")
    if form == "nearer_farther":
        d0 = rng.uniform(0.5, 9.0)
        d1 = rng.uniform(d0 + 0.5, 10.0)
        refs = (SourceRef(l0), SourceRef(l1))
        relation = "nearer_farther"
    elif form == "euclid_compare":
        d1 = rng.uniform(0.5, 9.0)
        d0 = rng.uniform(d1 + 0.5, 10.0)
        refs = (SourceRef(l0), SourceRef(l1))
        relation = "euclid_compare"
    else:  # euclid_compare_fb: source 0 behind and farther, source 1 in front
        d1 = rng.uniform(0.5, 9.0)
        d0 = rng.uniform(d1 + 0.5, 10.0)
        refs = (SourceRef(l0, fb="behind"), SourceRef(l1, fb="front"))
        relation = "euclid_compare"
    if refs[0].fb == "behind":
        az0 = _azimuth_in(rng, str(rng.choice(LR_WORDS)), "behind")
        az1 = _azimuth_in(rng, str(rng.choice(LR_WORDS)), "front")
    else:
        az0, az1 = _free_azimuth(rng), _free_azimuth(rng)
    scene = Scene((
        SourceSpec(c0, l0, az0, _free_elevation(rng), d0),
        SourceSpec(c1, l1, az1, _free_elevation(rng), d1),
    ))
    return scene, SpatialSpec("relative", refs, relation)


def sample_category(rng) -> str:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    names = list(CATEGORY_MIX)
    probs = np.array([CATEGORY_MIX[n] for n in names])
    return str(names[int(rng.choice(len(names), p=probs / probs.sum()))])


def category_counts(total: int, mix: dict | None = None) -> dict[str, int]:
    """Exact per-category sample counts via largest-remainder rounding."""
    mix = CATEGORY_MIX if mix is None else mix
    if set(mix) != set(CATEGORIES):
        raise ValueError(f"category mix must cover exactly {CATEGORIES}")
    norm = sum(mix.values())
    quotas = {c: total * p / norm for c, p in mix.items()}
    counts = {c: int(math.floor(q)) for c, q in quotas.items()}
    short = total - sum(counts.values())
    by_frac = sorted(quotas, key=lambda c: quotas[c] - counts[c], reverse=True)
    for c in by_frac[:short]:
        counts[c] += 1
    return counts


def spec_satisfied(scene: Scene, spec: SpatialSpec, tol: float = 1e-6) -> bool:
    """True when the scene's geometry backs every claim in the spec."""
    if len(scene.sources) != len(spec.sources):
        return False
    for src, ref in zip(scene.sources, spec.sources):
        if src.label != ref.label:
            return False
        lr, fb, ab = octant_of(src)
        for stated, actual in ((ref.lr, lr), (ref.fb, fb), (ref.ab, ab)):
            if stated is not None and stated != actual:
                return False
        if ref.distance is not None and abs(src.distance - ref.distance) > tol:
            return False
    if spec.kind == "absolute":
        return True
    s0, s1 = scene.sources
    if spec.relation == "pair_distance":
        gap = float(np.linalg.norm(s0.position() - s1.position()))
        return abs(gap - spec.pair_distance_m) <= max(tol, 1e-6 * spec.pair_distance_m)
    if spec.relation == "nearer_farther":
        return s0.distance < s1.distance
    if spec.relation == "euclid_compare":
        return s0.distance > s1.distance
    if spec.relation == "left_right":
        return octant_of(s0)[0] == "left" and octant_of(s1)[0] == "right"
    if spec.relation == "above_below":
        return s0.elevation > 0 and s1.elevation < 0
    return False


# ---------------------------------------------------------------------------
# manifest serialization

def spec_to_json(spec: SpatialSpec) -> dict:
    return {
        "kind": spec.kind,
        "relation": spec.relation,
        "pair_distance_m": spec.pair_distance_m,
        "sources": [
            {"label": s.label, "lr": s.lr, "fb": s.fb, "ab": s.ab,
             "distance": s.distance}
            for s in spec.sources
        ],
    }


def spec_from_json(d: dict) -> SpatialSpec:
    return SpatialSpec(
        kind=d["kind"],
        sources=tuple(SourceRef(**s) for s in d["sources"]),
        relation=d.get("relation"),
        pair_distance_m=d.get("pair_distance_m"),
    )


# ---------------------------------------------------------------------------
# closed-vocabulary tokenization for the text encoder

def _template_words() -> set[str]:
    words = set()
    for fragment in (
        "The distance between the sound of the and is located away . ,",
        "m away on the back further while closer to front originates left",
        "right above below you in Euclidean than nearer from And",
    ):
        words.update(fragment.split())
    for labels in CLASS_LABELS:
        for label in labels:
            words.update(label.replace(",", " ,").split())
    for lst in (LR_WORDS, FB_WORDS, AB_WORDS):
        words.update(lst)
    return words


def build_vocabulary() -> list[str]:
    """Stable token list: specials, template/label words, distance tokens."""
    dist_tokens = [format_distance(k * 0.5) + "m" for k in range(1, 21)]
    return ["<pad>"] + sorted(_template_words()) + dist_tokens


VOCABULARY = build_vocabulary()
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCABULARY)}


def tokenize(text: str) -> list[int]:
    """Word-level tokens over the grammar lexicon; trailing punctuation is
    split off. Raises VocabularyError on anything outside the vocabulary."""
    ids = []
    for raw in text.split():
        chunks = []
        while raw and raw[-1] in ".,":
            chunks.append(raw[-1])
            raw = raw[:-1]
        for tok in ([raw] if raw else []) + list(reversed(chunks)):
            if tok not in TOKEN_TO_ID:
                raise VocabularyError(f"out-of-vocabulary token {tok!r}")
            ids.append(TOKEN_TO_ID[tok])
    return ids
