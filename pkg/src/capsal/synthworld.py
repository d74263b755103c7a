"""Synthetic scenes with exact word/cell/frame ground truth.

A scene places K colored objects on a g x g grid over m frames. Each
(noun, attribute) pair has a fixed codebook feature vector; occupied
cells carry the object's code plus Gaussian noise, empty cells the
background code plus noise. Item descriptors are the pooled grids.
Captions follow the template

    a <attr> <noun> [and a <attr> <noun>] [then a <attr> <noun>]

where objects joined by "and" share the early frame span and an object
introduced by "then" occupies a later span. Every noun phrase maps to
exactly one object with known cell and span, which makes pointing-game
and localization ground truth exact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError
from .seq2seq import DescriptorSequence, Vocabulary, pool_cells

DEFAULT_NOUNS = ("arrow", "circle", "cross", "diamond",
                 "ring", "square", "star", "triangle")
DEFAULT_ATTRS = ("blue", "green", "red", "yellow")
TEMPLATE_WORDS = ("a", "and", "then")


@dataclass
class SynthConfig:
    g: int = 4
    m: int = 8
    k_min: int = 1
    k_max: int = 3
    sigma: float = 0.05
    d_feat: int = 24
    code_scale: float = 4.0
    pooling: str = "mean"
    nouns: tuple[str, ...] = DEFAULT_NOUNS
    attrs: tuple[str, ...] = DEFAULT_ATTRS
    codebook_seed: int = 7919

    def __post_init__(self):
        if self.g < 1 or self.m < 1:
            raise ContractError("grid size and frame count must be >= 1")
        if not 1 <= self.k_min <= self.k_max:
            raise ContractError("need 1 <= k_min <= k_max")
        if self.k_max > self.g * self.g:
            raise ContractError("more objects than cells")


class FeatureCodebook:
    """Fixed code vectors per (noun, attribute) pair plus a background code.

    Directions start from a seeded Gaussian draw and are repelled on the
    unit sphere until the worst pairwise coherence stops improving; for 33
    codes in 24 dimensions this lands near the Welch bound (|cos| ~ 0.12),
    far below the 0.5 contract. Low cross-talk keeps superposed objects
    linearly separable. Object codes carry `code_scale` times the
    background amplitude, the way detected-concept activations stand out
    against a quiet background channel.
    """

    MAX_COSINE = 0.5

    def __init__(self, nouns, attrs, d_feat: int, seed: int, sigma: float,
                 code_scale: float = 4.0):
        self.d_feat = d_feat
        self.sigma = sigma
        n_codes = 1 + len(nouns) * len(attrs)
        codes = self._spread(np.random.default_rng(seed), n_codes)
        gram = np.abs(codes @ codes.T) - np.eye(n_codes)
        if gram.max() >= self.MAX_COSINE:
            raise ContractError(
                f"could not place {n_codes} codebook vectors in "
                f"{d_feat} dimensions under coherence {self.MAX_COSINE}"
            )
        self.background = codes[0]
        self.codes = {
            (n, a): code_scale * codes[1 + i * len(attrs) + j]
            for i, n in enumerate(nouns)
            for j, a in enumerate(attrs)
        }

    def _spread(self, rng, n_codes: int, iters: int = 20000,
                step: float = 0.5) -> np.ndarray:
        """Minimize pairwise coherence by gradient repulsion on the sphere."""
        v = rng.normal(size=(n_codes, self.d_feat))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        for _ in range(iters):
            gram = v @ v.T
            np.fill_diagonal(gram, 0.0)
            # push each vector away from its signed overlaps; the cubed
            # overlap concentrates the force on the worst pairs
            v -= step * (gram**3) @ v / n_codes
            v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v

    def code(self, noun: str, attr: str) -> np.ndarray:
        return self.codes[(noun, attr)]

    def nearest(self, feature: np.ndarray):
        """Best-matching (noun, attr) pair (or None for background) by cosine."""
        best, best_sim = None, float(feature @ self.background) / (
            np.linalg.norm(feature) + 1e-300
        )
        for key, code in self.codes.items():
            sim = float(feature @ code) / (np.linalg.norm(feature) + 1e-300)
            if sim > best_sim:
                best, best_sim = key, sim
        return best


@dataclass(frozen=True)
class SceneObject:
    noun: str
    attribute: str
    cell: tuple[int, int]
    span: tuple[int, int]  # frame interval [start, end)


@dataclass
class PhraseGroundTruth:
    label: str
    token_indices: tuple[int, ...]
    noun_index: int
    attr_index: int
    cells: tuple[tuple[int, int], ...]
    span: tuple[int, int]


@dataclass
class Scene:
    grid_size: int
    frames: int
    objects: list[SceneObject]
    caption: list[str]
    phrases: list[PhraseGroundTruth] = field(default_factory=list)

    def layout_key(self) -> str:
        """Canonical (object layout, caption) identity used for split routing."""
        objs = ";".join(
            f"{o.noun},{o.attribute},{o.cell[0]},{o.cell[1]},{o.span[0]},{o.span[1]}"
            for o in self.objects
        )
        return objs + "|" + " ".join(self.caption)


def _build_caption(early: list[SceneObject], late: SceneObject | None):
    tokens: list[str] = []
    phrases: list[PhraseGroundTruth] = []

    def add_phrase(obj: SceneObject):
        start = len(tokens)
        tokens.extend(["a", obj.attribute, obj.noun])
        phrases.append(PhraseGroundTruth(
            label=f"a {obj.attribute} {obj.noun}",
            token_indices=(start, start + 1, start + 2),
            noun_index=start + 2,
            attr_index=start + 1,
            cells=(obj.cell,),
            span=obj.span,
        ))

    add_phrase(early[0])
    for obj in early[1:]:
        tokens.append("and")
        add_phrase(obj)
    if late is not None:
        tokens.append("then")
        add_phrase(late)
    return tokens, phrases


def generate_scene(seed: int, config: SynthConfig,
                   codebook: FeatureCodebook | None = None):
    """Deterministically generate one scene and its descriptor sequence.

    The returned DescriptorSequence carries the full pre-pool grids; the
    dataset writer decides whether to persist them.
    """
    if codebook is None:
        codebook = FeatureCodebook(config.nouns, config.attrs, config.d_feat,
                                   config.codebook_seed, config.sigma,
                                   config.code_scale)
    rng = np.random.default_rng(seed)
    g, m = config.g, config.m

    k_max = min(config.k_max, 2) if m < 2 else config.k_max
    k = int(rng.integers(config.k_min, k_max + 1))
    noun_ids = rng.choice(len(config.nouns), size=k, replace=False)
    attr_ids = rng.integers(0, len(config.attrs), size=k)
    cell_ids = rng.choice(g * g, size=k, replace=False)

    has_then = k >= 2 and m >= 2 and (k == 3 or rng.random() < 0.5)
    if has_then:
        lo = max(1, m // 2 - 1)
        hi = min(m - 1, m // 2 + 1)
        split = int(rng.integers(lo, hi + 1))
        early_span, late_span = (0, split), (split, m)
    else:
        early_span, late_span = (0, m), (0, m)

    drawn = [
        SceneObject(
            noun=config.nouns[noun_ids[i]],
            attribute=config.attrs[attr_ids[i]],
            cell=(int(cell_ids[i]) // g, int(cell_ids[i]) % g),
            span=late_span if (has_then and i == k - 1) else early_span,
        )
        for i in range(k)
    ]
    late = drawn[-1] if has_then else None
    early = drawn[:-1] if has_then else drawn
    early = sorted(early, key=lambda o: (o.noun, o.attribute))

    caption, phrases = _build_caption(early, late)
    objects = early + ([late] if late is not None else [])
    scene = Scene(grid_size=g, frames=m, objects=objects,
                  caption=caption, phrases=phrases)

    grids = np.empty((m, g, g, config.d_feat))
    grids[...] = codebook.background
    for obj in objects:
        s, e = obj.span
        a, b = obj.cell
        grids[s:e, a, b] = codebook.code(obj.noun, obj.attribute)
    grids += rng.normal(0.0, config.sigma, grids.shape)
    seq = DescriptorSequence(grids=grids, pooling=config.pooling)
    return scene, seq


def _split_of_key(key: str, weights: tuple[int, int, int]) -> int:
    """Stable hash routing of a layout key to a split (0 train, 1 val, 2 test)."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    slot = int.from_bytes(digest[:8], "big") % sum(weights)
    if slot < weights[0]:
        return 0
    if slot < weights[0] + weights[1]:
        return 1
    return 2


def generate_dataset(seed: int, config: SynthConfig,
                     n_train: int = 2000, n_val: int = 200, n_test: int = 200,
                     split_weights: tuple[int, int, int] = (10, 1, 1)):
    """Three split-disjoint scene lists: no (layout, caption) pair crosses splits.

    Each canonical layout key is hash-assigned to exactly one split, so a
    layout seen in training can never appear in validation or test. Draws
    routed to an already-full split are discarded.
    """
    if min(n_train, n_val, n_test) < 1:
        raise ContractError("split sizes must be >= 1")
    codebook = FeatureCodebook(config.nouns, config.attrs, config.d_feat,
                               config.codebook_seed, config.sigma,
                               config.code_scale)
    master = np.random.default_rng(seed)
    targets = (n_train, n_val, n_test)
    splits: tuple[list, list, list] = ([], [], [])
    while any(len(s) < t for s, t in zip(splits, targets)):
        scene_seed = int(master.integers(0, 2**63))
        scene, seq = generate_scene(scene_seed, config, codebook)
        which = _split_of_key(scene.layout_key(), split_weights)
        if len(splits[which]) < targets[which]:
            splits[which].append((scene, seq))
    train, val, test = splits
    train_keys = {scene.layout_key() for scene, _ in train}
    for part in (val, test):
        for scene, _ in part:
            if scene.layout_key() in train_keys:
                raise ContractError("split leakage detected")
    return train, val, test


def cell_index(cell: tuple[int, int], g: int) -> int:
    """Row-major sequence index of grid cell (a, b)."""
    return cell[0] * g + cell[1]


def image_mode(scene: Scene, seq: DescriptorSequence) -> DescriptorSequence:
    """Row-major scan of a single-frame scene into a g*g-item sequence.

    Ground-truth cells map to sequence indices via `cell_index`.
    """
    from .saliency import image_mode_sequence

    if scene.frames != 1 or seq.m != 1:
        raise ContractError("image mode requires a single-frame scene")
    if seq.grids is None:
        raise ContractError("image mode requires stored grids")
    return image_mode_sequence(seq.grids[0])


def vocabulary_from_scenes(scenes) -> Vocabulary:
    """Closed template vocabulary: the sorted set of caption tokens."""
    tokens = sorted({tok for scene, _ in scenes for tok in scene.caption})
    return Vocabulary(tokens)


def framed_caption(scene: Scene) -> list[str]:
    from .seq2seq import BOS_TOKEN, EOS_TOKEN

    return [BOS_TOKEN] + list(scene.caption) + [EOS_TOKEN]


# ---------------------------------------------------------------------
# dataset files: one scene per line
#   g=..;m=..;k=..;d=..;pooling=..;grids=0|1 | objects | caption | hex payload
# ---------------------------------------------------------------------

def _object_field(obj: SceneObject) -> str:
    return (f"{obj.noun}:{obj.attribute}:{obj.cell[0]},{obj.cell[1]}"
            f":{obj.span[0]},{obj.span[1]}")


def _parse_object(text: str) -> SceneObject:
    noun, attr, cell, span = text.split(":")
    a, b = (int(x) for x in cell.split(","))
    s, e = (int(x) for x in span.split(","))
    return SceneObject(noun=noun, attribute=attr, cell=(a, b), span=(s, e))


def save_dataset(path, records, store_grids: bool) -> None:
    """Write scenes as line-oriented records with hex float64 payloads."""
    with open(path, "w") as fh:
        for scene, seq in records:
            header = (f"g={scene.grid_size};m={scene.frames};"
                      f"k={len(scene.objects)};d={seq.d_feat};"
                      f"pooling={seq.pooling};grids={int(store_grids)}")
            objects = ";".join(_object_field(o) for o in scene.objects)
            caption = " ".join(scene.caption)
            if store_grids:
                if seq.grids is None:
                    raise ContractError("record has no grids to store")
                payload = seq.grids.astype("<f8").tobytes().hex()
            else:
                payload = seq.items.astype("<f8").tobytes().hex()
            fh.write("|".join((header, objects, caption, payload)) + "\n")


def _rebuild_phrases(scene: Scene) -> list[PhraseGroundTruth]:
    """Recover phrase ground truth from the template caption and objects."""
    starts = [i for i, tok in enumerate(scene.caption) if tok == "a"]
    if len(starts) != len(scene.objects):
        raise ContractError("caption does not match object count")
    phrases = []
    for start, obj in zip(starts, scene.objects):
        phrases.append(PhraseGroundTruth(
            label=f"a {obj.attribute} {obj.noun}",
            token_indices=(start, start + 1, start + 2),
            noun_index=start + 2,
            attr_index=start + 1,
            cells=(obj.cell,),
            span=obj.span,
        ))
    return phrases


def load_dataset(path):
    """Read records written by save_dataset."""
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                header, objects, caption, payload = line.split("|")
                fields = dict(kv.split("=") for kv in header.split(";"))
                g, m, d = int(fields["g"]), int(fields["m"]), int(fields["d"])
                pooling = fields["pooling"]
                has_grids = fields["grids"] == "1"
                objs = [_parse_object(o) for o in objects.split(";")]
                data = np.frombuffer(bytes.fromhex(payload), dtype="<f8")
            except (ValueError, KeyError) as exc:
                raise ContractError(f"malformed dataset line {line_no}: {exc}") from None
            scene = Scene(grid_size=g, frames=m, objects=objs,
                          caption=caption.split(" "))
            scene.phrases = _rebuild_phrases(scene)
            if has_grids:
                grids = data.reshape(m, g, g, d).astype(np.float64)
                seq = DescriptorSequence(grids=grids, pooling=pooling)
            else:
                seq = DescriptorSequence(items=data.reshape(m, d).astype(np.float64),
                                         pooling=pooling)
            records.append((scene, seq))
    return records
