"""Caption-guided saliency via single-descriptor probe passes.

For every word of a (predicted or arbitrary) query sentence, the full
input sequence is replaced by one descriptor at a time and the resulting
drop in the word's probability is measured as an information loss
Loss(t, i) = -ln q_i(y_t = w). Negated losses are linearly rescaled to
[0, 1] per word and softmax-normalized into stochastic saliency rows.
Spatial maps come from probing single pre-pool grid cells of one frame.

All probes are independent forward passes, so they can be assembled into
one batch (r*m + m sequences, n+1 teacher-forced decoder steps each) or
run sequentially with identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import seq2seq as s2s
from .numerics import ContractError
from .seq2seq import (
    BOS,
    EOS,
    UNK,
    DescriptorSequence,
    Distribution,
    ModelParams,
    StepCounter,
)


@dataclass
class Query:
    """An arbitrary sentence to probe, with optional phrase groupings.

    Phrase groups are (label, token index tuple) pairs; indices refer to
    positions in `tokens`.
    """

    tokens: list[str]
    phrase_groups: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def __post_init__(self):
        if not self.tokens:
            raise ContractError("query sentence is empty")
        for label, indices in self.phrase_groups:
            if not indices:
                raise ContractError(f"phrase group {label!r} is empty")
            for idx in indices:
                if not 0 <= idx < len(self.tokens):
                    raise ContractError(
                        f"phrase group {label!r} index {idx} out of range"
                    )


@dataclass
class SaliencyMap:
    """Per-word saliency over the input sequence.

    Rows t cover the n query words; the end-of-sequence position (the
    n+1th decoder step) is kept in the separate eos_* fields. Raw values
    are losses -ln q_i(y_t = w) >= 0; scaled rows live in [0, 1] with the
    smallest loss mapped to 1; alpha rows are softmax(scaled) and sum to 1.
    """

    words: list[str]
    word_ids: list[int]
    unk_positions: list[int]
    temporal_raw: np.ndarray
    temporal_scaled: np.ndarray
    temporal_alpha: np.ndarray
    eos_raw: np.ndarray
    eos_scaled: np.ndarray
    eos_alpha: np.ndarray
    spatial_raw: np.ndarray | None = None
    spatial_scaled: np.ndarray | None = None
    spatial_eos_raw: np.ndarray | None = None
    spatial_eos_scaled: np.ndarray | None = None
    grid_g: int | None = None
    image_grid_g: int | None = None
    mode: str = "query"
    probe_sequences: int = 0
    encoder_steps: int = 0
    decoder_steps: int = 0

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def n_items(self) -> int:
        return self.temporal_raw.shape[1]


def onehot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


def word_loss(q: Distribution | np.ndarray, word_index: int) -> float:
    """-ln q(y_t = w); equals KL(onehot(w) || q) by the one-hot reduction."""
    probs = q.probs if isinstance(q, Distribution) else np.asarray(q)
    return float(-np.log(probs[word_index]))


def scale_losses(raw) -> np.ndarray:
    """Negate and linearly rescale losses to [0, 1]; low loss -> 1.

    An all-equal row has no defined linear map and becomes all 0.5.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ContractError("cannot rescale an empty loss row")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (hi - raw) / (hi - lo)


def _probe_vector(seq: DescriptorSequence, probe) -> np.ndarray:
    """Resolve a probe spec ("item", i) or ("cell", i, a, b) to a (1, d) row."""
    kind = probe[0]
    if kind == "item":
        _, i = probe
        if not 0 <= i < seq.m:
            raise ContractError(f"probe item {i} out of range")
        return seq.items[i : i + 1]
    if kind == "cell":
        _, i, a, b = probe
        if seq.grids is None:
            raise ContractError("spatial probe requested but no grid stored")
        if not 0 <= i < seq.m:
            raise ContractError(f"probe item {i} out of range")
        g = seq.grids.shape[1]
        if not (0 <= a < g and 0 <= b < g):
            raise ContractError(f"probe cell ({a},{b}) out of range")
        return seq.grids[i, a, b][None, :]
    raise ContractError(f"unknown probe kind {kind!r}")


def probe_distribution(params: ModelParams, seq: DescriptorSequence, probe,
                       prefix, counter: StepCounter | None = None) -> Distribution:
    """q_i(y_t): encode only the probe descriptor, then decode the prefix."""
    vec = _probe_vector(seq, probe)
    ids, unk_used = s2s._resolve_prefix(params, prefix)
    if not ids or ids[0] != BOS:
        raise ContractError("prefix must begin with BOS")
    with nm.no_grad():
        h, c = s2s.encode_probe_batch(params, vec, counter)
        probs_per_step, _, _ = s2s.decoder_steps_batch(params, h, c, ids, counter)
    return Distribution(probs_per_step[-1].data[0].copy(), unk_used)


def _resolve_query(params: ModelParams, query) -> tuple[list[str], list[int], list[int]]:
    tokens = query.tokens if isinstance(query, Query) else list(query)
    if not tokens:
        raise ContractError("query sentence is empty")
    ids, unk_positions = params.vocab.encode(tokens)
    return tokens, ids, unk_positions


def _grid_dims(seq: DescriptorSequence) -> tuple[int, int]:
    g = seq.grids.shape[1]
    return g, g * g


def batch_probe(params: ModelParams, seq: DescriptorSequence, query,
                include_spatial: bool | None = None,
                chunk_size: int | None = None,
                mode: str = "query") -> SaliencyMap:
    """Full saliency map from one batched forward computation.

    Assembles the m temporal probes (plus r*m spatial cell probes when
    grids are available) into a single batch and teacher-forces the query
    through the decoder once: (r*m + m) * (n+1) decoder step evaluations.
    `chunk_size` caps the batch dimension; results are independent of the
    chunking (chunk size 1 is exactly the sequential path).
    """
    words, word_ids, unk_positions = _resolve_query(params, query)
    if include_spatial is None:
        include_spatial = seq.grids is not None
    if include_spatial and seq.grids is None:
        raise ContractError("spatial probes requested but no grid stored")

    m = seq.m
    probes = [seq.items]
    if include_spatial:
        g, r = _grid_dims(seq)
        # cell probes of frame i occupy rows m + i*r ... m + (i+1)*r - 1
        probes.append(seq.grids.reshape(m * r, seq.d_feat))
    matrix = np.concatenate(probes, axis=0)
    total = matrix.shape[0]

    ids = [BOS] + word_ids
    targets = word_ids + [EOS]
    n_steps = len(ids)
    counter = StepCounter()
    raw = np.empty((n_steps, total))
    if chunk_size is None:
        chunk_size = total
    if chunk_size < 1:
        raise ContractError("chunk_size must be >= 1")
    with nm.no_grad():
        for start in range(0, total, chunk_size):
            chunk = matrix[start : start + chunk_size]
            h, c = s2s.encode_probe_batch(params, chunk, counter)
            probs_per_step, _, _ = s2s.decoder_steps_batch(params, h, c, ids, counter)
            for j, probs in enumerate(probs_per_step):
                raw[j, start : start + chunk.shape[0]] = -np.log(
                    probs.data[:, targets[j]]
                )

    temporal_raw = raw[:-1, :m]
    eos_raw = raw[-1, :m]
    out = SaliencyMap(
        words=words,
        word_ids=word_ids,
        unk_positions=unk_positions,
        temporal_raw=temporal_raw.copy(),
        temporal_scaled=np.vstack([scale_losses(row) for row in temporal_raw]),
        temporal_alpha=np.vstack(
            [nm.softmax_values(scale_losses(row)) for row in temporal_raw]
        ),
        eos_raw=eos_raw.copy(),
        eos_scaled=scale_losses(eos_raw),
        eos_alpha=nm.softmax_values(scale_losses(eos_raw)),
        image_grid_g=seq.image_grid_g,
        mode=mode,
        probe_sequences=total,
        encoder_steps=counter.encoder_steps,
        decoder_steps=counter.decoder_steps,
    )
    if include_spatial:
        spatial = raw[:, m:].reshape(n_steps, m, r)
        out.spatial_raw = spatial[:-1].copy()
        out.spatial_eos_raw = spatial[-1].copy()
        out.spatial_scaled = np.stack(
            [[scale_losses(cells) for cells in word_row] for word_row in out.spatial_raw]
        )
        out.spatial_eos_scaled = np.vstack(
            [scale_losses(cells) for cells in out.spatial_eos_raw]
        )
        out.grid_g = g
    return out


def _sequential_probe_map(params: ModelParams, seq: DescriptorSequence,
                          query, include_spatial: bool | None = None) -> SaliencyMap:
    """Probe-at-a-time oracle: one probe_distribution call per (word, probe).

    Recomputes every prefix from scratch; used to validate batch_probe.
    """
    words, word_ids, unk_positions = _resolve_query(params, query)
    if include_spatial is None:
        include_spatial = seq.grids is not None
    m = seq.m
    ids = [BOS] + word_ids
    targets = word_ids + [EOS]
    n_steps = len(ids)
    counter = StepCounter()

    probe_specs = [("item", i) for i in range(m)]
    if include_spatial:
        g, r = _grid_dims(seq)
        for i in range(m):
            for a in range(g):
                for b in range(g):
                    probe_specs.append(("cell", i, a, b))

    raw = np.empty((n_steps, len(probe_specs)))
    for col, spec in enumerate(probe_specs):
        for j in range(n_steps):
            q = probe_distribution(params, seq, spec, ids[: j + 1], counter)
            raw[j, col] = word_loss(q, targets[j])

    temporal_raw = raw[:-1, :m]
    eos_raw = raw[-1, :m]
    out = SaliencyMap(
        words=words,
        word_ids=word_ids,
        unk_positions=unk_positions,
        temporal_raw=temporal_raw.copy(),
        temporal_scaled=np.vstack([scale_losses(row) for row in temporal_raw]),
        temporal_alpha=np.vstack(
            [nm.softmax_values(scale_losses(row)) for row in temporal_raw]
        ),
        eos_raw=eos_raw.copy(),
        eos_scaled=scale_losses(eos_raw),
        eos_alpha=nm.softmax_values(scale_losses(eos_raw)),
        image_grid_g=seq.image_grid_g,
        mode="query",
        probe_sequences=len(probe_specs),
        encoder_steps=counter.encoder_steps,
        decoder_steps=counter.decoder_steps,
    )
    if include_spatial:
        spatial = raw[:, m:].reshape(n_steps, m, r)
        out.spatial_raw = spatial[:-1].copy()
        out.spatial_eos_raw = spatial[-1].copy()
        out.spatial_scaled = np.stack(
            [[scale_losses(cells) for cells in word_row] for word_row in out.spatial_raw]
        )
        out.spatial_eos_scaled = np.vstack(
            [scale_losses(cells) for cells in out.spatial_eos_raw]
        )
        out.grid_g = g
    return out


def temporal_saliency(params: ModelParams, seq: DescriptorSequence, query,
                      chunk_size: int | None = None) -> SaliencyMap:
    """Per-word saliency over the m input items (no spatial probes)."""
    return batch_probe(params, seq, query, include_spatial=False,
                       chunk_size=chunk_size)


@dataclass
class FrameSaliency:
    """Per-cell saliency of one frame, one row per query word."""

    frame: int
    grid_g: int
    raw: np.ndarray
    scaled: np.ndarray
    eos_raw: np.ndarray
    eos_scaled: np.ndarray


def spatial_saliency(params: ModelParams, seq: DescriptorSequence, query,
                     frame: int,
                     chunk_size: int | None = None) -> FrameSaliency:
    """Scaled per-cell values for each word, probing frame `frame`'s cells."""
    if seq.grids is None:
        raise ContractError("spatial saliency requires stored grids")
    if not 0 <= frame < seq.m:
        raise ContractError(f"frame {frame} out of range")
    words, word_ids, _ = _resolve_query(params, query)
    g, r = _grid_dims(seq)
    cells = seq.grids[frame].reshape(r, seq.d_feat)
    ids = [BOS] + word_ids
    targets = word_ids + [EOS]
    counter = StepCounter()
    raw = np.empty((len(ids), r))
    if chunk_size is None:
        chunk_size = r
    with nm.no_grad():
        for start in range(0, r, chunk_size):
            chunk = cells[start : start + chunk_size]
            h, c = s2s.encode_probe_batch(params, chunk, counter)
            probs_per_step, _, _ = s2s.decoder_steps_batch(params, h, c, ids, counter)
            for j, probs in enumerate(probs_per_step):
                raw[j, start : start + chunk.shape[0]] = -np.log(
                    probs.data[:, targets[j]]
                )
    word_raw = raw[:-1]
    return FrameSaliency(
        frame=frame,
        grid_g=g,
        raw=word_raw.copy(),
        scaled=np.vstack([scale_losses(row) for row in word_raw]),
        eos_raw=raw[-1].copy(),
        eos_scaled=scale_losses(raw[-1]),
    )


def phrase_saliency(saliency: SaliencyMap, group) -> tuple[np.ndarray, np.ndarray]:
    """Summed raw losses for a word group, then rescaled to [0, 1].

    Returns (raw_row, scaled_row) over the m items.
    """
    indices = tuple(group)
    if not indices:
        raise ContractError("phrase group is empty")
    for idx in indices:
        if not 0 <= idx < saliency.n_words:
            raise ContractError(f"phrase index {idx} out of range")
    raw = saliency.temporal_raw[list(indices)].sum(axis=0)
    return raw, scale_losses(raw)


def spatial_phrase_saliency(saliency: SaliencyMap, group,
                            frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Phrase aggregation over one frame's cell losses."""
    if saliency.spatial_raw is None:
        raise ContractError("saliency map has no spatial component")
    indices = tuple(group)
    if not indices:
        raise ContractError("phrase group is empty")
    for idx in indices:
        if not 0 <= idx < saliency.n_words:
            raise ContractError(f"phrase index {idx} out of range")
    raw = saliency.spatial_raw[list(indices), frame].sum(axis=0)
    return raw, scale_losses(raw)


def representativeness(params: ModelParams, seq: DescriptorSequence,
                       query) -> np.ndarray:
    """Full-distribution information loss D_KL(p(y_t) || q_i(y_t)).

    Unlike the one-hot word losses, this measures how representative each
    single descriptor is of the full input at every step. Returns an
    (n+1, m) matrix whose last row is the end-of-sequence position.
    """
    words, word_ids, _ = _resolve_query(params, query)
    ids = [BOS] + word_ids
    counter = StepCounter()
    with nm.no_grad():
        z, _ = s2s.encode(params, seq, counter)
        full_steps, _, _ = s2s.decoder_steps_batch(params, z[0], z[1], ids, counter)
        h, c = s2s.encode_probe_batch(params, seq.items, counter)
        probe_steps, _, _ = s2s.decoder_steps_batch(params, h, c, ids, counter)
    out = np.empty((len(ids), seq.m))
    for j, (full, probe) in enumerate(zip(full_steps, probe_steps)):
        p = full.data[0]
        for i in range(seq.m):
            out[j, i] = nm.kl_divergence(p, probe.data[i])
    return out


def saliency_for_predicted(params: ModelParams, seq: DescriptorSequence,
                           max_len: int = 16,
                           include_spatial: bool | None = None,
                           chunk_size: int | None = None) -> SaliencyMap:
    """Greedy-decode a caption, then probe it (mode flag "predicted")."""
    words = s2s.greedy_caption(params, seq, max_len)
    if not words:
        raise ContractError("model produced an empty caption; nothing to probe")
    return batch_probe(params, seq, words, include_spatial=include_spatial,
                       chunk_size=chunk_size, mode="predicted")


def attention_alpha_map(params: ModelParams, seq: DescriptorSequence, query):
    """Teacher-forced soft-attention weights as a direct temporal map.

    For the attention model variant saliency is not probed; its explicit
    alpha rows are exported instead. Returns ((n, m) alphas, eos row).
    """
    if params.attention is None:
        raise ContractError("model has no attention parameters")
    words, word_ids, _ = _resolve_query(params, query)
    ids = [BOS] + word_ids
    with nm.no_grad():
        _, alphas = s2s.soft_attention_steps(params, seq, ids)
    stacked = np.vstack(alphas)
    # the step consuming token j-1 attends for position j, so the last
    # row belongs to the end-of-sequence position
    return stacked[:-1], stacked[-1]


def image_mode_sequence(grid) -> DescriptorSequence:
    """Row-major scan of a square g x g cell grid into a g**2-item sequence.

    Cell (a, b) lands at sequence index a*g + b (upper-left first,
    bottom-right last); temporal saliency over the result is the spatial
    image saliency.
    """
    try:
        arr = np.asarray(grid, dtype=np.float64)
    except (ValueError, TypeError):
        raise ContractError("ragged grid") from None
    if arr.ndim != 3:
        raise ContractError(f"grid must be (g, g, d_feat), got shape {arr.shape}")
    if arr.shape[0] != arr.shape[1]:
        raise ContractError(f"grid must be square, got {arr.shape[:2]}")
    g = arr.shape[0]
    items = arr.reshape(g * g, arr.shape[2])
    return DescriptorSequence(items=items, image_grid_g=g)


# ---------------------------------------------------------------------
# export
# ---------------------------------------------------------------------

def saliency_to_dict(saliency: SaliencyMap, meta: dict | None = None) -> dict:
    doc = {
        "mode": saliency.mode,
        "words": saliency.words,
        "word_ids": saliency.word_ids,
        "unk_positions": saliency.unk_positions,
        "temporal": {
            "raw": saliency.temporal_raw.tolist(),
            "scaled": saliency.temporal_scaled.tolist(),
            "alpha": saliency.temporal_alpha.tolist(),
        },
        "eos": {
            "raw": saliency.eos_raw.tolist(),
            "scaled": saliency.eos_scaled.tolist(),
            "alpha": saliency.eos_alpha.tolist(),
        },
        "stats": {
            "probe_sequences": saliency.probe_sequences,
            "encoder_steps": saliency.encoder_steps,
            "decoder_steps": saliency.decoder_steps,
        },
    }
    if saliency.spatial_raw is not None:
        doc["grid_g"] = saliency.grid_g
        doc["spatial"] = {
            "raw": saliency.spatial_raw.tolist(),
            "scaled": saliency.spatial_scaled.tolist(),
        }
    if saliency.image_grid_g is not None:
        doc["image_grid_g"] = saliency.image_grid_g
    if meta:
        doc.update(meta)
    return doc


def write_pgm(path, values: np.ndarray) -> None:
    """Binary portable graymap of values in [0, 1]; 0 -> black, 1 -> white."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ContractError(f"graymap needs a 2-d array, got shape {values.shape}")
    pixels = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _token_slug(token: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in token)


def export_graymaps(saliency: SaliencyMap, outdir) -> list[str]:
    """Write per-word PGM heatmaps; returns the written file names.

    Spatial maps produce one g x g image per (word, frame). For image-mode
    sequences the temporal row itself is the spatial map.
    """
    import os

    written = []
    if saliency.spatial_scaled is not None:
        g = saliency.grid_g
        for t, word in enumerate(saliency.words):
            for i in range(saliency.n_items):
                name = f"word{t:02d}_{_token_slug(word)}_frame{i:02d}.pgm"
                write_pgm(os.path.join(outdir, name),
                          saliency.spatial_scaled[t, i].reshape(g, g))
                written.append(name)
    if saliency.image_grid_g is not None:
        g = saliency.image_grid_g
        for t, word in enumerate(saliency.words):
            name = f"word{t:02d}_{_token_slug(word)}.pgm"
            write_pgm(os.path.join(outdir, name),
                      saliency.temporal_scaled[t].reshape(g, g))
            written.append(name)
    return written
