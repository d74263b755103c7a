"""LSTM encoder-decoder captioning model.

An encoder LSTM folds a sequence of reduced feature descriptors into a
fixed-length (hidden, cell) state; a decoder LSTM starts from that state
and emits a word distribution per step. A soft-attention decoder variant
(dynamic weighted sum of descriptors fed at every step) is included for
comparison. All forward math runs through `numerics.Tensor`, so the same
code path serves training (taped) and inference (under `no_grad`).

Batched helpers operate on (B, ...) arrays; single-sequence operations
are the B=1 case of the same kernels, which keeps sequential and chunked
probe execution bitwise identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as nm
from .numerics import ContractError, Tensor

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)
PAD, BOS, EOS, UNK = 0, 1, 2, 3

CHECKPOINT_VERSION = 1


class Vocabulary:
    """Bijective token/index mapping with the four reserved tokens at 0-3."""

    def __init__(self, content_tokens):
        tokens = list(RESERVED_TOKENS) + list(content_tokens)
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary tokens must be distinct")
        self.tokens: list[str] = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        """Index of token, substituting UNK for unknown tokens."""
        return self._index.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens) -> tuple[list[int], list[int]]:
        """Map tokens to ids; returns (ids, positions that fell back to UNK)."""
        ids, unk_positions = [], []
        for pos, tok in enumerate(tokens):
            idx = self._index.get(tok)
            if idx is None:
                idx = UNK
                unk_positions.append(pos)
            ids.append(idx)
        return ids, unk_positions

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class Hyperparams:
    """Model dimensions. Defaults are desk-scale (trainable on CPU in minutes)."""

    d_feat: int = 24
    d_red: int = 16
    d_emb: int = 16
    hidden: int = 64
    use_attention: bool = False
    d_attn: int = 32


@dataclass
class StepCounter:
    """Counts LSTM step evaluations; a batched step over B rows counts B."""

    encoder_steps: int = 0
    decoder_steps: int = 0


@dataclass
class Distribution:
    """Next-word probabilities; strictly positive rows produced by softmax."""

    probs: np.ndarray
    unk_used: bool = False


class DescriptorSequence:
    """Ordered feature descriptors v_1..v_m, optionally with pre-pool grids.

    When per-item spatial grids are present each item vector must equal the
    declared pooling (mean or sum) of its g*g cells.
    """

    def __init__(self, items=None, grids=None, pooling: str = "mean",
                 image_grid_g: int | None = None):
        if pooling not in ("mean", "sum"):
            raise ContractError(f"unknown pooling mode {pooling!r}")
        self.pooling = pooling
        self.image_grid_g = image_grid_g
        if grids is not None:
            grids = np.asarray(grids, dtype=np.float64)
            if grids.ndim != 4 or grids.shape[1] != grids.shape[2]:
                raise ContractError(
                    f"grids must have shape (m, g, g, d_feat), got {grids.shape}"
                )
        self.grids = grids
        if items is None:
            if grids is None:
                raise ContractError("need items or grids")
            items = pool_cells(grids, pooling)
        items = np.asarray(items, dtype=np.float64)
        if items.ndim != 2 or items.shape[0] < 1:
            raise ContractError(f"items must be a nonempty (m, d) array, got {items.shape}")
        if grids is not None:
            if grids.shape[0] != items.shape[0] or grids.shape[3] != items.shape[1]:
                raise ContractError("grids incompatible with items")
            pooled = pool_cells(grids, pooling)
            if not np.allclose(pooled, items, rtol=0.0, atol=1e-9):
                raise ContractError("items do not equal the declared pooling of grids")
        self.items = items

    @property
    def m(self) -> int:
        return self.items.shape[0]

    @property
    def d_feat(self) -> int:
        return self.items.shape[1]

    @property
    def grid_cells(self) -> int:
        """Cells per item grid (r), or 0 when no grids are stored."""
        if self.grids is None:
            return 0
        return self.grids.shape[1] * self.grids.shape[2]


def pool_cells(grids: np.ndarray, pooling: str) -> np.ndarray:
    """Pool (m, g, g, d) cell features into (m, d) item descriptors."""
    if pooling == "mean":
        return grids.mean(axis=(1, 2))
    return grids.sum(axis=(1, 2))


class LSTMCell:
    """Gate weights for one LSTM; each gate maps [input ++ hidden] -> hidden."""

    GATES = ("input", "forget", "output", "cand")

    def __init__(self, d_in: int, hidden: int):
        self.d_in = d_in
        self.hidden = hidden
        for gate in self.GATES:
            setattr(self, f"w_{gate}", Tensor(np.zeros((d_in + hidden, hidden)),
                                              requires_grad=True))
            setattr(self, f"b_{gate}", Tensor(np.zeros(hidden), requires_grad=True))

    def init_weights(self, rng: np.random.Generator, scale: float = 0.08):
        for gate in self.GATES:
            w = getattr(self, f"w_{gate}")
            b = getattr(self, f"b_{gate}")
            w.data[...] = rng.uniform(-scale, scale, w.data.shape)
            b.data[...] = rng.uniform(-scale, scale, b.data.shape)
        # forget-gate bias at 1.0 stabilizes early training
        self.b_forget.data[...] = 1.0

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """One LSTM update; x (B, d_in), h and c (B, hidden)."""
        u = nm.concat([x, h], axis=1)
        gate_i = nm.sigmoid(u @ self.w_input + self.b_input)
        gate_f = nm.sigmoid(u @ self.w_forget + self.b_forget)
        gate_o = nm.sigmoid(u @ self.w_output + self.b_output)
        cand = nm.tanh(u @ self.w_cand + self.b_cand)
        c_next = gate_f * c + gate_i * cand
        h_next = gate_o * nm.tanh(c_next)
        return h_next, c_next

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for gate in self.GATES:
            out[f"{prefix}.w_{gate}"] = getattr(self, f"w_{gate}")
            out[f"{prefix}.b_{gate}"] = getattr(self, f"b_{gate}")
        return out


class AttentionParams:
    """Soft-attention scoring parameters (w, W_a, U_a, b_a)."""

    def __init__(self, hidden: int, d_red: int, d_attn: int):
        self.w = Tensor(np.zeros(d_attn), requires_grad=True)
        self.w_a = Tensor(np.zeros((hidden, d_attn)), requires_grad=True)
        self.u_a = Tensor(np.zeros((d_red, d_attn)), requires_grad=True)
        self.b_a = Tensor(np.zeros(d_attn), requires_grad=True)

    def init_weights(self, rng: np.random.Generator, scale: float = 0.08):
        for t in (self.w, self.w_a, self.u_a, self.b_a):
            t.data[...] = rng.uniform(-scale, scale, t.data.shape)

    def tensors(self) -> dict[str, Tensor]:
        return {"attn.w": self.w, "attn.w_a": self.w_a,
                "attn.u_a": self.u_a, "attn.b_a": self.b_a}


class ModelParams:
    """All trainable tensors of the captioning model."""

    def __init__(self, vocab: Vocabulary, hp: Hyperparams):
        self.vocab = vocab
        self.hp = hp
        n_words = len(vocab)
        self.embedding = Tensor(np.zeros((n_words, hp.d_emb)), requires_grad=True)
        self.reduce_w = Tensor(np.zeros((hp.d_feat, hp.d_red)), requires_grad=True)
        self.reduce_b = Tensor(np.zeros(hp.d_red), requires_grad=True)
        self.encoder = LSTMCell(hp.d_red, hp.hidden)
        dec_in = hp.d_emb + (hp.d_red if hp.use_attention else 0)
        self.decoder = LSTMCell(dec_in, hp.hidden)
        self.proj_w = Tensor(np.zeros((hp.hidden, n_words)), requires_grad=True)
        self.proj_b = Tensor(np.zeros(n_words), requires_grad=True)
        self.attention = (AttentionParams(hp.hidden, hp.d_red, hp.d_attn)
                          if hp.use_attention else None)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {
            "embedding": self.embedding,
            "reduce_w": self.reduce_w,
            "reduce_b": self.reduce_b,
        }
        out.update(self.encoder.tensors("encoder"))
        out.update(self.decoder.tensors("decoder"))
        out["proj_w"] = self.proj_w
        out["proj_b"] = self.proj_b
        if self.attention is not None:
            out.update(self.attention.tensors())
        return out

    def zero_grad(self):
        for t in self.named_tensors().values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        dup = ModelParams(self.vocab, self.hp)
        for name, t in dup.named_tensors().items():
            t.data[...] = self.named_tensors()[name].data
        return dup


def init_params(vocab: Vocabulary, hp: Hyperparams, seed: int) -> ModelParams:
    """Uniform [-0.08, 0.08] init from a seeded generator; forget bias 1.0."""
    params = ModelParams(vocab, hp)
    rng = np.random.default_rng(seed)
    params.embedding.data[...] = rng.uniform(-0.08, 0.08, params.embedding.data.shape)
    params.reduce_w.data[...] = rng.uniform(-0.08, 0.08, params.reduce_w.data.shape)
    params.reduce_b.data[...] = rng.uniform(-0.08, 0.08, params.reduce_b.data.shape)
    params.encoder.init_weights(rng)
    params.decoder.init_weights(rng)
    params.proj_w.data[...] = rng.uniform(-0.08, 0.08, params.proj_w.data.shape)
    params.proj_b.data[...] = rng.uniform(-0.08, 0.08, params.proj_b.data.shape)
    if params.attention is not None:
        params.attention.init_weights(rng)
    return params


# ---------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------

def reduce_descriptors(params: ModelParams, items: np.ndarray) -> Tensor:
    """Linear dimensionality reduction applied before the encoder LSTM."""
    if items.ndim != 2 or items.shape[1] != params.hp.d_feat:
        raise ContractError(
            f"descriptors must be (m, {params.hp.d_feat}), got {items.shape}"
        )
    return Tensor(items) @ params.reduce_w + params.reduce_b


def _zero_state(batch: int, hidden: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden)))


def encode(params: ModelParams, seq: DescriptorSequence,
           counter: StepCounter | None = None):
    """Run the encoder LSTM over the sequence.

    Returns ((h_m, c_m), [h_1..h_m]) with states shaped (1, hidden);
    the initial state is all zeros.
    """
    reduced = reduce_descriptors(params, seq.items)
    h, c = _zero_state(1, params.hp.hidden)
    hiddens = []
    for i in range(seq.m):
        h, c = params.encoder.step(reduced[i : i + 1], h, c)
        if counter is not None:
            counter.encoder_steps += 1
        hiddens.append(h)
    return (h, c), hiddens


def encode_probe_batch(params: ModelParams, probes: np.ndarray,
                       counter: StepCounter | None = None):
    """Encode B independent single-descriptor sequences in one batched step."""
    reduced = reduce_descriptors(params, probes)
    h, c = _zero_state(probes.shape[0], params.hp.hidden)
    h, c = params.encoder.step(reduced, h, c)
    if counter is not None:
        counter.encoder_steps += probes.shape[0]
    return h, c


def encode_mean(params: ModelParams, seq: DescriptorSequence):
    """Mean-pooling encoder variant: z's hidden part is the average reduced
    descriptor (zero-padded up to the hidden size); the cell state is zero."""
    if seq.m < 1:
        raise ContractError("empty descriptor sequence")
    if params.hp.d_red > params.hp.hidden:
        raise ContractError("mean encoder needs d_red <= hidden")
    reduced = reduce_descriptors(params, seq.items)
    mean = reduced.data.mean(axis=0)
    h0 = np.zeros((1, params.hp.hidden))
    h0[0, : params.hp.d_red] = mean
    return Tensor(h0), Tensor(np.zeros((1, params.hp.hidden)))


def _resolve_prefix(params: ModelParams, prefix):
    """Accept token strings or ids; returns (ids, unk_used)."""
    ids, unk_used = [], False
    for tok in prefix:
        if isinstance(tok, str):
            idx = params.vocab.index(tok)
            unk_used = unk_used or (idx == UNK and tok != UNK_TOKEN)
            ids.append(idx)
        else:
            ids.append(int(tok))
    return ids, unk_used


def decoder_steps_batch(params: ModelParams, h: Tensor, c: Tensor,
                        token_ids, counter: StepCounter | None = None):
    """Teacher-force token_ids through the decoder for a batch of B states.

    Returns (probs_per_step, h, c): one (B, |W|) softmax row block per token
    consumed. The base (non-attention) decoder only.
    """
    if params.hp.use_attention:
        raise ContractError("decoder_steps_batch is for the base model")
    batch = h.data.shape[0]
    probs_per_step = []
    for tok in token_ids:
        x = nm.take_rows(params.embedding, np.full(batch, tok, dtype=np.int64))
        h, c = params.decoder.step(x, h, c)
        if counter is not None:
            counter.decoder_steps += batch
        logits = h @ params.proj_w + params.proj_b
        probs_per_step.append(nm.softmax(logits))
    return probs_per_step, h, c


def decode_distribution(params: ModelParams, z, prefix,
                        counter: StepCounter | None = None) -> Distribution:
    """P(y_t | prefix, z): run the decoder from state z over the embedded
    prefix (which must begin with BOS) and softmax the last projection."""
    ids, unk_used = _resolve_prefix(params, prefix)
    if not ids or ids[0] != BOS:
        raise ContractError("prefix must begin with BOS")
    h, c = z
    probs_per_step, _, _ = decoder_steps_batch(params, h, c, ids, counter)
    return Distribution(probs_per_step[-1].data[0].copy(), unk_used)


def attention_weights(params: ModelParams, h: Tensor, v_red: Tensor) -> Tensor:
    """alpha over the m descriptors given the previous decoder state h (1, H)."""
    if params.attention is None:
        raise ContractError("model has no attention parameters")
    att = params.attention
    scores = nm.tanh(h @ att.w_a + v_red @ att.u_a + att.b_a) @ att.w
    return nm.softmax(scores)


def soft_attention_steps(params: ModelParams, seq: DescriptorSequence,
                         token_ids, counter: StepCounter | None = None):
    """Teacher-force the attention decoder; returns (probs_per_step, alphas)."""
    if params.attention is None:
        raise ContractError("model has no attention parameters")
    v_red = reduce_descriptors(params, seq.items)
    h, c = _zero_state(1, params.hp.hidden)
    probs_per_step, alphas = [], []
    for tok in token_ids:
        alpha = attention_weights(params, h, v_red)
        z_hat = nm.reshape(alpha @ v_red, (1, params.hp.d_red))
        x = nm.concat([nm.take_rows(params.embedding, [tok]), z_hat], axis=1)
        h, c = params.decoder.step(x, h, c)
        if counter is not None:
            counter.decoder_steps += 1
        logits = h @ params.proj_w + params.proj_b
        probs_per_step.append(nm.softmax(logits))
        alphas.append(alpha.data.copy())
    return probs_per_step, alphas


def soft_attention_decode(params: ModelParams, seq: DescriptorSequence, prefix,
                          counter: StepCounter | None = None):
    """Attention-decoder analogue of decode_distribution.

    Returns (Distribution, [alpha_t per step]); each alpha row sums to 1.
    """
    ids, unk_used = _resolve_prefix(params, prefix)
    if not ids or ids[0] != BOS:
        raise ContractError("prefix must begin with BOS")
    probs_per_step, alphas = soft_attention_steps(params, seq, ids, counter)
    return Distribution(probs_per_step[-1].data[0].copy(), unk_used), alphas


def greedy_caption(params: ModelParams, seq: DescriptorSequence,
                   max_len: int = 16,
                   counter: StepCounter | None = None) -> list[str]:
    """Greedy argmax decoding until EOS or max_len words.

    Ties break toward the lowest vocabulary index; BOS/EOS are stripped
    from the returned surface tokens.
    """
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    with nm.no_grad():
        if params.hp.use_attention:
            v_red = reduce_descriptors(params, seq.items)
            h, c = _zero_state(1, params.hp.hidden)
        else:
            (h, c), _ = encode(params, seq, counter)
        words: list[str] = []
        tok = BOS
        for _ in range(max_len):
            if params.hp.use_attention:
                alpha = attention_weights(params, h, v_red)
                z_hat = nm.reshape(alpha @ v_red, (1, params.hp.d_red))
                x = nm.concat([nm.take_rows(params.embedding, [tok]), z_hat], axis=1)
            else:
                x = nm.take_rows(params.embedding, [tok])
            h, c = params.decoder.step(x, h, c)
            if counter is not None:
                counter.decoder_steps += 1
            logits = (h @ params.proj_w + params.proj_b).data[0]
            tok = int(np.argmax(logits))
            if tok == EOS:
                break
            words.append(params.vocab.token(tok))
    return words


# ---------------------------------------------------------------------
# checkpoint serialization (bit-exact round trip)
# ---------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path):
    """Write a versioned JSON checkpoint; float64 values round-trip exactly."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "hyperparams": asdict(params.hp),
        "vocab": params.vocab.tokens,
        "tensors": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.named_tensors().items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version!r}")
    tokens = doc["vocab"]
    if tuple(tokens[:4]) != RESERVED_TOKENS:
        raise ContractError("checkpoint vocabulary lacks the reserved tokens")
    vocab = Vocabulary(tokens[4:])
    hp = Hyperparams(**doc["hyperparams"])
    params = ModelParams(vocab, hp)
    tensors = params.named_tensors()
    stored = doc["tensors"]
    if set(stored) != set(tensors):
        raise ContractError("checkpoint tensor names do not match the model")
    for name, t in tensors.items():
        entry = stored[name]
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != t.data.shape:
            raise ContractError(f"checkpoint tensor {name} has shape {arr.shape}, "
                                f"expected {t.data.shape}")
        t.data[...] = arr
    return params
