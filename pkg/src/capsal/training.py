"""Teacher-forced cross-entropy training with Adam.

The loss for one example is the mean negative log-likelihood of the
target tokens under teacher forcing. Gradients are clipped by global
norm before each Adam update. Everything is deterministic given
(seed, dataset, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import seq2seq as s2s
from .numerics import ContractError, Tensor
from .seq2seq import BOS, EOS, DescriptorSequence, ModelParams


class NanGradientError(RuntimeError):
    """Raised by adam_step when a gradient tensor contains NaN."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 25
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning rate must be > 0")
        if self.clip_norm <= 0:
            raise ContractError("clip norm must be > 0")


def caption_loss(params: ModelParams, seq: DescriptorSequence, target) -> Tensor:
    """Mean over timesteps of -ln P(y_t | y_{1:t-1}, z), teacher forced.

    `target` is the full framed token sequence BOS ... EOS (ids or strings).
    """
    ids, _ = s2s._resolve_prefix(params, target)
    if len(ids) < 2 or ids[0] != BOS or ids[-1] != EOS:
        raise ContractError("target must be framed as BOS ... EOS")
    if params.hp.use_attention:
        probs_per_step, _ = s2s.soft_attention_steps(params, seq, ids[:-1])
    else:
        z, _ = s2s.encode(params, seq)
        probs_per_step, _, _ = s2s.decoder_steps_batch(params, z[0], z[1], ids[:-1])
    total = None
    for step, probs in enumerate(probs_per_step):
        nll = -nm.log(probs[0, ids[step + 1]])
        total = nll if total is None else total + nll
    return (1.0 / len(probs_per_step)) * total


def batch_caption_loss(params: ModelParams, seqs, id_rows) -> Tensor:
    """caption_loss averaged over a batch of equally-shaped examples.

    All sequences must share m and all framed targets the same length, so
    the batch runs as one taped forward; the value equals the mean of the
    per-example caption_loss (up to float summation order).
    """
    batch = len(seqs)
    m = seqs[0].m
    steps = len(id_rows[0]) - 1
    if any(s.m != m for s in seqs) or any(len(r) != steps + 1 for r in id_rows):
        raise ContractError("batch members must share sequence and target lengths")
    ids = np.asarray(id_rows, dtype=np.int64)
    if np.any(ids[:, 0] != BOS) or np.any(ids[:, -1] != EOS):
        raise ContractError("targets must be framed as BOS ... EOS")
    feats = np.concatenate([s.items for s in seqs], axis=0)
    reduced = nm.reshape(s2s.reduce_descriptors(params, feats),
                         (batch, m, params.hp.d_red))
    h = Tensor(np.zeros((batch, params.hp.hidden)))
    c = Tensor(np.zeros((batch, params.hp.hidden)))
    if params.hp.use_attention:
        v_red = reduced
    else:
        for i in range(m):
            h, c = params.encoder.step(reduced[:, i], h, c)
    rows = np.arange(batch)
    att = params.attention
    total = None
    for j in range(steps):
        x = nm.take_rows(params.embedding, ids[:, j])
        if params.hp.use_attention:
            scores = nm.tanh(
                nm.reshape(h @ att.w_a, (batch, 1, params.hp.d_attn))
                + v_red @ att.u_a + att.b_a
            ) @ att.w
            alpha = nm.softmax(scores)
            z_hat = nm.tensor_sum(
                nm.reshape(alpha, (batch, m, 1)) * v_red, axis=1
            )
            x = nm.concat([x, z_hat], axis=1)
        h, c = params.decoder.step(x, h, c)
        probs = nm.softmax(h @ params.proj_w + params.proj_b)
        nll = -nm.log(probs[rows, ids[:, j + 1]])
        total = nll if total is None else total + nll
    return (1.0 / (batch * steps)) * nm.tensor_sum(total)


def batch_gradients(params: ModelParams, seqs, id_rows):
    """Mean loss and gradients over one same-shape batch."""
    params.zero_grad()
    loss = batch_caption_loss(params, seqs, id_rows)
    loss.backward()
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.named_tensors().items()
    }
    return loss.item(), grads


@dataclass
class AdamState:
    """First/second moment estimates per tensor plus the step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        named = params.named_tensors()
        return cls(
            m={k: np.zeros_like(p.data) for k, p in named.items()},
            v={k: np.zeros_like(p.data) for k, p in named.items()},
        )


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale gradients in place so their global norm is at most clip_norm."""
    total = nm.global_norm(grads.values())
    if total > clip_norm:
        scale = clip_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update after global-norm clipping, in place."""
    for name, g in grads.items():
        if np.isnan(g).any():
            raise NanGradientError(f"NaN gradient in tensor {name!r}")
    clip_gradients(grads, config.clip_norm)
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    named = params.named_tensors()
    for name, p in named.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        p.data -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


def example_gradients(params: ModelParams, seq: DescriptorSequence,
                      target) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and parameter gradients for a single example."""
    params.zero_grad()
    loss = caption_loss(params, seq, target)
    loss.backward()
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.named_tensors().items()
    }
    return loss.item(), grads


def mean_loss(params: ModelParams, dataset) -> float:
    """Average caption_loss over (seq, target) pairs, without gradients."""
    with nm.no_grad():
        return sum(
            caption_loss(params, seq, target).item() for seq, target in dataset
        ) / len(dataset)


@dataclass
class TrainResult:
    params: ModelParams
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    diverged: bool = False

    def log_lines(self) -> list[str]:
        return [
            f"{epoch}\t{tr:.6f}\t{va:.6f}"
            for epoch, (tr, va) in enumerate(zip(self.train_curve, self.val_curve), 1)
        ]


def _bucketed_batches(shape_keys, order, batch_size):
    """Pack a shuffled index order into same-shape batches.

    Batches are emitted as soon as they fill; leftovers flush afterwards
    in sorted key order, so the schedule is a pure function of the inputs.
    """
    pending: dict = {}
    batches = []
    for idx in order:
        bucket = pending.setdefault(shape_keys[idx], [])
        bucket.append(int(idx))
        if len(bucket) == batch_size:
            batches.append(list(bucket))
            bucket.clear()
    for key in sorted(pending):
        if pending[key]:
            batches.append(pending[key])
    return batches


def train(train_set, val_set, params: ModelParams,
          config: TrainConfig, log=None) -> TrainResult:
    """Minibatch Adam over shuffled epochs; keeps the best val-loss checkpoint.

    `train_set` / `val_set` are sequences of (DescriptorSequence, framed
    target tokens). Examples are packed into same-shape batches so each
    batch runs as one forward/backward pass. On divergence (NaN loss or
    gradients) training aborts, the last good checkpoint is retained and
    `diverged` is set.
    """
    if not train_set:
        raise ContractError("training dataset is empty")
    if not val_set:
        raise ContractError("validation dataset is empty")
    rng = np.random.default_rng(config.seed)
    state = AdamState.for_params(params)
    result = TrainResult(params=params.copy())
    resolved = []
    for seq, target in train_set:
        ids, _ = s2s._resolve_prefix(params, target)
        resolved.append((seq, ids))
    shape_keys = [(seq.m, len(ids)) for seq, ids in resolved]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(resolved))
        epoch_loss = 0.0
        n_examples = 0
        diverged = False
        for batch in _bucketed_batches(shape_keys, order, config.batch_size):
            seqs = [resolved[i][0] for i in batch]
            id_rows = [resolved[i][1] for i in batch]
            value, grads = batch_gradients(params, seqs, id_rows)
            epoch_loss += value * len(batch)
            n_examples += len(batch)
            if math.isnan(value):
                diverged = True
                break
            try:
                adam_step(params, grads, state, config)
            except NanGradientError:
                diverged = True
                break
        if diverged:
            result.diverged = True
            if log is not None:
                log(f"{epoch}\tdiverged\tdiverged")
            break
        train_loss = epoch_loss / n_examples
        val_loss = mean_loss(params, val_set)
        result.train_curve.append(train_loss)
        result.val_curve.append(val_loss)
        if log is not None:
            log(f"{epoch}\t{train_loss:.6f}\t{val_loss:.6f}")
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.params = params.copy()
    return result
