"""Small frozen transformer encoder with a CLS readout and per-task linear heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CapacityError, InvalidConfigError
from .numkernel import AdamState, GradTape, Tensor, adam_step
from .numkernel import tape as T


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 512
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ffn_hidden: int = 64
    max_seq_len: int = 512
    seed: int = 0
    pretext_steps: int = 0
    pretext_lr: float = 3e-3

    def validate(self, required_len: int | None = None) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "ffn_hidden", "max_seq_len"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"backbone.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise InvalidConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.pretext_steps < 0:
            raise InvalidConfigError("backbone.pretext_steps must be >= 0")
        if required_len is not None and self.max_seq_len < required_len:
            raise InvalidConfigError(
                f"max_seq_len={self.max_seq_len} is shorter than prefix + queue + input = {required_len}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


class FrozenBackbone:
    """Read-only weights; every array is flagged non-writeable after construction."""

    def __init__(self, config: BackboneConfig, weights: dict[str, np.ndarray]):
        self.config = config
        self.weights = {}
        for k, w in weights.items():
            w = np.array(w, dtype=np.float64)
            w.setflags(write=False)
            self.weights[k] = w
        self.frozen = True

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def embed_tokens(self, ids) -> np.ndarray:
        return self.weights["tok_emb"][np.asarray(ids)]

    def fingerprint(self) -> bytes:
        return b"".join(self.weights[k].tobytes() for k in sorted(self.weights))


@dataclass
class TaskHead:
    task_id: int
    alpha: np.ndarray  # d_model x K

    @property
    def n_classes(self) -> int:
        return self.alpha.shape[1]


def init_head(task_id: int, d: int, k: int, rng: np.random.Generator, scale: float = 0.01) -> TaskHead:
    return TaskHead(task_id=task_id, alpha=scale * rng.standard_normal((d, k)))


def _init_weights(cfg: BackboneConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d_model, cfg.ffn_hidden
    w = {
        "tok_emb": rng.standard_normal((cfg.vocab_size, d)),
        "pos_emb": 0.1 * rng.standard_normal((cfg.max_seq_len, d)),
        "cls": rng.standard_normal((1, d)),
        "lnf_g": np.ones(d),
        "lnf_b": np.zeros(d),
    }
    for i in range(cfg.n_layers):
        for name in ("wq", "wk", "wv", "wo"):
            w[f"l{i}.{name}"] = rng.standard_normal((d, d)) / math.sqrt(d)
        w[f"l{i}.w1"] = rng.standard_normal((d, f)) * math.sqrt(2.0 / d)
        w[f"l{i}.c1"] = np.zeros(f)
        w[f"l{i}.w2"] = rng.standard_normal((f, d)) / math.sqrt(f)
        w[f"l{i}.c2"] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            w[f"l{i}.{ln}_g"] = np.ones(d)
            w[f"l{i}.{ln}_b"] = np.zeros(d)
    return w


def _attention(x: Tensor, q_in: Tensor, w: dict, i: int, n_heads: int, causal: bool = False) -> Tensor:
    """Multi-head attention; queries come from ``q_in``, keys/values from ``x``."""
    b, lk, d = x.value.shape
    lq = q_in.value.shape[1]
    dh = d // n_heads

    def heads(t, n):
        return T.transpose(T.reshape(t, (b, n, n_heads, dh)), (0, 2, 1, 3))

    q = heads(q_in @ w[f"l{i}.wq"], lq)
    k = heads(x @ w[f"l{i}.wk"], lk)
    v = heads(x @ w[f"l{i}.wv"], lk)
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if causal:
        mask = np.triu(np.full((lq, lk), -1e9), 1)
        scores = scores + mask
    o = T.softmax(scores, axis=-1) @ v
    o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, lq, d))
    return o @ w[f"l{i}.wo"]


def _block(x: Tensor, w: dict, i: int, n_heads: int, query_slice=None, causal=False) -> Tensor:
    a = T.layer_norm(x, w[f"l{i}.ln1_g"], w[f"l{i}.ln1_b"])
    if query_slice is None:
        qa, resid = a, x
    else:
        lo, hi = query_slice
        qa, resid = _rows(a, lo, hi), _rows(x, lo, hi)
    h = resid + _attention(a, qa, w, i, n_heads, causal)
    f = T.layer_norm(h, w[f"l{i}.ln2_g"], w[f"l{i}.ln2_b"])
    f = T.relu(f @ w[f"l{i}.w1"] + w[f"l{i}.c1"]) @ w[f"l{i}.w2"] + w[f"l{i}.c2"]
    return h + f


def _rows(x: Tensor, lo: int, hi: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.value)
        full[:, lo:hi] = g
        T._acc(x, full)

    return x.tape.record(x.value[:, lo:hi], (x,), bw)


def _lift_weights(bb: FrozenBackbone, tape: GradTape) -> dict:
    return {k: tape.constant(v) for k, v in bb.weights.items()}


def encode_cls(bb: FrozenBackbone, tape: GradTape, prompt_rows: Tensor | None, tokens: np.ndarray) -> Tensor:
    """Encoder output at the CLS position for ``[prompt_rows; CLS; tokens]``.

    ``tokens`` is (B, L). Prompt rows carry no positional offset; positions
    are added to input tokens only.
    """
    w = bb.weights
    tokens = np.atleast_2d(np.asarray(tokens))
    bsz, n_in = tokens.shape
    d = bb.d_model
    x_in = tape.constant(w["tok_emb"][tokens] + w["pos_emb"][:n_in])
    cls = tape.constant(np.broadcast_to(w["cls"], (bsz, 1, d)))
    parts = []
    p = 0
    if prompt_rows is not None and prompt_rows.value.shape[0] > 0:
        p = prompt_rows.value.shape[0]
        parts.append(T.broadcast_to(prompt_rows, (bsz, p, d)))
    x = T.concat(parts + [cls, x_in], axis=1)
    wt = {k: tape.constant(v) for k, v in w.items() if not k.endswith("_emb")}
    nl = bb.config.n_layers
    for i in range(nl):
        last = i == nl - 1
        x = _block(x, wt, i, bb.config.n_heads, query_slice=(p, p + 1) if last else None)
    h = T.layer_norm(x, wt["lnf_g"], wt["lnf_b"])
    return T.select(h, 0, axis=1)


def check_capacity(bb: FrozenBackbone, n_prefix: int, n_queue: int, n_input: int) -> None:
    total = n_prefix + n_queue + 1 + n_input
    if total > bb.config.max_seq_len:
        raise CapacityError(
            f"sequence of {total} rows exceeds max_seq_len={bb.config.max_seq_len} "
            f"(prefix={n_prefix}, queue={n_queue}, input={n_input}, plus 1 CLS row)"
        )


def forward(bb: FrozenBackbone, prefix, scaled_queue, input_tokens, head, tape: GradTape | None = None):
    """Class logits for ``[prefix; scaled_queue; CLS; input]``.

    Arrays and tensors are both accepted. Without a ``tape`` the logits come
    back as a plain array; with one, as a tensor on that tape. ``head`` is a
    :class:`TaskHead`, an array, or a tensor.
    """
    own = tape is None
    tape = tape or GradTape()
    tokens = np.atleast_2d(np.asarray(input_tokens))
    d = bb.d_model

    def rows(x):
        if x is None:
            return None
        t = tape.lift(x)
        return t if t.value.ndim == 2 else T.reshape(t, (-1, d))

    pre, que = rows(prefix), rows(scaled_queue)
    n_pre = 0 if pre is None else pre.value.shape[0]
    n_que = 0 if que is None else que.value.shape[0]
    check_capacity(bb, n_pre, n_que, tokens.shape[1])
    parts = [t for t in (pre, que) if t is not None and t.value.shape[0] > 0]
    prompt = T.concat(parts, axis=0) if parts else None
    h = encode_cls(bb, tape, prompt, tokens)
    alpha = head.alpha if isinstance(head, TaskHead) else head
    logits = h @ tape.lift(alpha)
    return logits.value if own else logits


def predict_proba(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _pretext_loss(weights: dict, tape: GradTape, seqs: np.ndarray, cfg: BackboneConfig) -> Tensor:
    ps = {k: tape.parameter(k, v) for k, v in weights.items()}
    bsz, n = seqs.shape
    x = _crop_pos(ps, seqs)
    for i in range(cfg.n_layers):
        x = _block(x, ps, i, cfg.n_heads, causal=True)
    h = T.layer_norm(x, ps["lnf_g"], ps["lnf_b"])
    logits = h @ T.transpose(ps["tok_emb"], (1, 0))
    flat = T.reshape(logits, (bsz * (n - 1), cfg.vocab_size))
    return T.cross_entropy(flat, seqs[:, 1:].reshape(-1))


def _crop_pos(ps: dict, seqs: np.ndarray) -> Tensor:
    n = seqs.shape[1] - 1
    pos = ps["pos_emb"]

    def bw(g):
        full = np.zeros_like(pos.value)
        full[:n] = g
        T._acc(pos, full)

    crop = pos.tape.record(pos.value[:n], (pos,), bw)
    return T.embed(ps["tok_emb"], seqs[:, :-1]) + crop


def pretext_corpus(cfg: BackboneConfig, n_seqs: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    """Sequences from a sparse random Markov chain over the pretext half of the vocabulary."""
    region = cfg.vocab_size // 2
    succ = rng.integers(0, region, size=(region, 4))
    seqs = np.empty((n_seqs, seq_len), dtype=np.int64)
    seqs[:, 0] = rng.integers(0, region, size=n_seqs)
    for t in range(1, seq_len):
        pick = rng.integers(0, 4, size=n_seqs)
        seqs[:, t] = succ[seqs[:, t - 1], pick]
    return seqs


def build_backbone(config: BackboneConfig, pretext: np.ndarray | None = None, batch_size: int = 16):
    """Seeded random backbone, optionally warmed by next-token training on ``pretext``.

    Returns ``(backbone, losses)`` where ``losses`` holds the pretext loss at
    every step (empty when no warm-up ran). Pretext tokens must come from the
    lower half of the vocabulary, which downstream tasks never use.
    """
    config.validate()
    weights = _init_weights(config)
    losses = []
    if config.pretext_steps > 0:
        rng = np.random.default_rng([config.seed, 1])
        if pretext is None:
            pretext = pretext_corpus(config, 512, 17, rng)
        pretext = np.asarray(pretext)
        if pretext.max() >= config.vocab_size // 2:
            raise InvalidConfigError("pretext tokens must lie in the pretext half of the vocabulary")
        if pretext.shape[1] - 1 > config.max_seq_len:
            raise InvalidConfigError("pretext sequences longer than max_seq_len")
        state = AdamState(lr=config.pretext_lr)
        for _ in range(config.pretext_steps):
            idx = rng.choice(len(pretext), size=min(batch_size, len(pretext)), replace=False)
            tape = GradTape()
            loss = _pretext_loss(weights, tape, pretext[idx], config)
            losses.append(float(loss.value))
            grads = tape.backward(loss)
            weights, state = adam_step(state, weights, grads)
        tape = GradTape()
        losses.append(float(_pretext_loss(weights, tape, pretext[: min(len(pretext), 64)], config).value))
    return FrozenBackbone(config, weights), losses
