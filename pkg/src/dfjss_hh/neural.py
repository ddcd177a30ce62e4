"""Task-conditioned autoregressive decoder over the token vocabulary.

Plain numpy, forward and backward by hand. Layers are pre-norm:

    x = x + Dropout(MHA(LN1(x)))
    x = x + Dropout(FFN(LN2(x)))

The decoder input is token embedding + learned position + a projection of
the task vector broadcast over positions. Padding reuses END and is masked
out of the loss. Production runs in float32; float64 exists for gradient
checking.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyDataset, FormatVersionMismatch, InvalidConfig, SequenceTooLong, ShapeMismatch
from .expr import Token, VOCAB_SIZE

MAGIC = b"TGPM"
FORMAT_VERSION = 1
LN_EPS = 1e-5
_NEG = -1e9


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 4
    dropout: float = 0.1
    vocab_size: int = VOCAB_SIZE
    max_len: int = 513
    d_task: int = 5
    d_ff: int = 0  # 0 means 4 * d_model

    def __post_init__(self) -> None:
        if self.d_model <= 0 or self.n_heads <= 0 or self.n_layers <= 0:
            raise InvalidConfig("d_model, n_heads and n_layers must be positive")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must be in [0, 1)")
        if self.max_len < 2 or self.d_task < 1 or self.vocab_size < 2:
            raise InvalidConfig("max_len, d_task and vocab_size too small")

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    grad_clip: float = 1.0
    check_gradients: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfig("epochs must be >= 0 and batch_size >= 1")


def param_shapes(cfg: TransformerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes, in the order they are serialised."""
    d, f, r = cfg.d_model, cfg.ff_width, cfg.vocab_size
    shapes = [
        ("tok_emb", (r, d)),
        ("pos_emb", (cfg.max_len, d)),
        ("task_w", (cfg.d_task, d)),
        ("task_b", (d,)),
    ]
    for i in range(cfg.n_layers):
        p = f"l{i}."
        shapes += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "wq", (d, d)), (p + "wk", (d, d)), (p + "wv", (d, d)), (p + "wo", (d, d)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "ff_w1", (d, f)), (p + "ff_b1", (f,)),
            (p + "ff_w2", (f, d)), (p + "ff_b2", (d,)),
        ]
    shapes += [("out_w", (r, d)), ("out_b", (r,))]
    return shapes


@dataclass
class TransformerParams:
    config: TransformerConfig
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def dtype(self):
        return self.arrays["tok_emb"].dtype

    def astype(self, dtype) -> "TransformerParams":
        return TransformerParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "TransformerParams":
        return TransformerParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(cfg: TransformerConfig, rng: np.random.Generator, std: float = 0.02, dtype=np.float32) -> TransformerParams:
    arrays = {}
    for name, shape in param_shapes(cfg):
        base = name.split(".")[-1]
        if base.endswith("_g"):
            a = np.ones(shape)
        elif base.endswith("_b") or base in ("task_b", "out_b"):
            a = np.zeros(shape)
        else:
            a = rng.normal(0.0, std, size=shape)
        arrays[name] = a.astype(dtype)
    return TransformerParams(cfg, arrays)


def zero_params(cfg: TransformerConfig, dtype=np.float32) -> TransformerParams:
    return TransformerParams(cfg, {n: np.zeros(s, dtype=dtype) for n, s in param_shapes(cfg)})


# -- layers -----------------------------------------------------------------

def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _softmax(s, axis=-1):
    s = s - s.max(axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis, keepdims=True)


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def _split(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _as_batch(tokens, cfg: TransformerConfig) -> np.ndarray:
    X = np.asarray(tokens, dtype=np.int64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] > cfg.max_len:
        raise SequenceTooLong(f"sequence length {X.shape[1]} exceeds max_len {cfg.max_len}")
    if X.shape[1] == 0:
        raise ValueError("empty token sequence")
    if X.min() < 0 or X.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary")
    return X


def forward_batch(
    params: TransformerParams,
    X: np.ndarray,
    E: np.ndarray,
    dropout_rng: np.random.Generator | None = None,
    keep_cache: bool = False,
):
    """Logits of shape (B, L, R); dropout only when ``dropout_rng`` is given."""
    cfg = params.config
    P = params.arrays
    X = _as_batch(X, cfg)
    B, L = X.shape
    E = np.asarray(E, dtype=params.dtype).reshape(B, cfg.d_task)
    rate = cfg.dropout if dropout_rng is not None else 0.0
    H = cfg.n_heads
    scale = 1.0 / math.sqrt(cfg.head_dim)
    future = np.triu(np.ones((L, L), dtype=bool), k=1)

    x = P["tok_emb"][X] + P["pos_emb"][:L][None] + (E @ P["task_w"] + P["task_b"])[:, None, :]
    caches = []
    for i in range(cfg.n_layers):
        p = f"l{i}."
        a, ln1 = _ln_fwd(x, P[p + "ln1_g"], P[p + "ln1_b"])
        q = _split(a @ P[p + "wq"], H)
        k = _split(a @ P[p + "wk"], H)
        v = _split(a @ P[p + "wv"], H)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(future, _NEG, s)
        att = _softmax(s)
        o = _merge(att @ v)
        m, drop1 = _dropout(o @ P[p + "wo"], rate, dropout_rng)
        x = x + m
        c, ln2 = _ln_fwd(x, P[p + "ln2_g"], P[p + "ln2_b"])
        u = c @ P[p + "ff_w1"] + P[p + "ff_b1"]
        r = np.maximum(u, 0)
        f, drop2 = _dropout(r @ P[p + "ff_w2"] + P[p + "ff_b2"], rate, dropout_rng)
        x = x + f
        if keep_cache:
            caches.append((a, ln1, q, k, v, att, o, drop1, c, ln2, u, r, drop2))
    logits = x @ P["out_w"].T + P["out_b"]
    if keep_cache:
        return logits, (X, E, x, caches)
    return logits


def forward(params: TransformerParams, tokens: Sequence[int], e_task) -> np.ndarray:
    """Inference-mode logits (L, R) for a single sequence."""
    E = np.asarray(e_task, dtype=params.dtype).reshape(1, -1)
    if E.shape[1] != params.config.d_task:
        raise ShapeMismatch(f"task vector length {E.shape[1]}, expected {params.config.d_task}")
    return forward_batch(params, tokens, E)[0]


def next_token_logits(params: TransformerParams, prefix: Sequence[int], e_task) -> np.ndarray:
    if len(prefix) == 0 or prefix[0] != Token.START:
        raise ValueError("prefix must start with START")
    if len(prefix) >= params.config.max_len:
        raise SequenceTooLong(f"prefix length {len(prefix)} leaves no room below max_len {params.config.max_len}")
    return forward(params, prefix, e_task)[-1]


class IncrementalDecoder:
    """Inference-mode decoding one token at a time with cached keys and values.

    ``logits_for(prefix)`` reuses the cache when ``prefix`` extends the
    previous call's prefix under the same task vector, so sampling a suffix
    costs O(L) per step instead of a full forward pass.
    """

    def __init__(self, params: TransformerParams):
        self.params = params
        self._reset(None)

    def _reset(self, e_key):
        cfg = self.params.config
        self._e_key = e_key
        self._tokens: list[int] = []
        self._k = [np.empty((cfg.n_heads, 0, cfg.head_dim), dtype=self.params.dtype) for _ in range(cfg.n_layers)]
        self._v = [np.empty((cfg.n_heads, 0, cfg.head_dim), dtype=self.params.dtype) for _ in range(cfg.n_layers)]
        self._last = None

    def _extend(self, toks: list[int], task_row: np.ndarray) -> np.ndarray:
        """Append a block of tokens; returns the logits at the last one."""
        cfg = self.params.config
        P = self.params.arrays
        H, dh = cfg.n_heads, cfg.head_dim
        n0, n = len(self._tokens), len(toks)
        x = P["tok_emb"][toks] + P["pos_emb"][n0:n0 + n] + task_row
        scale = 1.0 / math.sqrt(dh)
        # new token j may see cached positions and new positions up to itself
        future = np.triu(np.ones((n, n0 + n), dtype=bool), k=n0 + 1)
        for i in range(cfg.n_layers):
            p = f"l{i}."
            a, _ = _ln_fwd(x, P[p + "ln1_g"], P[p + "ln1_b"])
            q = (a @ P[p + "wq"]).reshape(n, H, dh).transpose(1, 0, 2)
            k = (a @ P[p + "wk"]).reshape(n, H, dh).transpose(1, 0, 2)
            v = (a @ P[p + "wv"]).reshape(n, H, dh).transpose(1, 0, 2)
            self._k[i] = np.concatenate([self._k[i], k], axis=1)
            self._v[i] = np.concatenate([self._v[i], v], axis=1)
            s = (q @ self._k[i].transpose(0, 2, 1)) * scale
            att = _softmax(np.where(future, _NEG, s))
            x = x + (att @ self._v[i]).transpose(1, 0, 2).reshape(n, H * dh) @ P[p + "wo"]
            c, _ = _ln_fwd(x, P[p + "ln2_g"], P[p + "ln2_b"])
            x = x + np.maximum(c @ P[p + "ff_w1"] + P[p + "ff_b1"], 0) @ P[p + "ff_w2"] + P[p + "ff_b2"]
        self._tokens.extend(toks)
        return x[-1] @ P["out_w"].T + P["out_b"]

    def logits_for(self, prefix: Sequence[int], e_task) -> np.ndarray:
        cfg = self.params.config
        if len(prefix) == 0 or prefix[0] != Token.START:
            raise ValueError("prefix must start with START")
        if len(prefix) >= cfg.max_len:
            raise SequenceTooLong(f"prefix length {len(prefix)} leaves no room below max_len {cfg.max_len}")
        E = np.asarray(e_task, dtype=self.params.dtype).reshape(-1)
        if E.shape[0] != cfg.d_task:
            raise ShapeMismatch(f"task vector length {E.shape[0]}, expected {cfg.d_task}")
        prefix = [int(t) for t in prefix]
        e_key = E.tobytes()
        if e_key != self._e_key or prefix[:len(self._tokens)] != self._tokens:
            self._reset(e_key)
        elif prefix == self._tokens:
            return self._last.copy()
        if any(t < 0 or t >= cfg.vocab_size for t in prefix):
            raise ValueError("token id out of vocabulary")
        task_row = E @ self.params["task_w"] + self.params["task_b"]
        self._last = self._extend(prefix[len(self._tokens):], task_row)
        return self._last.copy()


def attention_weights(params: TransformerParams, tokens: Sequence[int], e_task) -> list[np.ndarray]:
    """Per-layer attention matrices (H, L, L) for one sequence, inference mode."""
    E = np.asarray(e_task, dtype=params.dtype).reshape(1, -1)
    _, (_, _, _, caches) = forward_batch(params, tokens, E, keep_cache=True)
    return [c[5][0] for c in caches]


# -- loss and gradients -------------------------------------------------------

def _log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def loss(logits: np.ndarray, targets: Sequence[int] | np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean next-token negative log-likelihood.

    ``targets`` is the input sequence itself: position i predicts token i+1.
    Accepts one sequence (L, R) or a batch (B, L, R). ``mask`` marks which
    input tokens are real (same shape as ``targets``).
    """
    logits = np.asarray(logits, dtype=float)
    T = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 2:
        logits, T = logits[None], T[None]
        mask = None if mask is None else np.asarray(mask)[None]
    nll, count, _ = _nll_and_grad(logits, T, mask, want_grad=False)
    return nll / count


def _nll_and_grad(logits, X, mask, want_grad=True):
    B, L, R = logits.shape
    w = np.ones((B, L - 1)) if mask is None else np.asarray(mask, dtype=float)[:, 1:]
    lp = _log_softmax(logits[:, :-1])
    tgt = X[:, 1:]
    picked = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
    count = float(w.sum())
    nll = float(-(picked * w).sum())
    if not want_grad:
        return nll, max(count, 1.0), None
    g = np.exp(lp)
    np.put_along_axis(g, tgt[..., None], np.take_along_axis(g, tgt[..., None], axis=-1) - 1.0, axis=-1)
    g *= (w / max(count, 1.0))[..., None]
    d = np.zeros_like(logits)
    d[:, :-1] = g
    return nll, max(count, 1.0), d


def loss_and_grads(
    params: TransformerParams,
    X: np.ndarray,
    E: np.ndarray,
    mask: np.ndarray | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray], float]:
    """Mean loss, gradients of every parameter, and the count of predicted tokens."""
    cfg = params.config
    P = params.arrays
    logits, (X, E, xL, caches) = forward_batch(params, X, E, dropout_rng, keep_cache=True)
    nll, count, dlog = _nll_and_grad(logits.astype(np.float64), X, mask)
    dlog = dlog.astype(params.dtype)
    G: dict[str, np.ndarray] = {}
    d, H = cfg.d_model, cfg.n_heads
    scale = 1.0 / math.sqrt(cfg.head_dim)

    G["out_w"] = dlog.reshape(-1, cfg.vocab_size).T @ xL.reshape(-1, d)
    G["out_b"] = dlog.sum((0, 1))
    dx = dlog @ P["out_w"]
    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        a, ln1, q, k, v, att, o, drop1, c, ln2, u, r, drop2 = caches[i]
        df = dx if drop2 is None else dx * drop2
        G[p + "ff_b2"] = df.sum((0, 1))
        G[p + "ff_w2"] = r.reshape(-1, r.shape[-1]).T @ df.reshape(-1, d)
        du = (df @ P[p + "ff_w2"].T) * (u > 0)
        G[p + "ff_b1"] = du.sum((0, 1))
        G[p + "ff_w1"] = c.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        dc = du @ P[p + "ff_w1"].T
        dxc, G[p + "ln2_g"], G[p + "ln2_b"] = _ln_bwd(dc, ln2)
        dx = dx + dxc

        dm = dx if drop1 is None else dx * drop1
        G[p + "wo"] = o.reshape(-1, d).T @ dm.reshape(-1, d)
        do = _split(dm @ P[p + "wo"].T, H)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq, dk, dv = _merge(dq), _merge(dk), _merge(dv)
        a2 = a.reshape(-1, d)
        G[p + "wq"] = a2.T @ dq.reshape(-1, d)
        G[p + "wk"] = a2.T @ dk.reshape(-1, d)
        G[p + "wv"] = a2.T @ dv.reshape(-1, d)
        da = dq @ P[p + "wq"].T + dk @ P[p + "wk"].T + dv @ P[p + "wv"].T
        dxa, G[p + "ln1_g"], G[p + "ln1_b"] = _ln_bwd(da, ln1)
        dx = dx + dxa

    g_tok = np.zeros_like(P["tok_emb"])
    np.add.at(g_tok, X, dx)
    G["tok_emb"] = g_tok
    g_pos = np.zeros_like(P["pos_emb"])
    g_pos[: X.shape[1]] = dx.sum(0)
    G["pos_emb"] = g_pos
    dctx = dx.sum(1)
    G["task_w"] = E.T @ dctx
    G["task_b"] = dctx.sum(0)
    return nll / count, G, count


def gradient_check(
    params: TransformerParams,
    X: np.ndarray,
    E: np.ndarray,
    mask: np.ndarray | None = None,
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Relative error between analytic and central-difference gradients per parameter group.

    The error of a group is ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||),
    0 when both vanish. Runs in float64 with dropout off. ``max_entries``
    limits the checked coordinates per group (sampled with ``rng``).
    """
    p64 = params.astype(np.float64)
    _, G, _ = loss_and_grads(p64, X, E, mask)
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, arr in p64.arrays.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        for j, t in enumerate(idx):
            old = flat[t]
            flat[t] = old + eps
            lp = loss(forward_batch(p64, X, E), X, mask)
            flat[t] = old - eps
            lm = loss(forward_batch(p64, X, E), X, mask)
            flat[t] = old
            num[j] = (lp - lm) / (2 * eps)
        ana = G[name].reshape(-1)[idx]
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        errors[name] = 0.0 if scale < 1e-12 else float(np.linalg.norm(ana - num) / scale)
    return errors


# -- training -----------------------------------------------------------------

class Adam:
    def __init__(self, params: TransformerParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: TransformerParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params.arrays[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params.dtype)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Pad with END to the batch maximum; mask is 1 on real tokens."""
    L = max(len(s) for s in seqs)
    X = np.full((len(seqs), L), int(Token.END), dtype=np.int64)
    M = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        X[i, : len(s)] = s
        M[i, : len(s)] = 1.0
    return X, M


@dataclass
class TrainResult:
    params: TransformerParams
    history: list[float] = field(default_factory=list)  # history[0] is before any update

    @property
    def initial_loss(self) -> float:
        return self.history[0]

    @property
    def final_loss(self) -> float:
        return self.history[-1]


def dataset_loss(params: TransformerParams, seqs, embs, batch_size: int = 64) -> float:
    nll = count = 0.0
    for s in range(0, len(seqs), batch_size):
        X, M = pad_batch(seqs[s : s + batch_size])
        logits = forward_batch(params, X, embs[s : s + batch_size])
        n, c, _ = _nll_and_grad(logits.astype(np.float64), X, M, want_grad=False)
        nll += n
        count += float(M[:, 1:].sum())
    return nll / max(count, 1.0)


def train(
    ds,
    mcfg: TransformerConfig,
    tcfg: TrainConfig,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Adam on mean next-token NLL; ``ds`` is an EliteDataset or ``(sequences, embeddings)``."""
    if isinstance(ds, tuple):
        seqs, embs = ds
    else:
        from .dataset import sequences_and_embeddings

        seqs, embs = sequences_and_embeddings(ds)
    if len(seqs) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    longest = max(len(s) for s in seqs)
    if longest > mcfg.max_len:
        raise SequenceTooLong(f"training sequence of length {longest} exceeds max_len {mcfg.max_len}")
    embs = np.asarray(embs, dtype=np.float32).reshape(len(seqs), mcfg.d_task)

    rng = np.random.default_rng(tcfg.seed)
    params = init_params(mcfg, rng)
    if tcfg.check_gradients:
        _check_before_training(mcfg, seqs, embs, rng)
    opt = Adam(params, tcfg.learning_rate)
    history = [dataset_loss(params, seqs, embs, tcfg.batch_size)]
    if progress:
        progress(0, history[0])
    n = len(seqs)
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(n)
        nll = count = 0.0
        for s in range(0, n, tcfg.batch_size):
            idx = order[s : s + tcfg.batch_size]
            X, M = pad_batch([seqs[i] for i in idx])
            mean, grads, c = loss_and_grads(params, X, embs[idx], M, dropout_rng=rng)
            clip_grads(grads, tcfg.grad_clip)
            opt.step(params, grads)
            nll += mean * c
            count += c
        history.append(nll / count)
        if progress:
            progress(epoch, history[-1])
    return TrainResult(params, history)


def _check_before_training(mcfg, seqs, embs, rng, tol: float = 1e-3) -> None:
    p = init_params(mcfg, rng, dtype=np.float64)
    X, M = pad_batch(seqs[:2])
    errs = gradient_check(p, X, embs[:2].astype(np.float64), M, max_entries=8, rng=rng)
    bad = {k: e for k, e in errs.items() if e >= tol}
    if bad:
        raise RuntimeError(f"gradient check failed: {bad}")


def write_loss_csv(history: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for e, v in enumerate(history):
            w.writerow([e, f"{v:.6f}"])


# -- serialisation -------------------------------------------------------------

_HEADER = struct.Struct("<4sI7If")


def save_params(params: TransformerParams, path: str | Path) -> None:
    """Binary layout (little-endian).

    magic "TGPM", u32 version, u32 d_model, n_heads, n_layers, vocab_size,
    max_len, d_task, ff_width, f32 dropout; then every array of
    ``param_shapes`` in order as contiguous float32.
    """
    c = params.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, c.d_model, c.n_heads, c.n_layers,
                              c.vocab_size, c.max_len, c.d_task, c.ff_width, c.dropout))
        for name, shape in param_shapes(c):
            arr = params.arrays[name]
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: shape {arr.shape}, expected {shape}")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path: str | Path) -> TransformerParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        if data[:4] != MAGIC[: len(data[:4])]:
            raise FormatVersionMismatch(f"{path}: not a model file")
        raise ShapeMismatch(f"{path}: truncated header")
    magic, version, d, h, q, r, L, dt, ff, drop = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatVersionMismatch(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path}: version {version}, expected {FORMAT_VERSION}")
    try:
        cfg = TransformerConfig(d, h, q, round(float(drop), 6), r, L, dt, ff)
    except InvalidConfig as exc:
        raise ShapeMismatch(f"{path}: invalid config block: {exc}") from None
    off = _HEADER.size
    arrays = {}
    for name, shape in param_shapes(cfg):
        n = int(np.prod(shape))
        end = off + 4 * n
        if end > len(data):
            raise ShapeMismatch(f"{path}: truncated at {name}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off = end
    if off != len(data):
        raise ShapeMismatch(f"{path}: {len(data) - off} trailing bytes")
    return TransformerParams(cfg, arrays)
