"""Q-networks with hand-written reverse-mode gradients.

Two fixed graphs are supported:

``memoryless``
    conv blocks -> global average pool -> linear -> ReLU -> linear
``stateful``
    the same encoder applied to the current state and up to ``H`` past
    states, each token concatenated with an embedding of the action taken
    from it, one multi-head self-attention layer, a masked mean over the
    valid tokens and a final linear layer.

Parameters live in a plain ``dict`` of named numpy arrays (insertion
ordered), so copying, hashing and serialising them needs no framework.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError

ParamStore = dict  # name -> np.ndarray
GradStore = dict


@dataclass(frozen=True)
class NetArchitecture:
    variant: str = "memoryless"
    in_channels: int = 2
    conv_channels: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 64
    n_actions: int = 4
    history_len: int = 7
    attn_heads: int = 8
    action_embed_dim: int = 8

    def __post_init__(self) -> None:
        if self.variant not in ("memoryless", "stateful"):
            raise ConfigurationError(f"unknown network variant {self.variant!r}")
        if self.n_actions < 2:
            raise ConfigurationError("need at least two actions")
        if self.history_len < 0:
            raise ConfigurationError("history_len must be >= 0")
        if self.in_channels < 1 or not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigurationError("invalid convolution channel layout")
        if self.variant == "stateful":
            if self.embed_dim % self.attn_heads:
                raise ConfigurationError("embed_dim must be divisible by attn_heads")
            if self.token_dim % self.attn_heads:
                raise ConfigurationError("embed_dim + action_embed_dim must be divisible by attn_heads")

    @property
    def token_dim(self) -> int:
        return self.embed_dim + self.action_embed_dim

    @property
    def null_action(self) -> int:
        return self.n_actions

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = self.in_channels
        for i, c_out in enumerate(self.conv_channels):
            shapes[f"conv{i}.w"] = (c_out, c_in, 3, 3)
            shapes[f"conv{i}.b"] = (c_out,)
            c_in = c_out
        shapes["embed.w"] = (c_in, self.embed_dim)
        shapes["embed.b"] = (self.embed_dim,)
        if self.variant == "memoryless":
            shapes["head.w"] = (self.embed_dim, self.n_actions)
            shapes["head.b"] = (self.n_actions,)
        else:
            d = self.token_dim
            shapes["action_embed"] = (self.n_actions + 1, self.action_embed_dim)
            for name in ("q", "k", "v", "o"):
                shapes[f"attn.w{name}"] = (d, d)
                shapes[f"attn.b{name}"] = (d,)
            shapes["head.w"] = (d, self.n_actions)
            shapes["head.b"] = (self.n_actions,)
        return shapes

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


@dataclass(frozen=True)
class HistoryWindow:
    """Current state plus up to ``history_len`` earlier (state, action) pairs, oldest first."""

    current: np.ndarray
    past: tuple[tuple[np.ndarray, int], ...] = ()

    def push(self, action: int, new_current: np.ndarray, history_len: int) -> "HistoryWindow":
        if history_len == 0:
            return HistoryWindow(new_current, ())
        past = (self.past + ((self.current, int(action)),))[-history_len:]
        return HistoryWindow(new_current, past)

    def arrays(self, arch: NetArchitecture) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(features (H+1, ...), actions (H+1,), mask (H+1,))`` with padding in front."""
        h = arch.history_len
        if len(self.past) > h:
            raise DomainError(f"window holds {len(self.past)} past states, architecture allows {h}")
        n_pad = h - len(self.past)
        zero = np.zeros_like(self.current)
        feats = [zero] * n_pad + [f for f, _ in self.past] + [self.current]
        actions = [arch.null_action] * n_pad + [a for _, a in self.past] + [arch.null_action]
        mask = [False] * n_pad + [True] * (len(self.past) + 1)
        return np.stack(feats), np.array(actions, dtype=np.int64), np.array(mask, dtype=bool)


def stack_inputs(states: Sequence, arch: NetArchitecture):
    """Batch a list of FeatureMaps (memoryless) or HistoryWindows (stateful)."""
    if arch.variant == "memoryless":
        return np.stack([np.asarray(s) for s in states])
    parts = [w.arrays(arch) for w in states]
    return (
        np.stack([p[0] for p in parts]),
        np.stack([p[1] for p in parts]),
        np.stack([p[2] for p in parts]),
    )


# ---------------------------------------------------------------- init


def init_params(arch: NetArchitecture, seed: int = 0, dtype=np.float32) -> ParamStore:
    """He-uniform convolutions, Xavier-uniform dense layers, zero biases."""
    rng = np.random.default_rng(seed)
    params: ParamStore = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b") or name.startswith("attn.b"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.startswith("conv"):
            fan_in = shape[1] * shape[2] * shape[3]
            lim = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
        else:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
    return params


def copy_params(params: ParamStore) -> ParamStore:
    return {k: v.copy() for k, v in params.items()}


def params_hash(params: ParamStore) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def cast_params(params: ParamStore, dtype) -> ParamStore:
    return {k: v.astype(dtype) for k, v in params.items()}


# ---------------------------------------------------------------- layers


# Encoder tensors are channels-last, (n, mels, frames, channels).


def _conv_forward(x, w, b):
    n, hgt, wid, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, h, w, c, 3, 3)
    cols = win.reshape(n * hgt * wid, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, hgt, wid, -1), cols


def _conv_backward(dout, cols, x_shape, w, need_dx=True):
    n, hgt, wid, c = x_shape
    o = w.shape[0]
    g = dout.reshape(-1, o)
    dw = (g.T @ cols).reshape(w.shape)
    db = g.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (g @ w.reshape(o, -1)).reshape(n, hgt, wid, c, 3, 3)
    dxp = np.zeros((n, hgt + 2, wid + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + hgt, j : j + wid, :] += dcols[..., i, j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool_factors(shape) -> tuple[int, int]:
    return (2 if shape[1] >= 2 else 1), (2 if shape[2] >= 2 else 1)


def _pool_forward(x):
    ph, pw = _pool_factors(x.shape)
    n, hgt, wid, c = x.shape
    h2, w2 = hgt // ph, wid // pw
    xc = x[:, : h2 * ph, : w2 * pw, :]
    return xc.reshape(n, h2, ph, w2, pw, c).mean(axis=(2, 4))


def _pool_backward(dout, x_shape):
    ph, pw = _pool_factors(x_shape)
    n, h2, w2, c = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    g = np.broadcast_to(dout[:, :, None, :, None, :] / (ph * pw), (n, h2, ph, w2, pw, c))
    dx[:, : h2 * ph, : w2 * pw, :] = g.reshape(n, h2 * ph, w2 * pw, c)
    return dx


def _encode(params, arch, x):
    """Shared encoder on ``(n, K, mels, frames)`` input: returns (embedding (n, embed_dim), cache)."""
    caches = []
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    for i in range(len(arch.conv_channels)):
        z, cols = _conv_forward(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
        a = np.maximum(z, 0)
        caches.append((h.shape, cols, z))
        h = _pool_forward(a)
    gap = h.mean(axis=(1, 2))
    pre = gap @ params["embed.w"] + params["embed.b"]
    emb = np.maximum(pre, 0)
    return emb, (caches, h.shape, gap, pre)


def _encode_backward(params, arch, cache, demb, grads):
    caches, h_shape, gap, pre = cache
    dpre = demb * (pre > 0)
    grads["embed.w"] = gap.T @ dpre
    grads["embed.b"] = dpre.sum(axis=0)
    dgap = dpre @ params["embed.w"].T
    dh = np.broadcast_to(dgap[:, None, None, :] / (h_shape[1] * h_shape[2]), h_shape)
    for i in reversed(range(len(arch.conv_channels))):
        x_shape, cols, z = caches[i]
        da = _pool_backward(dh, z.shape)
        dz = da * (z > 0)
        dh, dw, db = _conv_backward(dz, cols, x_shape, params[f"conv{i}.w"], need_dx=i > 0)
        grads[f"conv{i}.w"] = dw
        grads[f"conv{i}.b"] = db


def _softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- forward


def forward_memoryless(params: ParamStore, features: np.ndarray, arch: Optional[NetArchitecture] = None, return_cache: bool = False):
    """Q-values for a FeatureMap ``(K, mels, frames)`` or a batch ``(B, K, mels, frames)``."""
    arch = arch or _infer_arch(params, "memoryless")
    x = np.asarray(features)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise DomainError(f"expected (B, {arch.in_channels}, mels, frames) input, got {x.shape}")
    x = x.astype(params["head.w"].dtype, copy=False)
    emb, enc_cache = _encode(params, arch, x)
    q = emb @ params["head.w"] + params["head.b"]
    out = q[0] if single else q
    if return_cache:
        return out, {"enc": enc_cache, "emb": emb, "single": single}
    return out


def forward_stateful(params: ParamStore, window, arch: NetArchitecture, return_cache: bool = False):
    """Q-values for a HistoryWindow, or for pre-stacked ``(feats, actions, mask)`` batches."""
    single = isinstance(window, HistoryWindow)
    if single:
        feats, actions, mask = window.arrays(arch)
        feats, actions, mask = feats[None], actions[None], mask[None]
    else:
        feats, actions, mask = window
    dtype = params["head.w"].dtype
    bsz, n_tok = actions.shape
    if feats.shape[:2] != (bsz, n_tok) or feats.shape[2] != arch.in_channels or n_tok != arch.history_len + 1:
        raise DomainError(f"window batch shape {feats.shape} does not match the architecture")
    if not np.all(mask[:, -1]):
        raise DomainError("the current state must always be valid")

    flat = feats.reshape(bsz * n_tok, *feats.shape[2:]).astype(dtype, copy=False)
    valid = np.flatnonzero(mask.reshape(-1))
    emb_valid, enc_cache = _encode(params, arch, flat[valid])
    emb = np.zeros((bsz * n_tok, arch.embed_dim), dtype=dtype)
    emb[valid] = emb_valid
    tokens = np.concatenate([emb.reshape(bsz, n_tok, -1), params["action_embed"][actions]], axis=-1)

    d = arch.token_dim
    nh = arch.attn_heads
    dh = d // nh

    def heads(t):
        return t.reshape(bsz, n_tok, nh, dh).transpose(0, 2, 1, 3)

    qh = heads(tokens @ params["attn.wq"] + params["attn.bq"])
    kh = heads(tokens @ params["attn.wk"] + params["attn.bk"])
    vh = heads(tokens @ params["attn.wv"] + params["attn.bv"])
    scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
    scores = np.where(mask[:, None, None, :], scores, -np.inf)
    probs = _softmax(scores)
    ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(bsz, n_tok, d)
    attn_out = ctx @ params["attn.wo"] + params["attn.bo"]
    m = mask.astype(dtype)
    count = m.sum(axis=1, keepdims=True)
    pooled = (attn_out * m[:, :, None]).sum(axis=1) / count
    q = pooled @ params["head.w"] + params["head.b"]
    out = q[0] if single else q
    if return_cache:
        cache = dict(
            enc=enc_cache, valid=valid, tokens=tokens, actions=actions, mask=mask,
            qh=qh, kh=kh, vh=vh, probs=probs, ctx=ctx, m=m, count=count, pooled=pooled,
            shape=(bsz, n_tok), single=single,
        )
        return out, cache
    return out


def forward(params: ParamStore, arch: NetArchitecture, inputs, return_cache: bool = False):
    if arch.variant == "memoryless":
        return forward_memoryless(params, inputs, arch, return_cache)
    return forward_stateful(params, inputs, arch, return_cache)


def _infer_arch(params: ParamStore, variant: str) -> NetArchitecture:
    n_conv = sum(1 for k in params if k.startswith("conv") and k.endswith(".w"))
    chans = tuple(params[f"conv{i}.w"].shape[0] for i in range(n_conv))
    return NetArchitecture(
        variant=variant,
        in_channels=params["conv0.w"].shape[1],
        conv_channels=chans,
        embed_dim=params["embed.w"].shape[1],
        n_actions=params["head.w"].shape[1],
    )


# ---------------------------------------------------------------- backward


def backward(params: ParamStore, arch: NetArchitecture, cache: dict, dq: np.ndarray) -> GradStore:
    """Gradients of ``sum(dq * Q)`` with respect to every parameter."""
    grads: GradStore = {}
    if cache["single"]:
        dq = dq[None]
    if arch.variant == "memoryless":
        emb = cache["emb"]
        grads["head.w"] = emb.T @ dq
        grads["head.b"] = dq.sum(axis=0)
        _encode_backward(params, arch, cache["enc"], dq @ params["head.w"].T, grads)
        return {k: grads[k] for k in params}

    bsz, n_tok = cache["shape"]
    d = arch.token_dim
    nh = arch.attn_heads
    dh = d // nh
    pooled, m, count = cache["pooled"], cache["m"], cache["count"]
    grads["head.w"] = pooled.T @ dq
    grads["head.b"] = dq.sum(axis=0)
    dpooled = dq @ params["head.w"].T
    dattn = dpooled[:, None, :] * (m / count)[:, :, None]
    ctx = cache["ctx"]
    grads["attn.wo"] = ctx.reshape(-1, d).T @ dattn.reshape(-1, d)
    grads["attn.bo"] = dattn.sum(axis=(0, 1))
    dctx = dattn @ params["attn.wo"].T
    dctx_h = dctx.reshape(bsz, n_tok, nh, dh).transpose(0, 2, 1, 3)
    probs, qh, kh, vh = cache["probs"], cache["qh"], cache["kh"], cache["vh"]
    dprobs = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ dctx_h
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dh)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(bsz * n_tok, d)

    tokens = cache["tokens"].reshape(-1, d)
    dtokens = np.zeros_like(tokens)
    for name, g in (("q", dqh), ("k", dkh), ("v", dvh)):
        g = merge(g)
        grads[f"attn.w{name}"] = tokens.T @ g
        grads[f"attn.b{name}"] = g.sum(axis=0)
        dtokens += g @ params[f"attn.w{name}"].T

    demb = dtokens[:, : arch.embed_dim]
    dact = dtokens[:, arch.embed_dim :]
    g_act = np.zeros_like(params["action_embed"])
    np.add.at(g_act, cache["actions"].reshape(-1), dact)
    grads["action_embed"] = g_act
    _encode_backward(params, arch, cache["enc"], demb[cache["valid"]], grads)
    return {k: grads[k] for k in params}


# ---------------------------------------------------------------- loss


@dataclass
class Transition:
    state: object  # FeatureMap or HistoryWindow
    action: int
    reward: float
    next_state: object
    terminal: bool
    episode_id: int = -1


def q_values(params: ParamStore, arch: NetArchitecture, states: Sequence) -> np.ndarray:
    return forward(params, arch, stack_inputs(states, arch))


def td_target(transition: Transition, target_params: ParamStore, gamma: float, arch: Optional[NetArchitecture] = None) -> float:
    """``r`` for terminal transitions, otherwise ``r + gamma * max_a Q_target(s', a)``."""
    if transition.terminal:
        return float(transition.reward)
    arch = arch or _infer_arch(target_params, "memoryless")
    q_next = forward(target_params, arch, stack_inputs([transition.next_state], arch))[0]
    return float(transition.reward + gamma * np.max(q_next))


def td_targets(batch: Sequence[Transition], target_params: ParamStore, arch: NetArchitecture, gamma: float) -> np.ndarray:
    dtype = target_params["head.w"].dtype
    rewards = np.array([t.reward for t in batch], dtype=dtype)
    live = np.array([not t.terminal for t in batch])
    targets = rewards.copy()
    if gamma != 0 and live.any():
        idx = np.flatnonzero(live)
        q_next = forward(target_params, arch, stack_inputs([batch[i].next_state for i in idx], arch))
        targets[idx] += dtype.type(gamma) * q_next.max(axis=1)
    return targets


def loss_and_grads(
    params: ParamStore,
    target_params: ParamStore,
    batch: Sequence[Transition],
    gamma: float,
    arch: NetArchitecture,
) -> tuple[float, GradStore]:
    """Mean squared temporal-difference error and its gradient.

    The target branch is evaluated with ``target_params`` and treated as a
    constant, so it contributes nothing to the gradient.
    """
    if len(batch) == 0:
        raise DomainError("empty batch")
    targets = td_targets(batch, target_params, arch, gamma)
    q, cache = forward(params, arch, stack_inputs([t.state for t in batch], arch), return_cache=True)
    actions = np.array([t.action for t in batch])
    rows = np.arange(len(batch))
    diff = q[rows, actions] - targets
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * diff / len(batch)
    return loss, backward(params, arch, cache, dq)


# ---------------------------------------------------------------- optimiser


@dataclass
class OptState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamStore, **hyper) -> "OptState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **hyper,
        )

    def copy(self) -> "OptState":
        return replace(self, m=copy_params(self.m), v=copy_params(self.v))


def adam_step(params: ParamStore, grads: GradStore, opt: OptState) -> tuple[ParamStore, OptState]:
    """One bias-corrected Adam update; returns new parameter and state objects."""
    if params.keys() != grads.keys():
        raise DomainError("gradient names do not match parameter names")
    t = opt.t + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DomainError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        new_params[k] = (p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype)
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_params, replace(opt, m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------- target network


def hard_update(target_params: ParamStore, snapshot_queue: Sequence[ParamStore], delay: int) -> ParamStore:
    """Copy the online snapshot taken ``delay`` update iterations ago.

    ``snapshot_queue`` is ordered oldest first, newest last; when it is
    shorter than ``delay + 1`` the oldest snapshot is used. An empty queue
    leaves the target as it is.
    """
    if delay < 0:
        raise DomainError("delay must be >= 0")
    if len(snapshot_queue) == 0:
        return copy_params(target_params)
    idx = max(0, len(snapshot_queue) - 1 - delay)
    return copy_params(snapshot_queue[idx])


def soft_update(target_params: ParamStore, online_params: ParamStore, tau: float) -> ParamStore:
    """Exponential moving average ``(1 - tau) * target + tau * online``."""
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    out = {}
    for k, t in target_params.items():
        o = online_params[k]
        if o.shape != t.shape:
            raise DomainError(f"shape mismatch for {k}")
        out[k] = ((1.0 - tau) * t + tau * o).astype(t.dtype)
    return out
