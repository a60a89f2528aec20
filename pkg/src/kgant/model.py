"""Encoder-decoder action anticipator with knowledge-guided attention.

Attention logits are ``Q R K^T / sqrt(d_k)`` where ``R = I + dR`` comes from
an LSTM run over the window's context vectors.  One ``R`` per window and
side (encoder self-attention / decoder cross-attention), shared by every
layer and, unless ``per_head_rect`` is set, by every head.

Parameter count (``n`` graph nodes, ``P`` positional rows, ``h`` LSTM
hidden, ``r = d_k^2`` or ``H d_k^2`` per head, ``k`` concept hidden, ``T``
propagation rounds)::

    F D + D + P D + M D
    + L_e (12 D^2 + 13 D) + L_d (16 D^2 + 19 D)
    + 2 (D C + C) + D + 1
    + 2 [4 h (D_ctx + h) + 4 h + h r + r]
    + n D_kg + (D_kg + F) k + (D_kg + F + T + 1) k + 2 k + k + 1 + k D_ctx + D_ctx
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .data import decode_durations, window_targets
from .knowledge_graph import ConceptNet, select_active

MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    feature_dim: int = 64
    n_classes: int = 13
    d_model: int = 32
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    n_queries: int = 8
    max_obs: int = 64
    ffn_mult: int = 4
    dropout: float = 0.1
    n_max: int = 16
    d_ctx: int = 32
    d_kg: int = 32
    kg_hidden: int = 32
    lstm_hidden: int = 32
    gamma: float = 0.5
    prop_steps: int = 3
    per_head_rect: bool = False
    kg_mode: str = "window"  # or "frame"
    use_kg: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.kg_mode not in ("window", "frame"):
            raise ValueError(f"kg_mode must be 'window' or 'frame', got {self.kg_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    @property
    def rect_out(self):
        return self.d_k ** 2 * (self.n_heads if self.per_head_rect else 1)

    def to_dict(self):
        return asdict(self)


def param_count(cfg, n_nodes):
    D, F, C, M = cfg.d_model, cfg.feature_dim, cfg.n_classes, cfg.n_queries
    h, r, k = cfg.lstm_hidden, cfg.rect_out, cfg.kg_hidden
    total = F * D + D + cfg.max_obs * D + M * D
    total += cfg.enc_layers * (12 * D * D + 13 * D) + cfg.dec_layers * (16 * D * D + 19 * D)
    total += 2 * (D * C + C) + D + 1
    total += 2 * (4 * h * (cfg.d_ctx + h) + 4 * h + h * r + r)
    fan = cfg.d_kg + F
    total += n_nodes * cfg.d_kg + fan * k + (fan + cfg.prop_steps + 1) * k + 2 * k + k + 1 + k * cfg.d_ctx + cfg.d_ctx
    return total


@dataclass
class PredictionBundle:
    a_obs: ag.Tensor  # (B, n, C) logits, padded frames included
    a_pred: ag.Tensor  # (B, M, C) logits
    d_pred: ag.Tensor  # (B, M) duration shares, rows on the simplex
    r_enc: np.ndarray | None = None
    r_dec: np.ndarray | None = None
    attention: dict = field(default_factory=dict)  # name -> (B, H, a, b) weights


@dataclass
class WindowBatch:
    """Padded inputs (and optional targets) for a list of observation windows."""
    feats: np.ndarray  # (B, n, F)
    obs_mask: np.ndarray  # (B, n) 1.0 on real frames
    n_obs: list
    visual: np.ndarray  # (B, F) window-mean features
    node_idx: np.ndarray  # (B, N_max) ranked active nodes, 0 where padded
    node_depth: np.ndarray  # (B, N_max) propagation round of each ranked node
    node_mask: np.ndarray  # (B, N_max)
    active: list  # per window list of node ids
    obs_labels: np.ndarray | None = None  # (B, n)
    target_actions: np.ndarray | None = None  # (B, M)
    target_durations: np.ndarray | None = None  # (B, M)

    def __len__(self):
        return len(self.n_obs)


def kg_attention(q, k, v, r=None, mask=None):
    """``softmax(q r k^T / sqrt(d_k) + mask) v`` and the attention weights.

    ``q`` (..., a, d_k), ``k`` (..., b, d_k), ``v`` (..., b, d_v); ``r`` is
    (..., d_k, d_k) or None for plain scaled dot-product attention.  ``mask``
    is an additive constant array broadcastable to (..., a, b).
    """
    d_k = q.shape[-1]
    qr = q if r is None else ag.matmul(q, r)
    scores = ag.mul(ag.matmul(qr, ag.transpose(k)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        scores = ag.add(scores, np.broadcast_to(mask, scores.shape).astype(scores.dtype))
    attn = ag.softmax(scores, axis=-1)
    return ag.matmul(attn, v), attn


class KGAnticipator:
    def __init__(self, cfg, graph, seed=0):
        self.cfg = cfg
        self.graph = graph
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        self.concept = ConceptNet(len(graph), cfg.feature_dim, cfg.d_kg, cfg.d_ctx, cfg.kg_hidden,
                                  n_depth=cfg.prop_steps + 1, rng=np.random.default_rng([seed, 1]), dtype=self.dtype)
        self.params = {}
        self._build(rng)
        self.params.update(self.concept.params)

    # ------------------------------------------------------------ params
    def _dense(self, rng, name, fan_in, fan_out, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else ag.uniform_init(rng, (fan_in, fan_out), fan_in)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(fan_out))

    def _add(self, name, value):
        self.params[name] = ag.Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def _norm(self, name):
        self._add(f"{name}.g", np.ones(self.cfg.d_model))
        self._add(f"{name}.b", np.zeros(self.cfg.d_model))

    def _attn_params(self, rng, name):
        D = self.cfg.d_model
        for part in ("q", "k", "v", "o"):
            self._dense(rng, f"{name}.{part}", D, D)

    def _ffn_params(self, rng, name):
        D, hid = self.cfg.d_model, self.cfg.d_model * self.cfg.ffn_mult
        self._dense(rng, f"{name}.in", D, hid)
        self._dense(rng, f"{name}.out", hid, D)

    def _build(self, rng):
        c = self.cfg
        D = c.d_model
        self._dense(rng, "proj", c.feature_dim, D)
        self._add("pos", rng.normal(0.0, 0.1, size=(c.max_obs, D)))
        for i in range(c.enc_layers):
            self._attn_params(rng, f"enc.{i}.attn")
            self._norm(f"enc.{i}.ln1")
            self._ffn_params(rng, f"enc.{i}.ff")
            self._norm(f"enc.{i}.ln2")
        self._add("dec.query", rng.normal(0.0, 1.0, size=(c.n_queries, D)))
        for i in range(c.dec_layers):
            self._attn_params(rng, f"dec.{i}.self")
            self._norm(f"dec.{i}.ln1")
            self._attn_params(rng, f"dec.{i}.cross")
            self._norm(f"dec.{i}.ln2")
            self._ffn_params(rng, f"dec.{i}.ff")
            self._norm(f"dec.{i}.ln3")
        self._dense(rng, "head.obs", D, c.n_classes)
        self._dense(rng, "head.act", D, c.n_classes)
        self._dense(rng, "head.dur", D, 1)
        h = c.lstm_hidden
        for side in ("enc", "dec"):
            self._add(f"rect.{side}.lstm.w", ag.uniform_init(rng, (c.d_ctx + h, 4 * h), h))
            self._add(f"rect.{side}.lstm.b", np.zeros(4 * h))
            self._dense(rng, f"rect.{side}.out", h, c.rect_out, zero=True)

    def n_params(self):
        return sum(p.data.size for p in self.params.values())

    def state_dict(self):
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint/model mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arrays[k].shape} vs model {p.shape}")
            p.data = np.asarray(arrays[k], dtype=self.dtype).copy()

    def zero_rectification(self):
        for side in ("enc", "dec"):
            for part in ("w", "b"):
                p = self.params[f"rect.{side}.out.{part}"]
                p.data = np.zeros_like(p.data)

    # ------------------------------------------------------------- inputs
    def prepare(self, episodes, windows, with_targets=True):
        c = self.cfg
        B = len(episodes)
        n = max(w.n_obs for w in windows)
        if n > c.max_obs:
            raise ValueError(f"observed window of {n} frames exceeds max_obs={c.max_obs}")
        feats = np.zeros((B, n, c.feature_dim), dtype=self.dtype)
        mask = np.zeros((B, n), dtype=self.dtype)
        visual = np.zeros((B, c.feature_dim), dtype=self.dtype)
        node_idx = np.zeros((B, c.n_max), dtype=np.int64)
        node_depth = np.zeros((B, c.n_max), dtype=np.int64)
        node_mask = np.zeros((B, c.n_max), dtype=self.dtype)
        obs_labels = np.zeros((B, n), dtype=np.int64)
        t_act = np.zeros((B, c.n_queries), dtype=np.int64)
        t_dur = np.zeros((B, c.n_queries), dtype=self.dtype)
        actives = []
        for b, (ep, win) in enumerate(zip(episodes, windows)):
            obs = ep.frames[:win.n_obs]
            feats[b, :win.n_obs] = obs
            mask[b, :win.n_obs] = 1.0
            visual[b] = obs.mean(axis=0)
            obs_labels[b, :win.n_obs] = ep.labels[:win.n_obs]
            if c.use_kg:
                scenes = ep.scenes[:win.n_obs]
                frame_vis = obs if c.kg_mode == "frame" else None
                active, depth = select_active(self.graph, self.concept, scenes, visual[b], c.gamma,
                                              c.prop_steps, c.n_max, frame_visuals=frame_vis)
            else:
                active, depth = [], []
            actives.append(active)
            node_idx[b, :len(active)] = active
            node_depth[b, :len(active)] = depth
            node_mask[b, :len(active)] = 1.0
            if with_targets:
                t_act[b], t_dur[b] = window_targets(ep, win, c.n_queries)
        batch = WindowBatch(feats, mask, [w.n_obs for w in windows], visual, node_idx, node_depth,
                            node_mask, actives)
        if with_targets:
            batch.obs_labels, batch.target_actions, batch.target_durations = obs_labels, t_act, t_dur
        return batch

    # ------------------------------------------------------------ forward
    def context(self, batch):
        return self.concept.context_tensor(batch.node_idx, batch.node_depth, batch.node_mask, batch.visual)

    def rectification(self, side, ctx):
        """LSTM over the context rows, dense head on the final state, plus identity."""
        c, p = self.cfg, self.params
        hs = ag.lstm(ctx, p[f"rect.{side}.lstm.w"], p[f"rect.{side}.lstm.b"])
        last = ag.getitem(hs, (slice(None), -1))
        delta = ag.affine(last, p[f"rect.{side}.out.w"], p[f"rect.{side}.out.b"])
        B, dk = ctx.shape[0], c.d_k
        eye = np.eye(dk, dtype=ctx.dtype)
        if c.per_head_rect:
            return ag.add(ag.reshape(delta, (B, c.n_heads, dk, dk)), eye)
        return ag.add(ag.reshape(delta, (B, dk, dk)), eye)

    def _split(self, x):
        B, n, _ = x.shape
        return ag.transpose(ag.reshape(x, (B, n, self.cfg.n_heads, self.cfg.d_k)), (0, 2, 1, 3))

    def _mha(self, name, xq, xkv, r, mask, record):
        p, c = self.params, self.cfg
        q = self._split(ag.affine(xq, p[f"{name}.q.w"], p[f"{name}.q.b"]))
        k = self._split(ag.affine(xkv, p[f"{name}.k.w"], p[f"{name}.k.b"]))
        v = self._split(ag.affine(xkv, p[f"{name}.v.w"], p[f"{name}.v.b"]))
        if r is not None and not c.per_head_rect:
            B, dk = r.shape[0], c.d_k
            r = ag.concat([ag.reshape(r, (B, 1, dk, dk))] * c.n_heads, axis=1)
        out, attn = kg_attention(q, k, v, r, mask)
        if record is not None:
            record[name] = attn.data
        B, _, a, _ = out.shape
        merged = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (B, a, c.d_model))
        return ag.affine(merged, p[f"{name}.o.w"], p[f"{name}.o.b"])

    def _ffn(self, name, x):
        p = self.params
        h = ag.gelu(ag.affine(x, p[f"{name}.in.w"], p[f"{name}.in.b"]))
        return ag.affine(h, p[f"{name}.out.w"], p[f"{name}.out.b"])

    def _ln(self, name, x):
        return ag.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def project_input(self, feats):
        p = self.params
        n = feats.shape[1]
        x = ag.affine(ag.as_tensor(np.asarray(feats, dtype=self.dtype)), p["proj.w"], p["proj.b"])
        return ag.add(x, ag.getitem(p["pos"], slice(0, n)))

    def encode(self, x, r_enc, key_mask, training=False, rng=None, record=None):
        c = self.cfg
        for i in range(c.enc_layers):
            a = self._mha(f"enc.{i}.attn", x, x, r_enc, key_mask, record)
            x = self._ln(f"enc.{i}.ln1", ag.add(x, ag.dropout(a, c.dropout, rng, training)))
            f = self._ffn(f"enc.{i}.ff", x)
            x = self._ln(f"enc.{i}.ln2", ag.add(x, ag.dropout(f, c.dropout, rng, training)))
        return x

    def decode(self, enc, r_dec, key_mask, training=False, rng=None, record=None):
        c = self.cfg
        q = ag.expand(self.params["dec.query"], (enc.shape[0],))
        for i in range(c.dec_layers):
            s = self._mha(f"dec.{i}.self", q, q, None, None, record)
            q = self._ln(f"dec.{i}.ln1", ag.add(q, ag.dropout(s, c.dropout, rng, training)))
            x = self._mha(f"dec.{i}.cross", q, enc, r_dec, key_mask, record)
            q = self._ln(f"dec.{i}.ln2", ag.add(q, ag.dropout(x, c.dropout, rng, training)))
            f = self._ffn(f"dec.{i}.ff", q)
            q = self._ln(f"dec.{i}.ln3", ag.add(q, ag.dropout(f, c.dropout, rng, training)))
        return q

    def heads(self, enc, q):
        p = self.params
        a_obs = ag.affine(enc, p["head.obs.w"], p["head.obs.b"])
        a_pred = ag.affine(q, p["head.act.w"], p["head.act.b"])
        dur = ag.affine(q, p["head.dur.w"], p["head.dur.b"])
        d_pred = ag.softmax(ag.reshape(dur, dur.shape[:-1]), axis=-1)
        return a_obs, a_pred, d_pred

    def forward(self, batch, training=False, rng=None, force_identity=False, record=False):
        """Run the full pipeline on a prepared :class:`WindowBatch`.

        ``force_identity`` keeps the KG inputs but replaces both rectification
        matrices by the identity.  With ``cfg.use_kg`` off, plain attention is used.
        """
        if training and rng is None:
            raise ValueError("training mode needs an rng for dropout")
        c = self.cfg
        r_enc = r_dec = None
        if c.use_kg and not force_identity:
            ctx = self.context(batch)
            r_enc = self.rectification("enc", ctx)
            r_dec = self.rectification("dec", ctx)
        elif force_identity:
            B, dk = len(batch), c.d_k
            shape = (B, c.n_heads, dk, dk) if c.per_head_rect else (B, dk, dk)
            eye = ag.Tensor(np.broadcast_to(np.eye(dk, dtype=self.dtype), shape).copy())
            r_enc = r_dec = eye
        B, n = batch.obs_mask.shape
        key_mask = np.where(batch.obs_mask > 0, 0.0, MASK_VALUE).astype(self.dtype)
        key_mask = np.ascontiguousarray(key_mask[:, None, None, :])
        attn = {} if record else None
        x = self.project_input(batch.feats)
        enc = self.encode(x, r_enc, key_mask, training, rng, attn)
        q = self.decode(enc, r_dec, key_mask, training, rng, attn)
        a_obs, a_pred, d_pred = self.heads(enc, q)
        return PredictionBundle(
            a_obs, a_pred, d_pred,
            None if r_enc is None else r_enc.data.copy(),
            None if r_dec is None else r_dec.data.copy(),
            attn or {})

    def predict(self, episodes, windows, horizons=None, force_identity=False, record=False):
        """Inference: per-window frame labels over ``horizons`` (default: window horizon)."""
        with ag.no_grad():
            batch = self.prepare(episodes, windows, with_targets=False)
            bundle = self.forward(batch, force_identity=force_identity, record=record)
        horizons = horizons or [w.horizon for w in windows]
        frames = [decode_durations(bundle.d_pred.data[b], bundle.a_pred.data[b], h)
                  for b, h in enumerate(horizons)]
        return frames, bundle, batch

