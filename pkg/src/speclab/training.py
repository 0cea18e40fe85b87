"""Training for the toy models: batched forward, hand-rolled backprop, Adam.

The batched training forward mirrors the decode-path math exactly (same
norms, same recurrence, same attention); an equivalence test pins the two
together and the finite-difference gradient check pins the backward to the
forward. Recurrent states are recomputed during the backward scan instead of
being stored, which keeps tape memory at one transient (B, T, d, d_state)
buffer per layer.

Everything is float64 and deterministic from the seed: weight init and batch
sampling both run on counter-based Philox streams, and the loop itself is
single-threaded numpy.
"""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _tune_malloc():
    """Keep large numpy temporaries on the heap instead of fresh mmaps.

    Training allocates many multi-MB temporaries per step; glibc's default
    mmap threshold hands each back to the kernel on free, so every step pays
    page-fault costs again. Raising the thresholds is a no-op on non-glibc
    platforms.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        m_trim_threshold, m_mmap_threshold = -1, -3
        libc.mallopt(m_mmap_threshold, 256 * 1024 * 1024)
        libc.mallopt(m_trim_threshold, 256 * 1024 * 1024)
    except (OSError, AttributeError):
        pass


_tune_malloc()

from .model import (
    AttnParams,
    ComponentMask,
    FfnParams,
    ModelConfig,
    NORM_EPS,
    SsmParams,
    Weights,
    init_weights,
)
from .numerics import RngState, log_softmax, sigmoid


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    corpus_path: str
    steps: int
    batch_size: int = 8
    seq_len: int = 64
    learning_rate: float = 3e-3
    seed: int = 0
    momentum_decay: float = 0.9
    second_moment_decay: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 50
    log_path: str | None = None
    # float32 halves the step cost on CPU; master weights, the optimizer and
    # everything downstream of training stay float64
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.seq_len < 2:
            raise ValueError("batch_size >= 1 and seq_len >= 2 required")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")


def load_corpus(path) -> np.ndarray:
    """Raw bytes of a corpus file as int64 token ids in [0, 256)."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"corpus not found: {p}")
    data = np.frombuffer(p.read_bytes(), dtype=np.uint8).astype(np.int64)
    if data.size == 0:
        raise ValueError(f"corpus is empty: {p}")
    return data


def sample_batch(corpus: np.ndarray, batch_size: int, seq_len: int,
                 rng: RngState):
    """(inputs, targets) windows drawn uniformly from the corpus."""
    if corpus.size < seq_len + 2:
        raise ValueError("corpus shorter than one training window")
    starts = rng.integers(0, corpus.size - seq_len - 1, size=batch_size)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    window = corpus[idx]
    return window[:, :-1], window[:, 1:]


# ---------------------------------------------------------------------------
# Batched forward with tape
# ---------------------------------------------------------------------------


def _rms_fwd(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return x * (g * r), (x, g, r)


def _rms_bwd(dy, cache):
    x, g, r = cache
    d = x.shape[-1]
    w = dy * g
    dx = r * w - x * (r ** 3 / d) * np.sum(w * x, axis=-1, keepdims=True)
    dg = np.sum(dy * (x * r), axis=tuple(range(x.ndim - 1)))
    return dx, dg


def _silu_bwd(dy, pre, sig):
    return dy * (sig * (1.0 + pre * (1.0 - sig)))


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _attn_fwd(p, h, n_heads, causal_bias):
    B, T, d = h.shape
    dh = d // n_heads
    xs, ncache = _rms_fwd(h, p.norm_g)
    x2 = _flat(xs)
    q = (x2 @ p.wq).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    k = (x2 @ p.wk).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    v = (x2 @ p.wv).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + causal_bias
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    ctx = (w @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    out = _flat(ctx) @ p.wo
    cache = (xs, ncache, q, k, v, w, ctx)
    return out.reshape(B, T, d), cache


def _attn_bwd(p, dout, cache, n_heads, grads, prefix):
    xs, ncache, q, k, v, w, ctx = cache
    B, T, d = xs.shape
    dh = d // n_heads
    do2 = _flat(dout)
    grads[prefix + "wo"] += _flat(ctx).T @ do2
    dctx = (do2 @ p.wo.T).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    dw = dctx @ v.transpose(0, 1, 3, 2)
    dv = w.transpose(0, 1, 3, 2) @ dctx
    dscores = w * (dw - np.sum(dw * w, axis=-1, keepdims=True))
    dscores /= np.sqrt(dh)
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dq2 = _flat(dq.transpose(0, 2, 1, 3).reshape(B, T, d))
    dk2 = _flat(dk.transpose(0, 2, 1, 3).reshape(B, T, d))
    dv2 = _flat(dv.transpose(0, 2, 1, 3).reshape(B, T, d))
    x2 = _flat(xs)
    grads[prefix + "wq"] += x2.T @ dq2
    grads[prefix + "wk"] += x2.T @ dk2
    grads[prefix + "wv"] += x2.T @ dv2
    dxs = (dq2 @ p.wq.T + dk2 @ p.wk.T + dv2 @ p.wv.T).reshape(B, T, d)
    dh_, dg = _rms_bwd(dxs, ncache)
    grads[prefix + "norm_g"] += dg
    return dh_


try:  # optional compiled scan kernels; numpy fallback below is equivalent
    import os as _os

    # the portable threading layer is plenty for a 2-4 core target and
    # avoids a version warning from the optional TBB backend
    _os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    import numba

    # parallel over the batch: each stream touches only its own slices, and
    # the decay gradient is accumulated per stream and reduced in fixed
    # order afterwards, so results stay bitwise deterministic

    @numba.njit(cache=True, parallel=True)
    def _scan_fwd_kernel(decay, u, bm, cm, skip_gain, states, y):
        B, T, d = u.shape
        s = bm.shape[2]
        for b in numba.prange(B):
            S = np.zeros_like(states[b, 0])
            for t in range(T):
                for i in range(d):
                    ai = decay[i]
                    ui = u[b, t, i]
                    yi = 0.0
                    for j in range(s):
                        v = ai * S[i, j] + ui * bm[b, t, j]
                        S[i, j] = v
                        states[b, t, i, j] = v
                        yi += v * cm[b, t, j]
                    y[b, t, i] = yi + skip_gain[i] * ui

    @numba.njit(cache=True, parallel=True)
    def _scan_bwd_kernel(decay, u, bm, cm, states, dy, du, dbm, dcm, da_b):
        B, T, d = u.shape
        s = bm.shape[2]
        for b in numba.prange(B):
            dS = np.zeros_like(states[b, 0])
            for t in range(T - 1, -1, -1):
                for i in range(d):
                    ai = decay[i]
                    dyi = dy[b, t, i]
                    ui = u[b, t, i]
                    dui = 0.0
                    dai = 0.0
                    for j in range(s):
                        v = ai * dS[i, j] + dyi * cm[b, t, j]
                        dS[i, j] = v
                        dui += v * bm[b, t, j]
                        if t > 0:
                            dai += v * states[b, t - 1, i, j]
                        dbm[b, t, j] += v * ui
                        dcm[b, t, j] += dyi * states[b, t, i, j]
                    du[b, t, i] += dui
                    da_b[b, i] += dai

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


_SCAN_CHUNK = 16


def _linear_scan(decay: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """All states of ``S_t = decay * S_{t-1} + inputs_t`` (zero initial state).

    Two-level chunked evaluation: chunks are scanned in parallel from zero,
    then chunk-boundary carries are combined, turning T python iterations
    into roughly chunk + T/chunk. ``inputs`` is (B, T, d, s); decay is (d,)
    in (0, 1) so the power terms cannot overflow.
    """
    B, T, d, s = inputs.shape
    dt = inputs.dtype
    C = min(_SCAN_CHUNK, T)
    n_chunks = -(-T // C)
    Tp = n_chunks * C
    if Tp != T:
        pad = np.zeros((B, Tp - T, d, s), dtype=dt)
        inputs = np.concatenate([inputs, pad], axis=1)
    P = inputs.reshape(B, n_chunks, C, d, s)
    states = np.empty_like(P)
    acc = np.zeros((B, n_chunks, d, s), dtype=dt)
    a = decay[None, None, :, None]
    for t in range(C):
        acc = a * acc + P[:, :, t]
        states[:, :, t] = acc
    if n_chunks > 1:
        a_chunk = decay ** C
        carry = np.zeros((B, n_chunks, d, s), dtype=dt)
        run = np.zeros((B, d, s), dtype=dt)
        for c in range(1, n_chunks):
            run = a_chunk[None, :, None] * run + states[:, c - 1, C - 1]
            carry[:, c] = run
        powers = decay[None, :] ** np.arange(1, C + 1)[:, None]   # (C, d)
        states += powers[None, None, :, :, None] * carry[:, :, None]
    return states.reshape(B, Tp, d, s)[:, :T]


def _ssm_fwd(p, h):
    B, T, d = h.shape
    xs, ncache = _rms_fwd(h, p.norm_g)
    x2 = _flat(xs)
    upre = (x2 @ p.w_in).reshape(B, T, d)
    usig = sigmoid(upre)
    u = upre * usig
    bm = np.ascontiguousarray((x2 @ p.w_b).reshape(B, T, -1))
    cm = np.ascontiguousarray((x2 @ p.w_c).reshape(B, T, -1))
    decay = sigmoid(p.decay_raw)
    s = bm.shape[-1]
    if _HAVE_NUMBA:
        states = np.empty((B, T, d, s), dtype=h.dtype)
        y_skip = np.empty_like(u)
        _scan_fwd_kernel(decay, u, bm, cm, p.skip_gain, states, y_skip)
    else:
        states = _linear_scan(decay, u[..., None] * bm[:, :, None, :])
        y_skip = (states @ cm[..., None])[..., 0] + p.skip_gain * u
    out = _flat(y_skip) @ p.w_out
    cache = (xs, ncache, upre, usig, u, bm, cm, decay, states, y_skip)
    return out.reshape(B, T, d), cache


def _ssm_bwd(p, dout, cache, grads, prefix):
    xs, ncache, upre, usig, u, bm, cm, decay, states, y_skip = cache
    B, T, d = xs.shape
    do2 = _flat(dout)
    grads[prefix + "w_out"] += _flat(y_skip).T @ do2
    dy = np.ascontiguousarray((do2 @ p.w_out.T).reshape(B, T, d))
    grads[prefix + "skip_gain"] += np.sum(dy * u, axis=(0, 1))
    du = dy * p.skip_gain
    if _HAVE_NUMBA:
        dbm = np.zeros_like(bm)
        dcm = np.zeros_like(cm)
        da_b = np.zeros((B, d), dtype=dy.dtype)
        _scan_bwd_kernel(decay, u, bm, cm, states, dy, du, dbm, dcm, da_b)
        da = da_b.sum(axis=0)
    else:
        dcm = (dy[:, :, None, :] @ states)[:, :, 0, :]
        # reverse-time recurrence dS_t = decay * dS_{t+1} + dy_t (x) C_t is a
        # forward scan on the time-flipped input
        q = dy[..., None] * cm[:, :, None, :]
        d_states = _linear_scan(decay, q[:, ::-1])[:, ::-1]
        da = (d_states[:, 1:] * states[:, :-1]).sum(axis=(0, 1, 3))
        du += (d_states @ bm[..., None])[..., 0]
        dbm = (u[:, :, None, :] @ d_states)[:, :, 0, :]
    grads[prefix + "decay_raw"] += da * decay * (1.0 - decay)
    dupre = _silu_bwd(du, upre, usig)
    x2 = _flat(xs)
    du2, dbm2, dcm2 = _flat(dupre), _flat(dbm), _flat(dcm)
    grads[prefix + "w_in"] += x2.T @ du2
    grads[prefix + "w_b"] += x2.T @ dbm2
    grads[prefix + "w_c"] += x2.T @ dcm2
    dxs = (du2 @ p.w_in.T + dbm2 @ p.w_b.T + dcm2 @ p.w_c.T).reshape(B, T, d)
    dh_, dg = _rms_bwd(dxs, ncache)
    grads[prefix + "norm_g"] += dg
    return dh_


def _ffn_fwd(p, h):
    B, T, d = h.shape
    xs, ncache = _rms_fwd(h, p.norm_g)
    pre = _flat(xs) @ p.w1
    sig = sigmoid(pre)
    act = pre * sig
    out = act @ p.w2
    return out.reshape(B, T, d), (xs, ncache, pre, sig, act)


def _ffn_bwd(p, dout, cache, grads, prefix):
    xs, ncache, pre, sig, act = cache
    B, T, d = xs.shape
    do2 = _flat(dout)
    grads[prefix + "w2"] += act.T @ do2
    dact = do2 @ p.w2.T
    dpre = _silu_bwd(dact, pre, sig)
    grads[prefix + "w1"] += _flat(xs).T @ dpre
    dxs = (dpre @ p.w1.T).reshape(B, T, d)
    dh_, dg = _rms_bwd(dxs, ncache)
    grads[prefix + "norm_g"] += dg
    return dh_


def _layer_plan(cfg: ModelConfig, w: Weights, mask: ComponentMask):
    plan = []
    for i in range(cfg.n_layers):
        attn = ssm = None
        if not mask.layer_skipped[i]:
            if cfg.has_attn(i) and mask.attn_enabled[i]:
                attn = tuple(w[f"layers.{i}.attn.{n}"] for n in
                             ("norm_g", "wq", "wk", "wv", "wo"))
            if cfg.has_alt(i) and mask.alt_enabled[i]:
                ssm = tuple(w[f"layers.{i}.ssm.{n}"] for n in
                            ("norm_g", "w_in", "w_b", "w_c", "decay_raw",
                             "skip_gain", "w_out"))
        plan.append((attn, ssm))
    return plan


def forward_train(cfg: ModelConfig, w, mask: ComponentMask | None,
                  x: np.ndarray):
    """Batched forward over token windows ``x`` (B, T); returns (logits, tape).

    ``w`` is a Weights object or any name-to-array mapping with ``items()``
    (training passes float32 casts of the float64 master weights).
    """
    if mask is None:
        mask = ComponentMask.full(cfg.n_layers)
    if mask.n_layers != cfg.n_layers:
        raise ValueError("mask length mismatch")
    x = np.asarray(x, dtype=np.int64)
    B, T = x.shape
    if T > cfg.context_limit:
        raise ValueError("sequence longer than context limit")
    if x.min() < 0 or x.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    h = w["embed"][x] + w["pos_embed"][:T][None, :, :]
    causal = np.triu(np.full((T, T), -np.inf, dtype=h.dtype), 1)[None, None]
    plan = _layer_plan(cfg, w, mask)
    layer_tapes = []
    for i in range(cfg.n_layers):
        attn_w, ssm_w = plan[i]
        entry = {"h_in": h}
        if mask.layer_skipped[i]:
            layer_tapes.append(entry)
            continue
        h_in = h
        if ssm_w is not None:
            p = SsmParams(*ssm_w)
            out, cache = _ssm_fwd(p, h_in)
            entry["ssm"] = (p, cache)
            h = h + out
        if attn_w is not None:
            p = AttnParams(*attn_w)
            out, cache = _attn_fwd(p, h_in, cfg.n_heads, causal)
            entry["attn"] = (p, cache)
            h = h + out
        fp = FfnParams(*(w[f"layers.{i}.ffn.{n}"] for n in ("norm_g", "w1", "w2")))
        out, cache = _ffn_fwd(fp, h)
        entry["ffn"] = (fp, cache)
        h = h + out
        layer_tapes.append(entry)
    hn, ncache = _rms_fwd(h, w["final_norm_g"])
    logits = _flat(hn) @ w["head_w"]
    tape = {"x": x, "mask": mask, "layers": layer_tapes, "hn": hn,
            "final_norm": ncache, "shape": (B, T)}
    return logits.reshape(B, T, cfg.vocab_size), tape


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean next-token negative log-likelihood and the logits gradient."""
    B, T, V = logits.shape
    logp = log_softmax(logits.reshape(-1, V))
    flat_t = targets.reshape(-1)
    n = flat_t.size
    loss = -logp[np.arange(n), flat_t].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), flat_t] -= 1.0
    dlogits /= n
    return loss, dlogits.reshape(B, T, V)


def backward_train(cfg: ModelConfig, w, tape: dict,
                   dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every weight block (zeros where masked off)."""
    grads = {name: np.zeros_like(arr) for name, arr in w.items()}
    B, T = tape["shape"]
    d2 = _flat(dlogits)
    grads["head_w"] += _flat(tape["hn"]).T @ d2
    dh, dg = _rms_bwd((d2 @ w["head_w"].T).reshape(B, T, -1), tape["final_norm"])
    grads["final_norm_g"] += dg
    mask = tape["mask"]
    for i in range(cfg.n_layers - 1, -1, -1):
        entry = tape["layers"][i]
        if mask.layer_skipped[i]:
            continue
        p, cache = entry["ffn"]
        dh = dh + _ffn_bwd(p, dh, cache, grads, f"layers.{i}.ffn.")
        d_hin = np.zeros_like(dh)
        if "attn" in entry:
            p, cache = entry["attn"]
            d_hin += _attn_bwd(p, dh, cache, cfg.n_heads, grads,
                               f"layers.{i}.attn.")
        if "ssm" in entry:
            p, cache = entry["ssm"]
            d_hin += _ssm_bwd(p, dh, cache, grads, f"layers.{i}.ssm.")
        dh = dh + d_hin
    x = tape["x"]
    np.add.at(grads["embed"], x.reshape(-1), _flat(dh))
    grads["pos_embed"][:T] += dh.sum(axis=0)
    return grads


def evaluate_loss(cfg: ModelConfig, w: Weights, mask: ComponentMask | None,
                  x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = forward_train(cfg, w, mask, x)
    loss, _ = cross_entropy(logits, y)
    return float(loss)


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive moment estimation with bias correction, constant LR after a
    linear warmup."""

    def __init__(self, w: Weights, tcfg: TrainConfig):
        self.m = {n: np.zeros_like(a) for n, a in w.items()}
        self.v = {n: np.zeros_like(a) for n, a in w.items()}
        self.t = 0
        self.tcfg = tcfg

    def step(self, w: Weights, grads: dict[str, np.ndarray]):
        c = self.tcfg
        self.t += 1
        lr = c.learning_rate
        if c.warmup_steps > 0:
            lr *= min(1.0, self.t / c.warmup_steps)
        b1, b2 = c.momentum_decay, c.second_moment_decay
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            w.blocks[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def train(cfg: ModelConfig, tcfg: TrainConfig,
          mask: ComponentMask | None = None):
    """Train a model from scratch; returns (Weights, loss history).

    Fully reproducible from ``tcfg.seed``: the seed drives both the weight
    init and the batch stream. With ``steps == 0`` the seeded initialization
    is returned untouched. Loss history is one (step, loss) pair per step,
    also written as CSV when ``log_path`` is set.
    """
    corpus = load_corpus(tcfg.corpus_path)
    if tcfg.seq_len > cfg.context_limit:
        raise ValueError("seq_len exceeds the model's context limit")
    w = init_weights(cfg, tcfg.seed)
    data_rng = RngState(tcfg.seed).spawn(1)[0]
    opt = Adam(w, tcfg)
    dt = np.dtype(tcfg.compute_dtype)
    history: list[tuple[int, float]] = []
    for step in range(tcfg.steps):
        x, y = sample_batch(corpus, tcfg.batch_size, tcfg.seq_len, data_rng)
        wc = w if dt == np.float64 else {n: a.astype(dt) for n, a in w.items()}
        logits, tape = forward_train(cfg, wc, mask, x)
        loss, dlogits = cross_entropy(logits, y)
        if not np.isfinite(loss):
            raise TrainingDiverged(step)
        grads = backward_train(cfg, wc, tape, dlogits)
        opt.step(w, grads)
        history.append((step, float(loss)))
    w.validate_finite()
    if tcfg.log_path is not None:
        write_training_log(tcfg.log_path, history)
    return w, history


def write_training_log(path, history):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in history:
            writer.writerow([step, f"{loss:.10g}"])


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def grad_check(cfg: ModelConfig, w: Weights, x: np.ndarray, y: np.ndarray,
               mask: ComponentMask | None = None, n_samples: int = 120,
               step: float = 1e-5, seed: int = 0) -> float:
    """Max relative deviation between analytic and central-FD gradients.

    Samples parameter entries across every block (proportionally more from
    larger blocks, at least one from each). The relative deviation is floored
    at 1e-6 absolute scale so that float rounding on near-zero gradients does
    not register; intended for tiny configs where FD is trustworthy.
    """
    logits, tape = forward_train(cfg, w, mask, x)
    _, dlogits = cross_entropy(logits, y)
    grads = backward_train(cfg, w, tape, dlogits)
    rng = RngState(seed)
    names = list(w.names)
    sizes = np.array([w[n].size for n in names], dtype=np.float64)
    per_block = np.maximum(1, (n_samples * sizes / sizes.sum()).astype(int))
    worst = 0.0
    for name, take in zip(names, per_block):
        arr = w.blocks[name]
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        idxs = {int(rng.integers(0, flat.size)) for _ in range(int(take))}
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + step
            up = evaluate_loss(cfg, w, mask, x, y)
            flat[j] = orig - step
            down = evaluate_loss(cfg, w, mask, x, y)
            flat[j] = orig
            fd = (up - down) / (2.0 * step)
            an = gflat[j]
            dev = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, dev)
    return worst
