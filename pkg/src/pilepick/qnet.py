"""Q-function over the 729-way relative-motion action set.

Numpy-only network with hand-written gradients: a 4-layer strided conv
encoder pools the 128x128 heightmap to 32 features, each object becomes a
token [target flag, category one-hot, pose7, heightmap feature, action
encoding, flattened past-EE slots], and a 2-layer pre-LN transformer encoder
(4 heads, width 64, no positional encoding) is mean-pooled into a scalar Q.

Ablation variants share the architecture: "pose_raw" is the full model,
"pose_only" zeroes the heightmap feature, "raw_only" drops the object tokens
and keeps a single learned null token (also used whenever nothing is
detected).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

TRANS_STEP = 0.05          # m per translation increment
ROT_STEP_DEG = 22.5        # degrees per rotation increment
ACTION_COUNT = 729
IDENTITY_ACTION = 364      # all six digits at the middle value

D_MODEL = 64
N_HEADS = 4
D_HEAD = D_MODEL // N_HEADS
D_FF = 128
N_LAYERS = 2
CONV_CHANNELS = (1, 4, 8, 16, 32)
HM_FEAT = 32
LN_EPS = 1e-5
MASK_BIAS = -1e9

VARIANTS = ("pose_raw", "pose_only", "raw_only")


# -- action codec ------------------------------------------------------------


@dataclass(frozen=True)
class ActionDelta:
    """Relative 6-DoF motion; translations in m, rotations in degrees."""

    dx: float
    dy: float
    dz: float
    droll: float
    dpitch: float
    dyaw: float

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    def rotation_quat(self) -> np.ndarray:
        from . import geom

        return geom.quat_from_euler(math.radians(self.droll),
                                    math.radians(self.dpitch),
                                    math.radians(self.dyaw))

    def signed_units(self) -> np.ndarray:
        return np.array([self.dx / TRANS_STEP, self.dy / TRANS_STEP,
                         self.dz / TRANS_STEP, self.droll / ROT_STEP_DEG,
                         self.dpitch / ROT_STEP_DEG, self.dyaw / ROT_STEP_DEG])


def encode_action(index: int) -> ActionDelta:
    """Base-3 positional code, dx most significant, digit d -> (d-1)*step."""
    if not 0 <= index < ACTION_COUNT:
        raise ValueError(f"action index {index} outside [0, {ACTION_COUNT})")
    digits = []
    rem = int(index)
    for _ in range(6):
        digits.append(rem % 3)
        rem //= 3
    digits.reverse()  # dx first
    vals = [(d - 1) for d in digits]
    return ActionDelta(vals[0] * TRANS_STEP, vals[1] * TRANS_STEP, vals[2] * TRANS_STEP,
                       vals[3] * ROT_STEP_DEG, vals[4] * ROT_STEP_DEG, vals[5] * ROT_STEP_DEG)


def decode_action(delta: ActionDelta) -> int:
    units = delta.signed_units()
    digits = np.rint(units).astype(np.int64) + 1
    if np.any((digits < 0) | (digits > 2)) or not np.allclose(units, digits - 1, atol=1e-9):
        raise ValueError(f"delta {delta} is not on the 3-level grid")
    index = 0
    for d in digits:
        index = index * 3 + int(d)
    return index


_ACTION_UNITS = None


def action_units() -> np.ndarray:
    """(729, 6) signed unit encodings in index order."""
    global _ACTION_UNITS
    if _ACTION_UNITS is None:
        _ACTION_UNITS = np.array([encode_action(i).signed_units()
                                  for i in range(ACTION_COUNT)])
        _ACTION_UNITS.setflags(write=False)
    return _ACTION_UNITS


# -- parameters --------------------------------------------------------------


def param_spec(n_categories: int, n_steps: int) -> list[tuple[str, tuple]]:
    sem = 1 + n_categories + 7
    token = sem + HM_FEAT + 6 + n_steps * 8
    spec = []
    for i in range(4):
        cin, cout = CONV_CHANNELS[i], CONV_CHANNELS[i + 1]
        spec.append((f"conv{i + 1}_w", (cout, cin, 3, 3)))
        spec.append((f"conv{i + 1}_b", (cout,)))
    spec.append(("null_token", (sem,)))
    spec.append(("embed_w", (token, D_MODEL)))
    spec.append(("embed_b", (D_MODEL,)))
    for l in range(N_LAYERS):
        p = f"l{l}_"
        spec += [(p + "ln1_g", (D_MODEL,)), (p + "ln1_b", (D_MODEL,))]
        for nm in ("q", "k", "v", "o"):
            spec += [(p + nm + "_w", (D_MODEL, D_MODEL)), (p + nm + "_b", (D_MODEL,))]
        spec += [(p + "ln2_g", (D_MODEL,)), (p + "ln2_b", (D_MODEL,)),
                 (p + "ff1_w", (D_MODEL, D_FF)), (p + "ff1_b", (D_FF,)),
                 (p + "ff2_w", (D_FF, D_MODEL)), (p + "ff2_b", (D_MODEL,))]
    spec += [("final_ln_g", (D_MODEL,)), ("final_ln_b", (D_MODEL,)),
             ("head_w", (D_MODEL, 1)), ("head_b", (1,))]
    return spec


class QNetParams:
    """Named parameter arrays plus the architecture configuration."""

    def __init__(self, arrays: dict, variant: str, n_categories: int,
                 n_steps: int, dtype=np.float32):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.arrays = arrays
        self.variant = variant
        self.n_categories = n_categories
        self.n_steps = n_steps
        self.dtype = np.dtype(dtype)

    @property
    def sem_dim(self) -> int:
        return 1 + self.n_categories + 7

    @property
    def token_dim(self) -> int:
        return self.sem_dim + HM_FEAT + 6 + self.n_steps * 8

    def copy(self) -> "QNetParams":
        return QNetParams({k: v.copy() for k, v in self.arrays.items()},
                          self.variant, self.n_categories, self.n_steps, self.dtype)

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def init_params(seed: int = 0, variant: str = "pose_raw", n_categories: int = 8,
                n_steps: int = 5, dtype=np.float32) -> QNetParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_spec(n_categories, n_steps):
        if name.startswith("conv") and name.endswith("_w"):
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith("_g"):
            arr = np.ones(shape)
        elif name == "null_token":
            arr = rng.normal(0.0, 0.1, size=shape)
        elif name.startswith("head"):
            arr = np.zeros(shape)
        elif name.endswith("_w"):
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-lim, lim, size=shape)
        else:
            arr = np.zeros(shape)
        arrays[name] = np.asarray(arr, dtype=dtype)
    return QNetParams(arrays, variant, n_categories, n_steps, dtype)


# -- conv encoder ------------------------------------------------------------
# Stride-2 3x3 convs written as 9 shifted GEMMs; for these tiny channel
# counts that beats im2col on both memory traffic and cache size.


def _conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    btch, cin, h, wd = x.shape
    oh = (h + 2 - 3) // 2 + 1
    ow = (wd + 2 - 3) // 2 + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.empty((btch, oh, ow, w.shape[0]), dtype=x.dtype)
    y[:] = b
    for ki in range(3):
        for kj in range(3):
            sl = xp[:, :, ki:ki + 2 * oh:2, kj:kj + 2 * ow:2]
            y += np.tensordot(sl, w[:, :, ki, kj], axes=([1], [1]))
    return y.transpose(0, 3, 1, 2), xp


def _conv2d_backward(dy: np.ndarray, xp: np.ndarray, w: np.ndarray, need_dx: bool):
    btch, cout, oh, ow = dy.shape
    dyt = dy.transpose(0, 2, 3, 1)
    dw = np.empty_like(w)
    for ki in range(3):
        for kj in range(3):
            sl = xp[:, :, ki:ki + 2 * oh:2, kj:kj + 2 * ow:2]
            dw[:, :, ki, kj] = np.tensordot(dyt, sl, axes=([0, 1, 2], [0, 2, 3]))
    db = dyt.sum(axis=(0, 1, 2))
    if not need_dx:
        return dw, db, None
    dxp = np.zeros_like(xp)
    for ki in range(3):
        for kj in range(3):
            contrib = np.tensordot(dy, w[:, :, ki, kj], axes=([1], [0]))
            dxp[:, :, ki:ki + 2 * oh:2, kj:kj + 2 * ow:2] += contrib.transpose(0, 3, 1, 2)
    return dw, db, dxp[:, :, 1:-1, 1:-1]


def _encoder_forward(params: QNetParams, hm: np.ndarray):
    """hm (B,128,128) -> (feat (B,32), cache)."""
    a = params.arrays
    x = hm[:, None, :, :]
    cache = []
    for i in range(4):
        y, xp = _conv2d_forward(x, a[f"conv{i + 1}_w"], a[f"conv{i + 1}_b"])
        cache.append((xp, y))
        x = np.maximum(y, 0.0)
    feat = x.mean(axis=(2, 3))
    cache.append(x.shape)
    return feat, cache


def _encoder_backward(params: QNetParams, dfeat: np.ndarray, cache, grads: dict):
    a = params.arrays
    x4_shape = cache[-1]
    btch, c4, oh, ow = x4_shape
    dx = np.broadcast_to(dfeat[:, :, None, None] / (oh * ow), x4_shape).astype(dfeat.dtype)
    for i in range(3, -1, -1):
        xp, relu_in = cache[i]
        dy = dx * (relu_in > 0.0)
        dw, db, dx = _conv2d_backward(dy, xp, a[f"conv{i + 1}_w"], need_dx=i > 0)
        grads[f"conv{i + 1}_w"] += dw
        grads[f"conv{i + 1}_b"] += db


# -- transformer core --------------------------------------------------------


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * istd
    return g * xhat + b, (xhat, istd)

def _ln_backward(dy, cache, g):
    xhat, istd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = istd * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _split_heads(x):
    btch, t, _ = x.shape
    return x.reshape(btch, t, N_HEADS, D_HEAD).transpose(0, 2, 1, 3)


def _merge_heads(x):
    btch, _, t, _ = x.shape
    return x.transpose(0, 2, 1, 3).reshape(btch, t, D_MODEL)


def _core_forward(params: QNetParams, e: np.ndarray, mask: np.ndarray,
                  need_cache: bool = False):
    """e (B,T,64) embedded tokens, mask (B,T) 1=real -> (q (B,), cache)."""
    a = params.arrays
    maskf = mask.astype(e.dtype)
    key_bias = (1.0 - maskf)[:, None, None, :] * MASK_BIAS
    scale = 1.0 / math.sqrt(D_HEAD)
    x = e
    caches = [] if need_cache else None
    for l in range(N_LAYERS):
        p = f"l{l}_"
        h, ln1c = _ln_forward(x, a[p + "ln1_g"], a[p + "ln1_b"])
        q = h @ a[p + "q_w"] + a[p + "q_b"]
        k = h @ a[p + "k_w"] + a[p + "k_b"]
        v = h @ a[p + "v_w"] + a[p + "v_b"]
        qh, kh, vh = _split_heads(q), _split_heads(k), _split_heads(v)
        scores = qh @ kh.transpose(0, 1, 3, 2) * scale + key_bias
        scores -= scores.max(axis=-1, keepdims=True)
        expd = np.exp(scores)
        attn = expd / expd.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(attn @ vh)
        out = ctx @ a[p + "o_w"] + a[p + "o_b"]
        x1 = x + out
        h2, ln2c = _ln_forward(x1, a[p + "ln2_g"], a[p + "ln2_b"])
        f1 = h2 @ a[p + "ff1_w"] + a[p + "ff1_b"]
        r = np.maximum(f1, 0.0)
        f2 = r @ a[p + "ff2_w"] + a[p + "ff2_b"]
        x2 = x1 + f2
        if need_cache:
            caches.append((h, ln1c, qh, kh, vh, attn, ctx, h2, ln2c, f1, r))
        x = x2
    y, lnfc = _ln_forward(x, a["final_ln_g"], a["final_ln_b"])
    denom = maskf.sum(axis=1)
    pooled = (y * maskf[:, :, None]).sum(axis=1) / denom[:, None]
    qv = (pooled @ a["head_w"] + a["head_b"])[:, 0]
    if need_cache:
        return qv, (caches, lnfc, y, pooled, maskf, denom)
    return qv, None


def _core_backward(params: QNetParams, dq: np.ndarray, cache, grads: dict):
    a = params.arrays
    caches, lnfc, y, pooled, maskf, denom = cache
    scale = 1.0 / math.sqrt(D_HEAD)

    grads["head_w"] += pooled.T @ dq[:, None]
    grads["head_b"] += np.array([dq.sum()], dtype=dq.dtype)
    dpooled = dq[:, None] @ a["head_w"].T
    dy = dpooled[:, None, :] * (maskf / denom[:, None])[:, :, None]
    dx, dg, db = _ln_backward(dy, lnfc, a["final_ln_g"])
    grads["final_ln_g"] += dg
    grads["final_ln_b"] += db

    for l in range(N_LAYERS - 1, -1, -1):
        p = f"l{l}_"
        h, ln1c, qh, kh, vh, attn, ctx, h2, ln2c, f1, r = caches[l]
        # FF branch
        df2 = dx
        grads[p + "ff2_w"] += r.reshape(-1, D_FF).T @ df2.reshape(-1, D_MODEL)
        grads[p + "ff2_b"] += df2.reshape(-1, D_MODEL).sum(axis=0)
        dr = df2 @ a[p + "ff2_w"].T
        df1 = dr * (f1 > 0.0)
        grads[p + "ff1_w"] += h2.reshape(-1, D_MODEL).T @ df1.reshape(-1, D_FF)
        grads[p + "ff1_b"] += df1.reshape(-1, D_FF).sum(axis=0)
        dh2 = df1 @ a[p + "ff1_w"].T
        dx1_ff, dg, db = _ln_backward(dh2, ln2c, a[p + "ln2_g"])
        grads[p + "ln2_g"] += dg
        grads[p + "ln2_b"] += db
        dx1 = dx + dx1_ff
        # attention branch
        dout = dx1
        grads[p + "o_w"] += ctx.reshape(-1, D_MODEL).T @ dout.reshape(-1, D_MODEL)
        grads[p + "o_b"] += dout.reshape(-1, D_MODEL).sum(axis=0)
        dctx = _split_heads(dout @ a[p + "o_w"].T)
        dattn = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ dctx
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        ds = ds * scale
        dqh = ds @ kh
        dkh = ds.transpose(0, 1, 3, 2) @ qh
        dqm = _merge_heads(dqh)
        dkm = _merge_heads(dkh)
        dvm = _merge_heads(dvh)
        h2d = h.reshape(-1, D_MODEL)
        grads[p + "q_w"] += h2d.T @ dqm.reshape(-1, D_MODEL)
        grads[p + "q_b"] += dqm.reshape(-1, D_MODEL).sum(axis=0)
        grads[p + "k_w"] += h2d.T @ dkm.reshape(-1, D_MODEL)
        grads[p + "k_b"] += dkm.reshape(-1, D_MODEL).sum(axis=0)
        grads[p + "v_w"] += h2d.T @ dvm.reshape(-1, D_MODEL)
        grads[p + "v_b"] += dvm.reshape(-1, D_MODEL).sum(axis=0)
        dh = dqm @ a[p + "q_w"].T + dkm @ a[p + "k_w"].T + dvm @ a[p + "v_w"].T
        dx_ln, dg, db = _ln_backward(dh, ln1c, a[p + "ln1_g"])
        grads[p + "ln1_g"] += dg
        grads[p + "ln1_b"] += db
        dx = dx1 + dx_ln
    return dx


# -- observation/token assembly ----------------------------------------------


def _prep_batch(params: QNetParams, bundles):
    """Stack bundles: sem tokens, validity mask, null-row mask, past, hm."""
    dt = params.dtype
    sem_dim = params.sem_dim
    sems = []
    for bundle in bundles:
        po = bundle.pose_obs
        if params.variant == "raw_only" or po.count == 0:
            sems.append(None)  # null token
        else:
            sems.append(np.concatenate(
                [po.flags[:, None], po.categories, po.poses], axis=1).astype(dt))
    t_max = max(1 if s is None else len(s) for s in sems)
    b = len(bundles)
    sem = np.zeros((b, t_max, sem_dim), dtype=dt)
    mask = np.zeros((b, t_max), dtype=bool)
    null_rows = np.zeros((b, t_max), dtype=bool)
    for i, s in enumerate(sems):
        if s is None:
            sem[i, 0] = params.arrays["null_token"]
            mask[i, 0] = True
            null_rows[i, 0] = True
        else:
            sem[i, :len(s)] = s
            mask[i, :len(s)] = True
    past = np.stack([bundle.past_ee.reshape(-1) for bundle in bundles]).astype(dt)
    for bundle in bundles:
        if bundle.past_ee.shape != (params.n_steps, 8):
            raise ValueError(f"past_ee must be ({params.n_steps}, 8)")
    hm = np.stack([bundle.heightmap for bundle in bundles]).astype(dt)
    return sem, mask, null_rows, past, hm


def _tokens_from_parts(params, sem, conv_feat, act_units, past):
    """Assemble (B,T,token_dim) inputs from the per-part arrays."""
    b, t, _ = sem.shape
    dt = params.dtype
    tok = np.zeros((b, t, params.token_dim), dtype=dt)
    s = params.sem_dim
    tok[:, :, :s] = sem
    if params.variant != "pose_only":
        tok[:, :, s:s + HM_FEAT] = conv_feat[:, None, :]
    tok[:, :, s + HM_FEAT:s + HM_FEAT + 6] = act_units[:, None, :]
    tok[:, :, s + HM_FEAT + 6:] = past[:, None, :]
    return tok


def _conv_feature(params, hm, need_cache=False):
    if params.variant == "pose_only":
        feat = np.zeros((hm.shape[0], HM_FEAT), dtype=params.dtype)
        return feat, None
    return _encoder_forward(params, hm)


# -- public forward/backward -------------------------------------------------


def forward_batch(params: QNetParams, bundles, action_indices) -> np.ndarray:
    """Q for one (obs, action) per row."""
    sem, mask, _, past, hm = _prep_batch(params, bundles)
    feat, _ = _conv_feature(params, hm)
    units = action_units()[np.asarray(action_indices, dtype=np.int64)].astype(params.dtype)
    tok = _tokens_from_parts(params, sem, feat, units, past)
    e = tok @ params.arrays["embed_w"] + params.arrays["embed_b"]
    qv, _ = _core_forward(params, e, mask)
    return qv


def forward(params: QNetParams, bundle, action) -> float:
    """Q for a single observation and a single action (index or delta)."""
    if isinstance(action, ActionDelta):
        action = decode_action(action)
    return float(forward_batch(params, [bundle], [action])[0])


def forward_all_batch(params: QNetParams, bundles) -> np.ndarray:
    """(B, 729) Q values; conv and base embedding computed once per bundle."""
    a = params.arrays
    sem, mask, _, past, hm = _prep_batch(params, bundles)
    feat, _ = _conv_feature(params, hm)
    b, t, _ = sem.shape
    zero_act = np.zeros((b, 6), dtype=params.dtype)
    tok_base = _tokens_from_parts(params, sem, feat, zero_act, past)
    e_base = tok_base @ a["embed_w"] + a["embed_b"]
    s = params.sem_dim
    act_embed = action_units().astype(params.dtype) @ a["embed_w"][s + HM_FEAT:s + HM_FEAT + 6]
    e = (e_base[:, None, :, :] + act_embed[None, :, None, :]).reshape(b * ACTION_COUNT, t, D_MODEL)
    mask_full = np.repeat(mask, ACTION_COUNT, axis=0)
    qv, _ = _core_forward(params, e, mask_full)
    return qv.reshape(b, ACTION_COUNT)


def forward_all(params: QNetParams, bundle) -> np.ndarray:
    return forward_all_batch(params, [bundle])[0]


def greedy_action(params: QNetParams, bundle) -> int:
    """Argmax over all 729 actions; ties go to the lowest index."""
    return int(np.argmax(forward_all(params, bundle)))


def backward_batch(params: QNetParams, bundles, action_indices, targets):
    """Mean L1 loss against targets and its gradients for every parameter."""
    if len(bundles) == 0:
        raise ValueError("empty minibatch")
    a = params.arrays
    sem, mask, null_rows, past, hm = _prep_batch(params, bundles)
    feat, conv_cache = _conv_feature(params, hm, need_cache=True)
    units = action_units()[np.asarray(action_indices, dtype=np.int64)].astype(params.dtype)
    tok = _tokens_from_parts(params, sem, feat, units, past)
    e = tok @ a["embed_w"] + a["embed_b"]
    qv, cache = _core_forward(params, e, mask, need_cache=True)

    targets = np.asarray(targets, dtype=params.dtype)
    residual = qv - targets
    loss = float(np.abs(residual).mean())
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}; |q| max {np.abs(qv).max()}")
    dq = (np.sign(residual) / len(bundles)).astype(params.dtype)

    grads = params.zero_grads()
    de = _core_backward(params, dq, cache, grads)
    b, t, _ = tok.shape
    grads["embed_w"] += tok.reshape(-1, params.token_dim).T @ de.reshape(-1, D_MODEL)
    grads["embed_b"] += de.reshape(-1, D_MODEL).sum(axis=0)
    dtok = de @ a["embed_w"].T
    s = params.sem_dim
    if null_rows.any():
        grads["null_token"] += dtok[:, :, :s][null_rows].sum(axis=0)
    if params.variant != "pose_only":
        dfeat = dtok[:, :, s:s + HM_FEAT].sum(axis=1)
        _encoder_backward(params, dfeat, conv_cache, grads)
    return loss, grads


def q_loss(params: QNetParams, bundles, action_indices, targets) -> float:
    qv = forward_batch(params, bundles, action_indices)
    return float(np.abs(qv - np.asarray(targets, dtype=params.dtype)).mean())


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "pilepick/qnet"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: QNetParams, path, extra: dict | None = None) -> None:
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": params.variant,
        "n_categories": params.n_categories,
        "n_steps": params.n_steps,
        "dtype": params.dtype.name,
        "names": [name for name, _ in param_spec(params.n_categories, params.n_steps)],
        "extra": extra or {},
    }
    np.savez(path, __manifest__=np.frombuffer(
        json.dumps(manifest).encode(), dtype=np.uint8), **params.arrays)


def load_checkpoint(path) -> tuple[QNetParams, dict]:
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a network checkpoint")
        arrays = {name: data[name].copy() for name in manifest["names"]}
    params = QNetParams(arrays, manifest["variant"], manifest["n_categories"],
                        manifest["n_steps"], np.dtype(manifest["dtype"]))
    return params, manifest["extra"]
