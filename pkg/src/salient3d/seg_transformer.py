"""Point cloud segmentation Transformer with linear attention, in numpy.

Two pre-norm encoder blocks (linear attention + GELU MLP, both residual)
transform a [CLS] token and one token per point. The transformed [CLS]
token goes through an affine head to form a prototype, and each point's
logit is its scaled dot product with that prototype.

Gradients are derived by hand; everything runs in float64. Parameters are
kept on the float32 grid so the "ARTW" weight file round-trips bitwise.

ARTW layout (little-endian)::

    b"ARTW" | version:u32 | d_feat:u32 pe_bands:u32 d_model:u32 heads:u32
    layers:u32 n_tensors:u32 | f32 tensors in PARAM order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import special_ortho_group

from .errors import FormatError, InvalidArgument, NumericalFailure, ParseError
from .geometry import IGNORE, NEGATIVE, POSITIVE

ARTW_MAGIC = b"ARTW"
ARTW_VERSION = 1
N_LAYERS = 2
ATTN_EPS = 1e-6
LN_EPS = 1e-5
DEFAULT_BANDS = 6
DEFAULT_D_MODEL = 64
DEFAULT_HEADS = 4
THRESHOLD = 0.5

_BLOCK_PARAMS = ("ln1_g", "ln1_b", "W_q", "W_k", "W_v", "W_o", "b_o",
                 "ln2_g", "ln2_b", "W_1", "b_1", "W_2", "b_2")


def f32_round(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class TransformerConfig:
    d_feat: int
    pe_bands: int = DEFAULT_BANDS
    d_model: int = DEFAULT_D_MODEL
    heads: int = DEFAULT_HEADS
    layers: int = N_LAYERS

    def __post_init__(self):
        if self.layers != N_LAYERS:
            raise InvalidArgument(f"the encoder has exactly {N_LAYERS} layers")
        if self.d_model % self.heads:
            raise InvalidArgument("d_model must be divisible by heads")
        if min(self.d_feat, self.pe_bands, self.d_model, self.heads) < 1:
            raise InvalidArgument("all dimensions must be >= 1")

    @property
    def d_in(self):
        return self.d_feat + 6 * self.pe_bands

    def shapes(self):
        D, H = self.d_model, 2 * self.d_model
        out = [("W_in", (self.d_in, D)), ("b_in", (D,)), ("cls_embed", (D,))]
        block = {"ln1_g": (D,), "ln1_b": (D,), "W_q": (D, D), "W_k": (D, D), "W_v": (D, D),
                 "W_o": (D, D), "b_o": (D,), "ln2_g": (D,), "ln2_b": (D,),
                 "W_1": (D, H), "b_1": (H,), "W_2": (H, D), "b_2": (D,)}
        for layer in range(self.layers):
            out += [(f"l{layer}.{name}", block[name]) for name in _BLOCK_PARAMS]
        out += [("W_p", (D, D)), ("b_p", (D,))]
        return out


class SegTransformer:
    """Weights plus config. ``params`` maps names to float64 arrays."""

    def __init__(self, config: TransformerConfig, params):
        self.config = config
        expected = dict(config.shapes())
        if set(params) != set(expected):
            raise InvalidArgument("parameter names do not match the config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise InvalidArgument(f"{name}: expected shape {shape}, got {params[name].shape}")
            if not np.all(np.isfinite(params[name])):
                raise NumericalFailure(f"{name} has non-finite entries")
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name, _ in config.shapes()}

    @classmethod
    def init(cls, config: TransformerConfig, rng=None):
        rng = np.random.default_rng(rng)
        params = {}
        for name, shape in config.shapes():
            base = name.split(".")[-1]
            if base in ("W_p", "b_p"):
                # start from logit 0 everywhere so early updates are small
                params[name] = np.zeros(shape)
            elif base.endswith("_g"):
                params[name] = np.ones(shape)
            elif base.startswith("W_"):
                params[name] = rng.normal(scale=1.0 / np.sqrt(shape[0]), size=shape)
            elif base == "cls_embed":
                params[name] = rng.normal(scale=0.02, size=shape)
            else:
                params[name] = np.zeros(shape)
        return cls(config, {k: f32_round(v) for k, v in params.items()})

    def copy(self):
        return SegTransformer(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self):
        return sum(v.size for v in self.params.values())


# --------------------------------------------------------------------------
# building blocks


def normalize_positions(positions):
    """Map into [-1, 1]^3 using the AABB centre and its largest half-extent."""
    p = np.asarray(positions, dtype=float)
    lo, hi = p.min(axis=0), p.max(axis=0)
    half = 0.5 * np.max(hi - lo)
    return (p - 0.5 * (lo + hi)) / (half if half > 0 else 1.0)


def positional_encode(positions, bands=DEFAULT_BANDS):
    """Fourier features; column order is [sin | cos] per band, per coordinate.

    For coordinate c and band k the sin term sits at column 6k + c and the
    cos term at 6k + 3 + c.
    """
    p = np.atleast_2d(np.asarray(positions, dtype=float))
    if np.any(np.abs(p) > 1.001):
        raise InvalidArgument("positions must be normalised to [-1, 1]")
    cols = []
    for k in range(bands):
        arg = (2.0 ** k) * np.pi * p
        cols += [np.sin(arg), np.cos(arg)]
    return np.concatenate(cols, axis=1)


def elu_feature_map(x):
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def _elu_feature_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _split_heads(X, m):
    n, D = X.shape
    return X.reshape(n, m, D // m)


def linear_attention(Q, K, V, heads, eps=ATTN_EPS, return_cache=False):
    """Kernelised attention with phi = elu + 1, computed in O(n) per head."""
    Q, K, V = (np.asarray(a, dtype=float) for a in (Q, K, V))
    if Q.shape[1] % heads:
        raise InvalidArgument("model dimension must be divisible by heads")
    fq = elu_feature_map(_split_heads(Q, heads))
    fk = elu_feature_map(_split_heads(K, heads))
    v = _split_heads(V, heads)
    kv = np.einsum("nhd,nhe->hde", fk, v)
    ksum = fk.sum(axis=0)
    num = np.einsum("nhd,hde->nhe", fq, kv)
    den = np.einsum("nhd,hd->nh", fq, ksum) + eps
    out = num / den[..., None]
    flat = out.reshape(Q.shape[0], -1)
    if return_cache:
        return flat, (Q, K, fq, fk, v, kv, ksum, den, out, heads)
    return flat


def _linear_attention_backward(dout, cache):
    Q, K, fq, fk, v, kv, ksum, den, out, heads = cache
    n = Q.shape[0]
    g = dout.reshape(out.shape)
    dnum = g / den[..., None]
    dden = -np.sum(g * out, axis=-1) / den
    dfq = np.einsum("nhe,hde->nhd", dnum, kv) + dden[..., None] * ksum[None]
    dkv = np.einsum("nhd,nhe->hde", fq, dnum)
    dksum = np.einsum("nhd,nh->hd", fq, dden)
    dfk = np.einsum("nhe,hde->nhd", v, dkv) + dksum[None]
    dv = np.einsum("nhd,hde->nhe", fk, dkv)
    dQ = (dfq * _elu_feature_grad(_split_heads(Q, heads))).reshape(n, -1)
    dK = (dfk * _elu_feature_grad(_split_heads(K, heads))).reshape(n, -1)
    return dQ, dK, dv.reshape(n, -1)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, np.sum(dy * xhat, axis=0), np.sum(dy, axis=0)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


# --------------------------------------------------------------------------
# forward / backward


def _block_forward(p, prefix, x, heads):
    P = lambda name: p[f"{prefix}.{name}"]  # noqa: E731
    a, ln1 = _layer_norm(x, P("ln1_g"), P("ln1_b"))
    Q, K, V = a @ P("W_q"), a @ P("W_k"), a @ P("W_v")
    att, att_cache = linear_attention(Q, K, V, heads, return_cache=True)
    x2 = x + att @ P("W_o") + P("b_o")
    c, ln2 = _layer_norm(x2, P("ln2_g"), P("ln2_b"))
    hpre = c @ P("W_1") + P("b_1")
    hact, t = _gelu(hpre)
    x3 = x2 + hact @ P("W_2") + P("b_2")
    return x3, (a, ln1, att, att_cache, c, ln2, hpre, hact, t)


def _block_backward(p, prefix, dx3, cache, grads):
    a, ln1, att, att_cache, c, ln2, hpre, hact, t = cache
    P = lambda name: p[f"{prefix}.{name}"]  # noqa: E731
    grads[f"{prefix}.W_2"] = hact.T @ dx3
    grads[f"{prefix}.b_2"] = dx3.sum(axis=0)
    dhpre = (dx3 @ P("W_2").T) * _gelu_grad(hpre, t)
    grads[f"{prefix}.W_1"] = c.T @ dhpre
    grads[f"{prefix}.b_1"] = dhpre.sum(axis=0)
    dc = dhpre @ P("W_1").T
    dx2_ln, grads[f"{prefix}.ln2_g"], grads[f"{prefix}.ln2_b"] = _layer_norm_backward(dc, ln2)
    dx2 = dx3 + dx2_ln
    grads[f"{prefix}.W_o"] = att.T @ dx2
    grads[f"{prefix}.b_o"] = dx2.sum(axis=0)
    dQ, dK, dV = _linear_attention_backward(dx2 @ P("W_o").T, att_cache)
    grads[f"{prefix}.W_q"] = a.T @ dQ
    grads[f"{prefix}.W_k"] = a.T @ dK
    grads[f"{prefix}.W_v"] = a.T @ dV
    da = dQ @ P("W_q").T + dK @ P("W_k").T + dV @ P("W_v").T
    dx_ln, grads[f"{prefix}.ln1_g"], grads[f"{prefix}.ln1_b"] = _layer_norm_backward(da, ln1)
    return dx2 + dx_ln


def encoder_forward(model: SegTransformer, tokens, return_cache=False):
    """Apply both encoder blocks to an (n+1, d_model) token sequence."""
    z = np.asarray(tokens, dtype=float)
    cfg = model.config
    if z.ndim != 2 or z.shape[1] != cfg.d_model or len(z) < 2:
        raise InvalidArgument(f"tokens must be (n+1, {cfg.d_model}) with n >= 1")
    caches = []
    for layer in range(cfg.layers):
        z, cache = _block_forward(model.params, f"l{layer}", z, cfg.heads)
        caches.append(cache)
    if not np.all(np.isfinite(z)):
        raise NumericalFailure("non-finite activations in the encoder")
    return (z, caches) if return_cache else z


def encoder_backward(model: SegTransformer, dz, caches):
    """Pull ``dz`` back through the encoder; returns (dtokens, parameter grads)."""
    grads = {}
    dz = np.asarray(dz, dtype=float)
    for layer in reversed(range(model.config.layers)):
        dz = _block_backward(model.params, f"l{layer}", dz, caches[layer], grads)
    return dz, grads


def point_inputs(cloud, bands=DEFAULT_BANDS):
    """Per-point input rows: flattened features followed by positional encoding."""
    pe = positional_encode(normalize_positions(cloud.positions), bands)
    return np.concatenate([cloud.flat_features.astype(float), pe], axis=1)


def _forward(model: SegTransformer, cloud):
    cfg = model.config
    if cloud.heads * cloud.dim != cfg.d_feat:
        raise InvalidArgument(f"cloud feature size {cloud.heads * cloud.dim} != model d_feat {cfg.d_feat}")
    if len(cloud) < 1:
        raise InvalidArgument("empty cloud")
    p = model.params
    X = point_inputs(cloud, cfg.pe_bands)
    x_cls = np.concatenate([np.asarray(cloud.cls, dtype=float), np.zeros(6 * cfg.pe_bands)])
    X = np.vstack([x_cls, X])
    T0 = X @ p["W_in"] + p["b_in"]
    T0[0] += p["cls_embed"]
    T, caches = encoder_forward(model, T0, return_cache=True)
    proto = T[0] @ p["W_p"] + p["b_p"]
    scale = 1.0 / np.sqrt(cfg.d_model)
    logits = (T[1:] @ proto) * scale
    return logits, (X, T, caches, proto, scale)


def _backward(model: SegTransformer, dlogits, cache):
    X, T, caches, proto, scale = cache
    p = model.params
    grads = {}
    dT = np.zeros_like(T)
    dT[1:] = np.outer(dlogits, proto) * scale
    dproto = (T[1:].T @ dlogits) * scale
    grads["W_p"] = np.outer(T[0], dproto)
    grads["b_p"] = dproto
    dT[0] += p["W_p"] @ dproto
    dT, block_grads = encoder_backward(model, dT, caches)
    grads.update(block_grads)
    grads["cls_embed"] = dT[0].copy()
    grads["W_in"] = X.T @ dT
    grads["b_in"] = dT.sum(axis=0)
    return grads


def predict_logits(model: SegTransformer, cloud):
    return _forward(model, cloud)[0]


def predict(model: SegTransformer, cloud):
    """Per-point foreground probability."""
    return np.clip(expit(predict_logits(model, cloud)), 1e-15, 1.0 - 1e-15)


def predict_labels(model: SegTransformer, cloud, threshold=THRESHOLD):
    return predict(model, cloud) > threshold


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy over non-ignored points and its logit gradient."""
    labels = np.asarray(labels)
    z = np.asarray(logits, dtype=float)
    use = labels != IGNORE
    if not use.any():
        raise InvalidArgument("all labels are ignored")
    y = (labels == POSITIVE).astype(float)
    n = use.sum()
    per = np.logaddexp(0.0, z) - y * z
    loss = float(per[use].sum() / n)
    dz = np.where(use, (expit(z) - y) / n, 0.0)
    return loss, dz


def loss_and_grad(model: SegTransformer, cloud, labels):
    labels = np.asarray(labels)
    if labels.shape != (len(cloud),):
        raise InvalidArgument("labels must align with the cloud")
    logits, cache = _forward(model, cloud)
    loss, dz = bce_with_logits(logits, labels)
    return loss, _backward(model, dz, cache)


def loss_value(model: SegTransformer, cloud, labels):
    return bce_with_logits(predict_logits(model, cloud), labels)[0]


# --------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(name, 0.0) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[name] = f32_round(params[name] - lr * mhat / (np.sqrt(vhat) + self.eps))


@dataclass(frozen=True)
class StepResult:
    loss: float
    grad_norm: float


def train_step(model: SegTransformer, cloud, labels, lr=1e-3, optimizer: Adam = None) -> StepResult:
    """One Adam update on ``model`` (in place) for one labelled cloud.

    Labels use POSITIVE / NEGATIVE / IGNORE; ignored points do not contribute.
    Pass the same ``optimizer`` across steps to keep its moment estimates.
    """
    labels = np.asarray(labels)
    if not np.any(labels == POSITIVE) or not np.any(labels == NEGATIVE):
        if not np.any(labels != IGNORE):
            raise InvalidArgument("all labels are ignored")
        raise InvalidArgument("need at least one positive and one negative label")
    loss, grads = loss_and_grad(model, cloud, labels)
    if not np.isfinite(loss):
        raise NumericalFailure("loss is not finite")
    gnorm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if optimizer is None:
        optimizer = Adam()
    optimizer.step(model.params, grads, lr)
    return StepResult(loss, gnorm)


def augment(cloud, rng):
    """Random label-preserving copy of ``cloud`` for training.

    Each head's feature space gets its own random rotation, applied to the
    point features and to cls alike, so every per-head cosine is unchanged
    while the absolute feature directions carry no information. Positions
    get a random rotation about the vertical axis.
    """
    rng = np.random.default_rng(rng)
    h, d = cloud.heads, cloud.dim
    Qs = special_ortho_group.rvs(d, size=h, random_state=rng).reshape(h, d, d) if d > 1 else np.ones((h, 1, 1))
    features = np.einsum("nhd,hed->nhe", cloud.features, Qs)
    cls = np.einsum("hd,hed->he", np.asarray(cloud.cls, dtype=float).reshape(h, d), Qs).reshape(-1)
    a = rng.uniform(0.0, 2.0 * np.pi)
    Rz = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
    return replace(cloud, positions=cloud.positions @ Rz.T, features=features, cls=cls)


def train(model: SegTransformer, samples, steps, lr=1e-3, optimizer=None, log=None, augment_rng=None):
    """Cycle through (cloud, labels) pairs for ``steps`` updates.

    With ``augment_rng`` set (a seed or Generator) every step sees an
    :func:`augment`-ed copy of its cloud. ``log`` receives a dict
    {"step", "loss"} after every update. Returns the list of losses.
    """
    optimizer = optimizer or Adam()
    rng = None if augment_rng is None else np.random.default_rng(augment_rng)
    losses = []
    for step in range(steps):
        cloud, labels = samples[step % len(samples)]
        if rng is not None:
            cloud = augment(cloud, rng)
        res = train_step(model, cloud, labels, lr, optimizer)
        losses.append(res.loss)
        if log is not None:
            log({"step": step, "loss": res.loss})
    return losses


# --------------------------------------------------------------------------
# weight files

_HEADER = struct.Struct("<IIIIII")


def save_weights(model: SegTransformer, path):
    cfg = model.config
    shapes = cfg.shapes()
    with open(path, "wb") as fid:
        fid.write(ARTW_MAGIC)
        fid.write(struct.pack("<I", ARTW_VERSION))
        fid.write(_HEADER.pack(cfg.d_feat, cfg.pe_bands, cfg.d_model, cfg.heads, cfg.layers, len(shapes)))
        for name, _ in shapes:
            fid.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())


def load_weights(path, expect: TransformerConfig = None) -> SegTransformer:
    try:
        data = Path(path).read_bytes()
    except OSError:
        raise ParseError(str(path)) from None
    if len(data) < 8 + _HEADER.size or data[:4] != ARTW_MAGIC:
        raise FormatError(f"{path}: bad magic or truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != ARTW_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    d_feat, bands, d_model, heads, layers, n_tensors = _HEADER.unpack_from(data, 8)
    try:
        cfg = TransformerConfig(d_feat, bands, d_model, heads, layers)
    except InvalidArgument as exc:
        raise FormatError(f"{path}: {exc}") from None
    if expect is not None and cfg != expect:
        raise FormatError(f"{path}: dims {cfg} do not match expected {expect}")
    shapes = cfg.shapes()
    if n_tensors != len(shapes):
        raise FormatError(f"{path}: expected {len(shapes)} tensors, found {n_tensors}")
    off = 8 + _HEADER.size
    total = sum(int(np.prod(s)) for _, s in shapes)
    if len(data) != off + 4 * total:
        raise FormatError(f"{path}: size {len(data)} does not match the declared dims")
    params = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 4 * count
    return SegTransformer(cfg, params)
