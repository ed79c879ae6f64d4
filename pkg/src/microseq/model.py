"""Sigmoid self/cross attention, gated attention pooling and the shared reduction head.

Everything is plain numpy with a hand-written reverse pass.  Parameters live
in a flat ``dict`` keyed ``"<block>.<name>"`` so optimizers and checkpoints
can iterate over them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import BadDims, DimMismatch, NonFiniteValue, StaleCache

AP_INPUTS = ("ca_output", "raw")


@dataclass
class ModelParams:
    """Learnable weights plus the architecture switches that give them meaning.

    ``lambda_stb`` and ``lambda_rpd`` weight the two cross-attention branches;
    they are fixed hyperparameters and receive no gradient.
    """

    weights: dict
    d: int
    d_k: int
    h: int
    n_classes: int
    use_attention: bool = True
    use_ap: bool = True
    ap_input: str = "ca_output"
    ca_separate_kv: bool = False
    lambda_stb: float = 1.0
    lambda_rpd: float = 1.0

    @property
    def trunk_dim(self) -> int:
        """Width of the representation fed to the reduction head."""
        return self.d_k if self.use_attention else self.d

    def arch(self) -> dict:
        return {
            "d": self.d,
            "d_k": self.d_k,
            "h": self.h,
            "n_classes": self.n_classes,
            "use_attention": self.use_attention,
            "use_ap": self.use_ap,
            "ap_input": self.ap_input,
            "ca_separate_kv": self.ca_separate_kv,
            "lambda_stb": self.lambda_stb,
            "lambda_rpd": self.lambda_rpd,
        }

    def copy(self) -> "ModelParams":
        return ModelParams(weights={k: v.copy() for k, v in self.weights.items()}, **self.arch())

    def with_weights(self, weights: dict) -> "ModelParams":
        return ModelParams(weights=weights, **self.arch())

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}


@dataclass
class PredictionBundle:
    y_attn: np.ndarray | None
    y_ap: np.ndarray | None
    pool_weights: np.ndarray | None
    cache: dict = field(default=None, repr=False)


def parameter_shapes(d, d_k, h, n_classes, use_attention=True, use_ap=True, ca_separate_kv=False, ap_input="ca_output"):
    trunk = d_k if use_attention else d
    shapes = {}
    if use_attention:
        shapes["sa.W_Q"] = (d, d_k)
        shapes["sa.W_K"] = (d, d_k)
        shapes["sa.W_V"] = (d, d_k)
        shapes["ca.W_Q"] = (d_k, d_k)
        if ca_separate_kv:
            for branch in ("stb", "rpd"):
                shapes[f"ca.W_K_{branch}"] = (d, d_k)
                shapes[f"ca.W_V_{branch}"] = (d, d_k)
        else:
            shapes["ca.W_K"] = (d, d_k)
            shapes["ca.W_V"] = (d, d_k)
    if use_ap:
        ap_dim = d if (ap_input == "raw" or not use_attention) else d_k
        shapes["ap.A_t"] = (ap_dim, ap_dim)
        shapes["ap.A_s"] = (ap_dim, ap_dim)
        shapes["ap.w"] = (ap_dim,)
    shapes["head.W1"] = (trunk, h)
    shapes["head.b1"] = (h,)
    shapes["head.W2"] = (h, n_classes)
    shapes["head.b2"] = (n_classes,)
    return shapes


def init_params(d, d_k=192, h=96, C=2, seed=0, *, use_attention=True, use_ap=True,
                ap_input="ca_output", ca_separate_kv=False, lambda_stb=1.0, lambda_rpd=1.0) -> ModelParams:
    """Fan-scaled uniform initialisation, deterministic per seed; biases start at zero."""
    for name, value in (("d", d), ("d_k", d_k), ("h", h), ("C", C)):
        if int(value) != value or value < 1:
            raise BadDims(f"{name} must be a positive integer, got {value}")
    if C < 2:
        raise BadDims("need at least two classes")
    if not (use_attention or use_ap):
        raise BadDims("at least one of the attention and pooling paths must be enabled")
    if ap_input not in AP_INPUTS:
        raise BadDims(f"ap_input must be one of {AP_INPUTS}")
    if use_attention and use_ap and ap_input == "raw" and d != d_k:
        raise BadDims("ap_input='raw' shares the reduction head, so it needs d == d_k")
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in parameter_shapes(d, d_k, h, C, use_attention, use_ap, ca_separate_kv, ap_input).items():
        if name.startswith("head.b"):
            weights[name] = np.zeros(shape)
            continue
        fan_in, fan_out = (shape[0], 1) if len(shape) == 1 else shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(weights, d, d_k, h, C, use_attention, use_ap, ap_input, ca_separate_kv, lambda_stb, lambda_rpd)


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, grad_p, axis=-1):
    """Map a gradient w.r.t. softmax outputs ``p`` to one w.r.t. the logits."""
    return p * (grad_p - np.sum(grad_p * p, axis=axis, keepdims=True))


def _check(X, d):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DimMismatch(f"expected an n x {d} matrix, got shape {X.shape}")
    if X.shape[1] != d:
        raise DimMismatch(f"expected {d} features per frame, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteValue("input contains non-finite values")
    return X


def _attend(Q, K, V, d_k):
    scores = sigmoid(Q @ K.T / np.sqrt(d_k))
    return scores @ V, scores


def self_attention(X, params: ModelParams):
    """``sigmoid(Q K^T / sqrt(d_k)) V`` with Q, K, V projected from ``X``."""
    w = params.weights
    X = _check(X, params.d)
    out, _ = _attend(X @ w["sa.W_Q"], X @ w["sa.W_K"], X @ w["sa.W_V"], params.d_k)
    return out


def _ca_kv(params, branch):
    w = params.weights
    if params.ca_separate_kv:
        return w[f"ca.W_K_{branch}"], w[f"ca.W_V_{branch}"]
    return w["ca.W_K"], w["ca.W_V"]


def cross_attention(S, X_stb, X_rpd, params: ModelParams):
    """Weighted sum of sigmoid attention from ``S`` onto the stable and rapid components."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != params.d_k:
        raise DimMismatch(f"query sequence must be n x {params.d_k}, got {S.shape}")
    X_stb = _check(X_stb, params.d)
    X_rpd = _check(X_rpd, params.d)
    if not (S.shape[0] == X_stb.shape[0] == X_rpd.shape[0]):
        raise DimMismatch("query, stable and rapid sequences must share a length")
    Q = S @ params.weights["ca.W_Q"]
    out = np.zeros((S.shape[0], params.d_k))
    for lam, Xb, branch in ((params.lambda_stb, X_stb, "stb"), (params.lambda_rpd, X_rpd, "rpd")):
        Wk, Wv = _ca_kv(params, branch)
        part, _ = _attend(Q, Xb @ Wk, Xb @ Wv, params.d_k)
        out += lam * part
    return out


def _pool(U, w):
    T = np.tanh(U @ w["ap.A_t"].T)
    G = sigmoid(U @ w["ap.A_s"].T)
    logits = (T * G) @ w["ap.w"]
    a = softmax(logits)
    return a @ U, a, T, G


def attention_pool(H, params: ModelParams):
    """Gated attention pooling; returns the pooled vector and the frame weights."""
    H = np.asarray(H, dtype=np.float64)
    dim = params.weights["ap.w"].shape[0]
    if H.ndim != 2 or H.shape[0] < 1 or H.shape[1] != dim:
        raise DimMismatch(f"pooling input must be n x {dim}, got {H.shape}")
    if not np.all(np.isfinite(H)):
        raise NonFiniteValue("pooling input contains non-finite values")
    pooled, a, _, _ = _pool(H, params.weights)
    return pooled, a


def reduction_head(Z, params: ModelParams):
    """Two linear layers with a ReLU in between; shared by both prediction paths."""
    w = params.weights
    Z = np.asarray(Z, dtype=np.float64)
    squeeze = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != w["head.W1"].shape[0]:
        raise DimMismatch(f"head expects width {w['head.W1'].shape[0]}, got {Z.shape[1]}")
    hidden = np.maximum(Z @ w["head.W1"] + w["head.b1"], 0.0)
    logits = hidden @ w["head.W2"] + w["head.b2"]
    return logits[0] if squeeze else logits


def model_forward(X, X_stb, X_rpd, params: ModelParams) -> PredictionBundle:
    """Run both prediction paths; the bundle's ``cache`` feeds :func:`model_backward`."""
    w = params.weights
    X = _check(X, params.d)
    cache = {"weights": w, "params": params, "X": X}
    d_k = params.d_k
    y_attn = y_ap = a = None

    if params.use_attention:
        X_stb = _check(X_stb, params.d)
        X_rpd = _check(X_rpd, params.d)
        if not (X.shape[0] == X_stb.shape[0] == X_rpd.shape[0]):
            raise DimMismatch("X, X_stb and X_rpd must share a length")
        Q1, K1, V1 = X @ w["sa.W_Q"], X @ w["sa.W_K"], X @ w["sa.W_V"]
        S, A1 = _attend(Q1, K1, V1, d_k)
        Q2 = S @ w["ca.W_Q"]
        H = np.zeros((X.shape[0], d_k))
        branches = []
        for lam, Xb, branch in ((params.lambda_stb, X_stb, "stb"), (params.lambda_rpd, X_rpd, "rpd")):
            Wk, Wv = _ca_kv(params, branch)
            Kb, Vb = Xb @ Wk, Xb @ Wv
            part, Ab = _attend(Q2, Kb, Vb, d_k)
            H += lam * part
            branches.append((lam, Xb, branch, Kb, Vb, Ab))
        Z1 = H @ w["head.W1"] + w["head.b1"]
        R1 = np.maximum(Z1, 0.0)
        logits_attn = R1 @ w["head.W2"] + w["head.b2"]
        y_attn = softmax(logits_attn, axis=1)
        cache.update(Q1=Q1, K1=K1, V1=V1, A1=A1, S=S, Q2=Q2, branches=branches, H=H, Z1=Z1, R1=R1)
    else:
        H = None

    if params.use_ap:
        U = X if (params.ap_input == "raw" or not params.use_attention) else H
        P, a, T, G = _pool(U, w)
        zp = P @ w["head.W1"] + w["head.b1"]
        rp = np.maximum(zp, 0.0)
        logits_ap = rp @ w["head.W2"] + w["head.b2"]
        y_ap = softmax(logits_ap)
        cache.update(U=U, P=P, a=a, T=T, G=G, zp=zp, rp=rp)

    return PredictionBundle(y_attn=y_attn, y_ap=y_ap, pool_weights=a, cache=cache)


def _head_backward(Z, pre, post, d_logits, w, grads):
    grads["head.W2"] += post.T @ d_logits
    grads["head.b2"] += d_logits.sum(axis=0)
    d_pre = (d_logits @ w["head.W2"].T) * (pre > 0)
    grads["head.W1"] += Z.T @ d_pre
    grads["head.b1"] += d_pre.sum(axis=0)
    return d_pre @ w["head.W1"].T


def model_backward(cache, d_attn_logits=None, d_ap_logits=None, d_pool_weights=None, params=None) -> dict:
    """Reverse pass: gradients of a scalar loss for every weight in ``cache``'s params.

    The upstream arguments are gradients w.r.t. the sequence-path logits
    (``n x C``), the pooled-path logits (``C``) and the pooling weights
    (``n``); any of them may be None.
    """
    if cache is None or "weights" not in cache:
        raise StaleCache("no forward cache supplied")
    if params is not None and params.weights is not cache["weights"]:
        raise StaleCache("cache was produced with a different parameter set")
    params = cache["params"]
    w = cache["weights"]
    grads = {k: np.zeros_like(v) for k, v in w.items()}
    X = cache["X"]
    d_k = params.d_k
    dH = None

    if params.use_attention:
        dH = np.zeros_like(cache["H"])
        if d_attn_logits is not None:
            d_attn_logits = np.asarray(d_attn_logits, dtype=np.float64)
            dH += _head_backward(cache["H"], cache["Z1"], cache["R1"], d_attn_logits, w, grads)

    if params.use_ap and (d_ap_logits is not None or d_pool_weights is not None):
        U, P, a, T, G = cache["U"], cache["P"], cache["a"], cache["T"], cache["G"]
        if d_ap_logits is not None:
            d_ap_logits = np.asarray(d_ap_logits, dtype=np.float64)
            dP = _head_backward(P[None, :], cache["zp"][None, :], cache["rp"][None, :], d_ap_logits[None, :], w, grads)[0]
        else:
            dP = np.zeros_like(P)
        dU = np.outer(a, dP)
        da = U @ dP
        if d_pool_weights is not None:
            da = da + np.asarray(d_pool_weights, dtype=np.float64)
        ds = a * (da - a @ da)
        M = T * G
        grads["ap.w"] += M.T @ ds
        dM = np.outer(ds, w["ap.w"])
        dpre_t = dM * G * (1.0 - T * T)
        dpre_s = dM * T * G * (1.0 - G)
        grads["ap.A_t"] += dpre_t.T @ U
        grads["ap.A_s"] += dpre_s.T @ U
        dU += dpre_t @ w["ap.A_t"] + dpre_s @ w["ap.A_s"]
        if params.use_attention and params.ap_input == "ca_output":
            dH += dU

    if params.use_attention:
        scale = 1.0 / np.sqrt(d_k)
        Q2, S = cache["Q2"], cache["S"]
        dQ2 = np.zeros_like(Q2)
        for lam, Xb, branch, Kb, Vb, Ab in cache["branches"]:
            dpart = lam * dH
            dAb = dpart @ Vb.T
            dVb = Ab.T @ dpart
            dZ = dAb * Ab * (1.0 - Ab) * scale
            dQ2 += dZ @ Kb
            dKb = dZ.T @ Q2
            kname, vname = (f"ca.W_K_{branch}", f"ca.W_V_{branch}") if params.ca_separate_kv else ("ca.W_K", "ca.W_V")
            grads[kname] += Xb.T @ dKb
            grads[vname] += Xb.T @ dVb
        grads["ca.W_Q"] += S.T @ dQ2
        dS = dQ2 @ w["ca.W_Q"].T
        Q1, K1, V1, A1 = cache["Q1"], cache["K1"], cache["V1"], cache["A1"]
        dA1 = dS @ V1.T
        dV1 = A1.T @ dS
        dZ1 = dA1 * A1 * (1.0 - A1) * scale
        grads["sa.W_Q"] += X.T @ (dZ1 @ K1)
        grads["sa.W_K"] += X.T @ (dZ1.T @ Q1)
        grads["sa.W_V"] += X.T @ dV1

    return grads
