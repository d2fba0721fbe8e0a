"""Modular attention grounding network.

Category and attribute branches share one structure: channel norm, a
phrase-conditioned sigmoid attention over channels, a weighted channel sum
and an affine + sigmoid head.  The relation branch convolves the category
branch's map of the supporting object (resampled to a coarse grid) together
with the broadcast predicate embedding.  A phrase-conditioned ensemble
mixes the three maps, their pairwise products and a bias plane.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..seeding import stage_rng
from . import layers as L
from .embedding import PhraseEmbedding

MODULES = ("cat", "att", "rel")


@dataclass(frozen=True)
class ModelConfig:
    n_categories: int
    n_attributes: int
    embed_dim: int = 64
    hidden_dim: int = 64
    ensemble_hidden: int = 64
    relation_grid: int = 32
    relation_channels: int = 8
    kernel_size: int = 7
    dilation: int = 2
    dropout: float = 0.1
    norm_eps: float = 1e-5
    positive_weight_cap: float = 20.0
    modules: tuple[str, ...] = MODULES
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if "cat" not in self.modules or not set(self.modules) <= set(MODULES):
            raise ValueError(f"modules must include 'cat' and be drawn from {MODULES}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["modules"] = list(self.modules)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["modules"] = tuple(obj.get("modules", MODULES))
        return cls(**obj)


Params = dict  # name -> float64 ndarray


def _branch_params(prefix: str, n: int, cfg: ModelConfig, rng: np.random.Generator) -> Params:
    d, h = cfg.embed_dim, cfg.hidden_dim
    return {
        f"{prefix}.norm_gain": np.ones(n),
        f"{prefix}.norm_bias": np.zeros(n),
        f"{prefix}.W1": rng.normal(0.0, np.sqrt(2.0 / d), (h, d)),
        f"{prefix}.b1": np.zeros(h),
        f"{prefix}.W2": rng.normal(0.0, np.sqrt(1.0 / h), (n, h)),
        f"{prefix}.b2": np.zeros(n),
        f"{prefix}.a": np.array(1.0),
        f"{prefix}.b": np.array(0.0),
    }


def init_params(cfg: ModelConfig) -> Params:
    rng = stage_rng(cfg.seed, "init")
    p: Params = {}
    p.update(_branch_params("cat", cfg.n_categories, cfg, rng))
    p.update(_branch_params("att", cfg.n_attributes, cfg, rng))
    k, m, d = cfg.kernel_size, cfg.relation_channels, cfg.embed_dim
    fan1 = k * k * (1 + d)
    p["rel.K1s"] = rng.normal(0.0, np.sqrt(2.0 / fan1), (m, 1, k, k))
    p["rel.K1e"] = rng.normal(0.0, np.sqrt(2.0 / fan1), (m, d, k, k))
    p["rel.b1"] = np.zeros(m)
    p["rel.K2"] = rng.normal(0.0, np.sqrt(1.0 / (k * k * m)), (1, m, k, k))
    p["rel.b2"] = np.zeros(1)
    p["rel.a"] = np.array(1.0)
    p["rel.b"] = np.array(0.0)
    he = cfg.ensemble_hidden
    p["ens.W1"] = rng.normal(0.0, np.sqrt(2.0 / (3 * d)), (he, 3 * d))
    p["ens.b1"] = np.zeros(he)
    p["ens.W2"] = rng.normal(0.0, 0.01, (L.N_COMBINED, he))
    p["ens.b2"] = np.zeros(L.N_COMBINED)
    return p


def param_count(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


@dataclass
class Sample:
    """One phrase-image pair with everything the network consumes."""

    task_id: str
    cat_channels: np.ndarray  # (N, H, W), raw max-projected scores
    att_channels: np.ndarray  # (N_att, H, W)
    embedding: PhraseEmbedding
    gt: np.ndarray | None = None  # (H, W) bool at channel resolution
    _cat_std: np.ndarray | None = field(default=None, repr=False)
    _att_std: np.ndarray | None = field(default=None, repr=False)

    def standardized(self, which: str, eps: float) -> np.ndarray:
        # channels are fixed inputs, so their normalized form is computed once
        attr = "_cat_std" if which == "cat" else "_att_std"
        cached = getattr(self, attr)
        if cached is None:
            raw = self.cat_channels if which == "cat" else self.att_channels
            cached = L.standardize(raw, eps)
            setattr(self, attr, cached)
        return cached

    @property
    def shape(self) -> tuple[int, int]:
        return self.cat_channels.shape[1:]


# ---------------------------------------------------------------- branches


def attention_weights(e: np.ndarray, params: Params, prefix: str) -> np.ndarray:
    z, _ = L.mlp_forward(e, params[f"{prefix}.W1"], params[f"{prefix}.b1"], params[f"{prefix}.W2"], params[f"{prefix}.b2"])
    return L.sigmoid(z)


def _branch_forward(xhat: np.ndarray, e: np.ndarray, params: Params, prefix: str):
    if e.shape[0] != params[f"{prefix}.W1"].shape[1]:
        raise ValueError(f"{prefix} embedding has dim {e.shape[0]}, expected {params[f'{prefix}.W1'].shape[1]}")
    z, mlp_cache = L.mlp_forward(e, params[f"{prefix}.W1"], params[f"{prefix}.b1"], params[f"{prefix}.W2"], params[f"{prefix}.b2"])
    A = L.sigmoid(z)
    gain, bias = params[f"{prefix}.norm_gain"], params[f"{prefix}.norm_bias"]
    S = np.tensordot(A * gain, xhat, axes=(0, 0)) + np.dot(A, bias)
    P = L.sigmoid(params[f"{prefix}.a"] * S + params[f"{prefix}.b"])
    return P, (xhat, A, S, P, mlp_cache)


def _branch_backward(dP: np.ndarray, cache, params: Params, prefix: str, grads: Params) -> None:
    xhat, A, S, P, mlp_cache = cache
    dz_out = dP * P * (1.0 - P)
    grads[f"{prefix}.a"] += np.sum(dz_out * S)
    grads[f"{prefix}.b"] += np.sum(dz_out)
    dS = params[f"{prefix}.a"] * dz_out
    proj = np.tensordot(xhat, dS, axes=([1, 2], [0, 1]))  # (N,)
    sum_dS = dS.sum()
    gain, bias = params[f"{prefix}.norm_gain"], params[f"{prefix}.norm_bias"]
    grads[f"{prefix}.norm_gain"] += A * proj
    grads[f"{prefix}.norm_bias"] += A * sum_dS
    dA = gain * proj + bias * sum_dS
    dz = dA * A * (1.0 - A)
    dW1, db1, dW2, db2 = L.mlp_backward(dz, mlp_cache, params[f"{prefix}.W2"])
    grads[f"{prefix}.W1"] += dW1
    grads[f"{prefix}.b1"] += db1
    grads[f"{prefix}.W2"] += dW2
    grads[f"{prefix}.b2"] += db2


def _relation_forward(support: np.ndarray, e_rel: np.ndarray, params: Params, cfg: ModelConfig):
    h, w = support.shape
    g = cfg.relation_grid
    Ry, Rx = L.resize_matrix(h, g), L.resize_matrix(w, g)
    Uy, Ux = L.upsample_nearest_matrix(g, h), L.upsample_nearest_matrix(g, w)
    X = (Ry @ support @ Rx.T)[None]
    ones = np.ones((1, g, g))
    k_eff = np.tensordot(params["rel.K1e"], e_rel, axes=(1, 0))[:, None]  # (M, 1, k, k)
    Z1 = (
        L.conv2d_forward(X, params["rel.K1s"], params["rel.b1"], cfg.dilation)
        + L.conv2d_forward(ones, k_eff, None, cfg.dilation)
    )
    H1 = L.leaky_relu(Z1)
    Z2 = L.conv2d_forward(H1, params["rel.K2"], params["rel.b2"], cfg.dilation)[0]
    R = L.sigmoid(params["rel.a"] * Z2 + params["rel.b"])
    P = Uy @ R @ Ux.T
    return P, (X, ones, k_eff, Z1, H1, Z2, R, Ry, Rx, Uy, Ux, e_rel)


def relate(support: np.ndarray, e_rel: np.ndarray, params: Params, cfg: ModelConfig, pre_sigmoid: bool = False) -> np.ndarray:
    """Relation heat-map for a supporting-object map at channel resolution.

    ``pre_sigmoid`` returns the affine output before the sigmoid (upsampled),
    which is what the hand-checked identities are stated on.
    """
    P, cache = _relation_forward(support, e_rel, params, cfg)
    if not pre_sigmoid:
        return P
    Z2, Uy, Ux = cache[5], cache[9], cache[10]
    return Uy @ (params["rel.a"] * Z2 + params["rel.b"]) @ Ux.T


def _relation_backward(dP: np.ndarray, cache, params: Params, cfg: ModelConfig, grads: Params) -> np.ndarray:
    X, ones, k_eff, Z1, H1, Z2, R, Ry, Rx, Uy, Ux, e_rel = cache
    dR = Uy.T @ dP @ Ux
    dZ = dR * R * (1.0 - R)
    grads["rel.a"] += np.sum(dZ * Z2)
    grads["rel.b"] += np.sum(dZ)
    dZ2 = (params["rel.a"] * dZ)[None]
    dH1, dK2, db2 = L.conv2d_backward(dZ2, H1, params["rel.K2"], cfg.dilation)
    grads["rel.K2"] += dK2
    grads["rel.b2"] += db2
    dZ1 = dH1 * L.leaky_relu_grad(Z1)
    dX, dK1s, db1 = L.conv2d_backward(dZ1, X, params["rel.K1s"], cfg.dilation)
    grads["rel.K1s"] += dK1s
    grads["rel.b1"] += db1
    _, dk_eff, _ = L.conv2d_backward(dZ1, ones, k_eff, cfg.dilation, need_input=False)
    grads["rel.K1e"] += dk_eff[:, 0][:, None] * e_rel[None, :, None, None]
    return Ry.T @ dX[0] @ Rx


# ---------------------------------------------------------------- full model


@dataclass
class Forward:
    P_cat: np.ndarray
    P_att: np.ndarray
    P_rel: np.ndarray
    O: np.ndarray
    weights: np.ndarray
    has_att: bool
    has_rel: bool
    cache: dict


def active_presence(emb: PhraseEmbedding, cfg: ModelConfig) -> tuple[bool, bool]:
    return emb.has_att and "att" in cfg.modules, emb.has_rel and "rel" in cfg.modules


def ensemble_weights(emb: PhraseEmbedding, params: Params, cfg: ModelConfig, rng=None):
    has_att, has_rel = active_presence(emb, cfg)
    x = emb.joint
    mask = None
    if rng is not None and cfg.dropout > 0:
        keep = 1.0 - cfg.dropout
        mask = (rng.random(params["ens.b1"].shape[0]) < keep) / keep
    logits, mlp_cache = L.mlp_forward(x, params["ens.W1"], params["ens.b1"], params["ens.W2"], params["ens.b2"], mask)
    w = L.masked_softmax(logits, L.presence_mask(has_att, has_rel))
    return w, mlp_cache


def forward(sample: Sample, params: Params, cfg: ModelConfig, rng: np.random.Generator | None = None) -> Forward:
    """Full forward pass; ``rng`` enables ensemble dropout (training only)."""
    emb = sample.embedding
    has_att, has_rel = active_presence(emb, cfg)
    cache: dict = {}
    zeros = np.zeros(sample.shape)
    P_cat, cache["cat"] = _branch_forward(sample.standardized("cat", cfg.norm_eps), emb.e_cat, params, "cat")
    P_att = P_rel = zeros
    if has_att:
        P_att, cache["att"] = _branch_forward(sample.standardized("att", cfg.norm_eps), emb.e_att, params, "att")
    if has_rel:
        P_sup, cache["sup"] = _branch_forward(sample.standardized("cat", cfg.norm_eps), emb.e_sup, params, "cat")
        P_rel, cache["rel"] = _relation_forward(P_sup, emb.e_rel, params, cfg)
    w, cache["ens"] = ensemble_weights(emb, params, cfg, rng)
    F = L.combined_features(P_cat, P_att, P_rel)
    O = L.weighted_sum(F, w)
    cache["F"] = F
    return Forward(P_cat, P_att, P_rel, O, w, has_att, has_rel, cache)


def zero_grads(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def backward(
    fw: Forward,
    params: Params,
    cfg: ModelConfig,
    dO: np.ndarray,
    dP_cat: np.ndarray | None = None,
    dP_att: np.ndarray | None = None,
    dP_rel: np.ndarray | None = None,
    grads: Params | None = None,
) -> Params:
    """Accumulate parameter gradients given upstream gradients on the outputs."""
    if grads is None:
        grads = zero_grads(params)
    F, w = fw.cache["F"], fw.weights
    dw = np.tensordot(F, dO, axes=([1, 2], [0, 1]))
    dF = w[:, None, None] * dO[None]
    d_cat, d_att, d_rel = L.combined_features_backward(dF, fw.P_cat, fw.P_att, fw.P_rel)
    dlogits = L.masked_softmax_backward(dw, w)
    dW1, db1, dW2, db2 = L.mlp_backward(dlogits, fw.cache["ens"], params["ens.W2"])
    grads["ens.W1"] += dW1
    grads["ens.b1"] += db1
    grads["ens.W2"] += dW2
    grads["ens.b2"] += db2

    if dP_cat is not None:
        d_cat = d_cat + dP_cat
    if dP_att is not None:
        d_att = d_att + dP_att
    if dP_rel is not None:
        d_rel = d_rel + dP_rel
    if fw.has_rel:
        d_sup = _relation_backward(d_rel, fw.cache["rel"], params, cfg, grads)
        _branch_backward(d_sup, fw.cache["sup"], params, "cat", grads)
    if fw.has_att:
        _branch_backward(d_att, fw.cache["att"], params, "att", grads)
    _branch_backward(d_cat, fw.cache["cat"], params, "cat", grads)
    return grads


# ---------------------------------------------------------------- loss


LOSS_TERMS = ("cat", "att", "rel", "final")


def sample_loss(
    sample: Sample,
    params: Params,
    cfg: ModelConfig,
    terms: tuple[str, ...] = LOSS_TERMS,
    rng: np.random.Generator | None = None,
    need_grad: bool = True,
) -> tuple[float, Params | None]:
    """Weighted BCE on each present module map plus the final map."""
    if sample.gt is None:
        raise ValueError(f"sample {sample.task_id!r} has no ground truth")
    fw = forward(sample, params, cfg, rng)
    gt = sample.gt
    lam = L.positive_weight(gt, cfg.positive_weight_cap)
    total = 0.0
    upstream = {}
    maps = {"cat": (fw.P_cat, True), "att": (fw.P_att, fw.has_att), "rel": (fw.P_rel, fw.has_rel), "final": (fw.O, True)}
    for name in terms:
        pred, present = maps[name]
        if not present:
            continue
        total += L.bce_loss(pred, gt, lam)
        if need_grad:
            upstream[name] = L.bce_loss_grad(pred, gt, lam)
    if not need_grad:
        return total, None
    zeros = np.zeros(sample.shape)
    grads = backward(
        fw,
        params,
        cfg,
        upstream.get("final", zeros),
        upstream.get("cat"),
        upstream.get("att"),
        upstream.get("rel"),
    )
    return total, grads


def batch_loss(
    samples: list[Sample],
    params: Params,
    cfg: ModelConfig,
    terms: tuple[str, ...] = LOSS_TERMS,
    rngs: list | None = None,
    need_grad: bool = True,
    jobs: int = 1,
) -> tuple[float, Params | None]:
    """Mean over phrase-image pairs; per-sample results are reduced in list order."""
    if not samples:
        raise ValueError("empty batch")
    rngs = rngs if rngs is not None else [None] * len(samples)

    def one(k: int):
        return sample_loss(samples[k], params, cfg, terms, rngs[k], need_grad)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(len(samples))))
    else:
        results = [one(k) for k in range(len(samples))]
    n = len(samples)
    loss = math.fsum(r[0] for r in results) / n
    if not need_grad:
        return loss, None
    grads = zero_grads(params)
    for _, g in results:
        for k in grads:
            grads[k] += g[k]
    for k in grads:
        grads[k] /= n
    return loss, grads


def predict_map(sample: Sample, params: Params, cfg: ModelConfig) -> np.ndarray:
    return forward(sample, params, cfg).O
