"""Spatial token fusion: project, cross-attend, gate, refine.

Visual tokens query projected spatial grid tokens through unidirectional
cross-attention; a tanh-bounded channel-wise gate modulates the attended
features before a residual MLP refinement. The gate and the MLP output layer
start at zero, so fusion is an exact identity on the visual tokens at
initialization. Spatial tokens are produced by a frozen encoder and never
receive gradients. Global spatial tokens bypass attention and are
concatenated after fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .env import Geometry, canonical_dim, feature_dim
from .nn import MLP

LAYERNORM_EPS = 1e-5


@dataclass
class FusionDims:
    L: int = 8      # visual tokens
    Ls: int = 8     # spatial grid tokens
    G: int = 2      # global spatial tokens
    C: int = 32     # visual channel width
    Cs: int = 32    # spatial channel width
    n_views: int = 1

    @property
    def token_count(self) -> int:
        return self.L + self.G


class TokenSet:
    """Token bundle for one batch of observations."""

    def __init__(self, visual: ad.Tensor, spatial_grid: ad.Tensor,
                 spatial_global: ad.Tensor, fused: ad.Tensor = None):
        self.visual = visual
        self.spatial_grid = spatial_grid
        self.spatial_global = spatial_global
        self.fused = fused


class FusionParams:
    def __init__(self, rng: np.random.Generator, dims: FusionDims):
        d = dims
        self.dims = d
        self.W_proj = ad.glorot_uniform(rng, (d.Cs, d.C), name="fusion/W_proj")
        self.p_2d = ad.Tensor(rng.normal(0.0, 0.02, size=(d.Ls, d.C)),
                              requires_grad=True, name="fusion/p_2d")
        self.p_view = ad.Tensor(rng.normal(0.0, 0.02, size=(d.n_views, d.C)),
                                requires_grad=True, name="fusion/p_view")
        self.W_q = ad.glorot_uniform(rng, (d.C, d.C), name="fusion/W_q")
        self.W_k = ad.glorot_uniform(rng, (d.C, d.C), name="fusion/W_k")
        self.W_v = ad.glorot_uniform(rng, (d.C, d.C), name="fusion/W_v")
        self.W_o = ad.glorot_uniform(rng, (d.C, d.C), name="fusion/W_o")
        self.gate = ad.zeros_param((d.C,), name="fusion/gate")
        self.mlp = MLP(rng, [d.C, d.C, d.C], name="fusion/mlp", zero_last=True)

    def params(self) -> dict:
        out = {p.name: p for p in
               [self.W_proj, self.p_2d, self.p_view,
                self.W_q, self.W_k, self.W_v, self.W_o, self.gate]}
        out.update(self.mlp.params())
        return out


def project_spatial(z: ad.Tensor, params: FusionParams, view_id: int) -> ad.Tensor:
    """LayerNorm(z W_proj + p_2d + p_view[view_id])."""
    if not 0 <= view_id < params.dims.n_views:
        raise ValueError(f"unknown view_id {view_id} (have {params.dims.n_views} views)")
    pv = ad.slice_(params.p_view, view_id)
    proj = ad.add(ad.add(ad.matmul(z, params.W_proj), params.p_2d), pv)
    return ad.layernorm(proj, eps=LAYERNORM_EPS)


def cross_attend(x: ad.Tensor, z_proj: ad.Tensor, params: FusionParams) -> ad.Tensor:
    """Single-head attention with queries from x, keys/values from z_proj."""
    d = params.dims
    q = ad.matmul(x, params.W_q)
    k = ad.matmul(z_proj, params.W_k)
    v = ad.matmul(z_proj, params.W_v)
    scores = ad.mul(ad.matmul(q, _transpose_last(k)), 1.0 / np.sqrt(d.C))
    attn = ad.softmax(scores)
    return ad.matmul(ad.matmul(attn, v), params.W_o)


def attention_weights(x: ad.Tensor, z_proj: ad.Tensor, params: FusionParams) -> np.ndarray:
    q = ad.matmul(x, params.W_q)
    k = ad.matmul(z_proj, params.W_k)
    scores = ad.mul(ad.matmul(q, _transpose_last(k)), 1.0 / np.sqrt(params.dims.C))
    return ad.softmax(scores).data


def _transpose_last(t: ad.Tensor) -> ad.Tensor:
    perm = list(range(t.data.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    out = ad.Tensor(np.transpose(t.data, perm), requires_grad=t.requires_grad)
    ad._record(out, [(t, lambda g: np.transpose(g, perm))])
    return out


def gated_fuse(x: ad.Tensor, attended: ad.Tensor, params: FusionParams) -> ad.Tensor:
    """x + tanh(gate) * LayerNorm(attended), then residual MLP refinement."""
    gate = ad.tanh(params.gate)
    h = ad.add(x, ad.mul(gate, ad.layernorm(attended, eps=LAYERNORM_EPS)))
    return ad.add(h, params.mlp(ad.layernorm(h, eps=LAYERNORM_EPS)))


def fuse(tokens: TokenSet, params: FusionParams, view_id: int = 0,
         enabled: bool = True) -> TokenSet:
    """Full fusion pipeline; global tokens are concatenated after fusion.

    With enabled=False the fused part is the visual tokens and the global
    tail is zeroed, keeping the downstream embedding width fixed.
    """
    d = params.dims
    if d.Cs != d.C:
        raise ValueError("global-token concatenation requires Cs == C")
    if enabled:
        z_proj = project_spatial(tokens.spatial_grid, params, view_id)
        attended = cross_attend(tokens.visual, z_proj, params)
        h = gated_fuse(tokens.visual, attended, params)
        tail = tokens.spatial_global
    else:
        h = tokens.visual
        tail = ad.Tensor(np.zeros_like(tokens.spatial_global.data))
    tokens.fused = ad.concat([h, tail], axis=-2)
    return tokens


class TokenEncoder:
    """Toy stand-in for the observation tokenizers.

    Visual tokens come from a small trainable MLP over view-frame features
    (perturbation-sensitive). Spatial grid/global tokens come from a fixed
    random projection of the view-invariant canonical geometry; those weights
    are frozen plain arrays and never enter the autodiff graph.
    """

    def __init__(self, seed: int, dims: FusionDims, geom: Geometry = Geometry()):
        self.dims = dims
        rng = np.random.default_rng(seed)
        f_dim, g_dim = feature_dim(geom), canonical_dim(geom)
        self.visual_mlp = MLP(rng, [f_dim, 64, dims.L * dims.C], name="encoder/visual")
        scale = 1.0 / np.sqrt(g_dim)
        self._grid_proj = rng.normal(0.0, scale, size=(g_dim, dims.Ls * dims.Cs))
        self._global_proj = rng.normal(0.0, scale, size=(g_dim, dims.G * dims.Cs))

    def encode(self, features: np.ndarray, canonical: np.ndarray) -> TokenSet:
        """Encode a batch; features (B, F), canonical (B, Gdim)."""
        d = self.dims
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        canon = np.atleast_2d(np.asarray(canonical, dtype=np.float64))
        B = feats.shape[0]
        vis = self.visual_mlp(ad.Tensor(feats))
        vis = ad.reshape(vis, (B, d.L, d.C))
        grid = ad.Tensor(np.tanh(canon @ self._grid_proj).reshape(B, d.Ls, d.Cs))
        glob = ad.Tensor(np.tanh(canon @ self._global_proj).reshape(B, d.G, d.Cs))
        return TokenSet(visual=vis, spatial_grid=grid, spatial_global=glob)

    def params(self) -> dict:
        return self.visual_mlp.params()

    def frozen_checksum(self) -> float:
        return float(np.sum(self._grid_proj) + np.sum(self._global_proj))
