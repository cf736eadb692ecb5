"""Patch-token ViT forward pass with capture of pre-softmax attention.

Patch flattening order: patches row-major over the grid; inside a patch,
pixels row-major; each pixel contributes R, G, B in that order.  Weight
importers must permute checkpoint patch projections to match.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import DTYPE, ShapeError, as_matrix, as_vector, gelu, layer_norm, matmul, softmax_rows


@dataclass(frozen=True)
class AttentionCapture:
    """Pre-softmax attention of one block, ``heads[h]`` is ``N x N`` (0-based h)."""

    block_index: int
    heads: np.ndarray
    scale: float

    def __post_init__(self):
        heads = np.asarray(self.heads, dtype=DTYPE)
        if heads.ndim != 3 or heads.shape[1] != heads.shape[2] or heads.shape[0] < 1:
            raise ShapeError(f"capture heads must be (H, N, N), got {heads.shape}")
        if not np.all(np.isfinite(heads)):
            raise ValueError("capture contains non-finite values")
        object.__setattr__(self, "heads", heads)

    @property
    def num_heads(self):
        return self.heads.shape[0]

    @property
    def num_patches(self):
        return self.heads.shape[1]


@dataclass(frozen=True)
class BlockWeights:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    fc1: np.ndarray
    fc1_bias: np.ndarray
    fc2: np.ndarray
    fc2_bias: np.ndarray

    @classmethod
    def from_weights(cls, ws, index):
        """Block ``index`` (0-based, as in tensor names) of a WeightSet."""
        p = f"blocks.{index}."
        return cls(
            ln1_gamma=ws[p + "ln1.weight"], ln1_beta=ws[p + "ln1.bias"],
            wq=ws[p + "attn.q.weight"], wk=ws[p + "attn.k.weight"],
            wv=ws[p + "attn.v.weight"], wo=ws[p + "attn.proj.weight"],
            ln2_gamma=ws[p + "ln2.weight"], ln2_beta=ws[p + "ln2.bias"],
            fc1=ws[p + "mlp.fc1.weight"], fc1_bias=ws[p + "mlp.fc1.bias"],
            fc2=ws[p + "mlp.fc2.weight"], fc2_bias=ws[p + "mlp.fc2.bias"],
        )


def patchify(img, cfg):
    """Split an ``(H, W, 3)`` image into an ``N x P*P*3`` patch matrix."""
    img = np.asarray(img, dtype=DTYPE)
    if img.shape != (cfg.image_height, cfg.image_width, 3):
        raise ShapeError(f"image shape {img.shape} does not match config "
                         f"({cfg.image_height}, {cfg.image_width}, 3)")
    p, gh, gw = cfg.patch_size, cfg.grid_height, cfg.grid_width
    # (gh, p, gw, p, 3) -> (gh, gw, p, p, 3)
    blocks = img.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks.reshape(gh * gw, p * p * 3))


def embed_patches(patches, proj, bias, pos_embed):
    """``z0[i] = Y p_i + b + E_pos[i]`` for ``Y`` of shape ``D x patch_dim``."""
    patches = as_matrix(patches, "patches")
    proj = as_matrix(proj, "proj")
    pos_embed = as_matrix(pos_embed, "pos_embed")
    d = proj.shape[0]
    bias = as_vector(bias, d, "bias")
    if pos_embed.shape != (patches.shape[0], d):
        raise ShapeError(f"pos_embed shape {pos_embed.shape} != {(patches.shape[0], d)}")
    return matmul(patches, proj.T) + bias + pos_embed


def attention_head(z_norm, wq, wk, wv, scale):
    """One head of scaled dot-product attention.

    Returns ``(a_raw, head_out)`` where ``a_raw`` is the pre-softmax score
    matrix ``(z Wq)(z Wk)^T * scale`` and ``head_out = softmax(a_raw) (z Wv)``.
    """
    z_norm = as_matrix(z_norm, "z_norm")
    q = matmul(z_norm, wq)
    k = matmul(z_norm, wk)
    v = matmul(z_norm, wv)
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError("query, key and value projections must share a shape")
    a_raw = matmul(q, k.T) * DTYPE(scale)
    head_out = matmul(softmax_rows(a_raw), v)
    return a_raw, head_out


def multi_head_attention(z_norm, bw, cfg):
    """Concatenated heads projected by ``W^O``, plus the per-head raw scores."""
    dh = cfg.head_dim
    raws, outs = [], []
    for h in range(cfg.num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        a_raw, out = attention_head(z_norm, bw.wq[:, cols], bw.wk[:, cols],
                                    bw.wv[:, cols], cfg.attention_scale)
        raws.append(a_raw)
        outs.append(out)
    return matmul(np.concatenate(outs, axis=1), bw.wo), np.stack(raws)


def transformer_block(z, bw, cfg, capture=False, block_index=0):
    """Pre-LN block: ``z' = MSA(LN(z)) + z``, ``out = MLP(LN(z')) + z'``.

    ``block_index`` is 1-based and only labels the returned capture.
    """
    z = as_matrix(z, "z")
    if z.shape != (cfg.num_patches, cfg.embed_dim):
        raise ShapeError(f"token states {z.shape} != {(cfg.num_patches, cfg.embed_dim)}")
    msa, raws = multi_head_attention(layer_norm(z, bw.ln1_gamma, bw.ln1_beta, cfg.ln_eps), bw, cfg)
    z_mid = z + msa
    hidden = gelu(matmul(layer_norm(z_mid, bw.ln2_gamma, bw.ln2_beta, cfg.ln_eps), bw.fc1) + bw.fc1_bias)
    out = z_mid + (matmul(hidden, bw.fc2) + bw.fc2_bias)
    cap = AttentionCapture(block_index, raws, cfg.attention_scale) if capture else None
    return out, cap


def forward_with_capture(img, ws, cfg, capture_block: Optional[int] = None):
    """Run all blocks once and capture attention at ``capture_block`` (1-based,
    default: the last block).  Returns ``(final_states, capture)``."""
    if capture_block is None:
        capture_block = cfg.num_blocks
    if not 1 <= capture_block <= cfg.num_blocks:
        raise IndexError(f"capture_block must be in [1, {cfg.num_blocks}], got {capture_block}")
    z = embed_patches(patchify(img, cfg), ws["patch_embed.weight"],
                      ws["patch_embed.bias"], ws["pos_embed"])
    cap = None
    for i in range(cfg.num_blocks):
        take = i + 1 == capture_block
        z, c = transformer_block(z, BlockWeights.from_weights(ws, i), cfg,
                                 capture=take, block_index=i + 1)
        if take:
            cap = c
    return z, cap


def forward_states(img, ws, cfg):
    """Token states ``[z0, z1, ..., zL]`` at every block boundary."""
    z = embed_patches(patchify(img, cfg), ws["patch_embed.weight"],
                      ws["patch_embed.bias"], ws["pos_embed"])
    states = [z]
    for i in range(cfg.num_blocks):
        z, _ = transformer_block(z, BlockWeights.from_weights(ws, i), cfg)
        states.append(z)
    return states
