"""Reconstruction heads: decode slots back to feature space so that
unselected slots keep carrying information instead of collapsing.

Three reconstruction targets share one decoder architecture (a single
cross-attention block with a feed-forward tail):

* genomic: learned per-pathway position embeddings query the genomic
  slots; mean-squared error against the original pathway features.
* histology: a frozen random affine map turns the (subsampled) patch
  features into queries for the histology slots; cosine loss, which is
  scale-invariant per patch.
* cross-modal: the genomic branch's slot initialization is run over the
  HISTOLOGY bag, and the resulting slots must reconstruct the genomic
  features through the shared position table.  After training this same
  path imputes a genomic bag when one is missing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import slots as slot_mod
from .autodiff import Graph, Node, bind_arrays
from .data import FeatureBag

__all__ = [
    "FrozenQueryMap",
    "PositionTable",
    "ReconHeadParams",
    "build_cosine_loss",
    "build_cross_modal_encode",
    "build_decode",
    "build_recon_genomic",
    "build_recon_histology",
    "cross_modal_encode",
    "impute_genomic",
    "init_position_table",
    "init_query_map",
    "init_recon_head",
    "reconstruct_genomic",
    "reconstruct_histology",
]


@dataclass(frozen=True)
class ReconHeadParams:
    """One cross-attention decoder block with a relu feed-forward tail."""

    w_q: np.ndarray         # (d, d)
    w_k: np.ndarray
    w_v: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray      # (1, d)
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    ln_q_gamma: np.ndarray  # queries, before the Q projection
    ln_q_beta: np.ndarray
    ln_s_gamma: np.ndarray  # slots, before the K/V projections
    ln_s_beta: np.ndarray
    ln_f_gamma: np.ndarray  # attended queries, before the feed-forward
    ln_f_beta: np.ndarray

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass(frozen=True)
class PositionTable:
    """One learnable query row per genomic pathway index."""

    table: np.ndarray       # (M_g, d)

    @property
    def m_rows(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]


@dataclass(frozen=True)
class FrozenQueryMap:
    """Random affine map from patch features to queries; never trained."""

    w: np.ndarray           # (d, d)
    b: np.ndarray           # (1, d)


def init_recon_head(rng: np.random.Generator, dim: int) -> ReconHeadParams:
    scale = 1.0 / np.sqrt(dim)

    def mat():
        return (rng.normal(size=(dim, dim)) * scale).astype(np.float32)

    def bias():
        return np.zeros((1, dim), dtype=np.float32)

    def gamma():
        return np.ones((1, dim), dtype=np.float32)

    return ReconHeadParams(
        w_q=mat(), w_k=mat(), w_v=mat(),
        ffn_w1=mat(), ffn_b1=bias(), ffn_w2=mat(), ffn_b2=bias(),
        ln_q_gamma=gamma(), ln_q_beta=bias(),
        ln_s_gamma=gamma(), ln_s_beta=bias(),
        ln_f_gamma=gamma(), ln_f_beta=bias(),
    )


def init_position_table(rng: np.random.Generator, m_rows: int,
                        dim: int) -> PositionTable:
    return PositionTable(
        table=(rng.normal(size=(m_rows, dim)) * 0.5).astype(np.float32))


def init_query_map(rng: np.random.Generator, dim: int) -> FrozenQueryMap:
    scale = 1.0 / np.sqrt(dim)
    return FrozenQueryMap(
        w=(rng.normal(size=(dim, dim)) * scale).astype(np.float32),
        b=np.zeros((1, dim), dtype=np.float32))


# -------------------------------------------------------------- graph builders


def build_decode(g: Graph, head: ReconHeadParams, queries: Node,
                 slots: Node) -> Node:
    """Decode slots at M query positions: pre-norm cross-attention with a
    residual, then a pre-norm feed-forward with a residual.  (M, d)."""
    dim = slots.shape[1]
    if queries.shape[1] != dim:
        raise ValueError(
            f"query width {queries.shape[1]} != slot width {dim}")
    nq = g.layer_norm(queries, head.ln_q_gamma, head.ln_q_beta)
    ns = g.layer_norm(slots, head.ln_s_gamma, head.ln_s_beta)
    q = g.matmul(nq, head.w_q)
    k = g.matmul(ns, head.w_k)
    v = g.matmul(ns, head.w_v)
    attn = g.row_softmax(g.scale(g.matmul(q, g.transpose(k)),
                                 1.0 / np.sqrt(dim)))
    attended = g.add(queries, g.matmul(attn, v))
    nf = g.layer_norm(attended, head.ln_f_gamma, head.ln_f_beta)
    hidden = g.relu(g.add(g.matmul(nf, head.ffn_w1), head.ffn_b1))
    ffn = g.add(g.matmul(hidden, head.ffn_w2), head.ffn_b2)
    return g.add(attended, ffn)


def build_recon_genomic(g: Graph, head: ReconHeadParams, positions: Node,
                        slots: Node, target: Node | None = None):
    """Reconstruct genomic features from slots at the position queries.

    Returns (x_hat, loss).  With target given, loss is the mean squared
    error node; without one (imputation) loss is None.  The same builder
    serves the cross-modal path: pass the histology-derived slots instead
    of the genomic ones.
    """
    if target is not None and target.shape[0] != positions.shape[0]:
        raise ValueError(
            f"position table covers {positions.shape[0]} rows, "
            f"target has {target.shape[0]}")
    x_hat = build_decode(g, head, positions, slots)
    if target is None:
        return x_hat, None
    return x_hat, g.squared_error(x_hat, target)


def build_cosine_loss(g: Graph, recon: Node, target: Node):
    """Loss 1 - mean row cosine, plus the cosine node whose zero-norm
    diagnostics (graph.degenerate_rows) flag degenerate rows."""
    cos = g.cosine(recon, target)
    # reduce_sum of a one-element constant builds the 0-d "1" that the
    # 0-d cosine score needs (bare constants are kept at least 1-d)
    one = g.reduce_sum(g.const(np.ones(1)))
    loss = g.add(one, g.scale(cos, -1.0))
    return loss, cos


def build_recon_histology(g: Graph, head: ReconHeadParams,
                          qmap: FrozenQueryMap, bag: Node, slots: Node):
    """Reconstruct patch features from histology slots; queries come from
    the frozen random map of the patches themselves.

    Returns (x_hat, loss, cosine_node).  The query map enters as graph
    constants, so no gradient ever reaches it.
    """
    w = g.const(qmap.w)
    b = g.const(qmap.b)
    queries = g.add(g.matmul(bag, w), b)
    x_hat = build_decode(g, head, queries, slots)
    loss, cos = build_cosine_loss(g, x_hat, bag)
    return x_hat, loss, cos


def build_cross_modal_encode(g: Graph, genomic_params, hist_bag: Node,
                             t_iters: int):
    """Slot attention over the histology bag starting from the genomic
    branch's learned slot initialization.  Returns (slots, alpha) nodes;
    cost is linear in the bag size at fixed slot count."""
    return slot_mod.build_encode(g, genomic_params, hist_bag, t_iters,
                                 mode="deterministic")


# ------------------------------------------------------------ numpy interface


def reconstruct_genomic(slot_matrix: np.ndarray, positions: PositionTable,
                        head: ReconHeadParams,
                        target: np.ndarray | None = None):
    g = Graph()
    h = bind_arrays(g, "head", head, trainable=False)
    pos = g.const(positions.table)
    tgt = None if target is None else g.const(target)
    x_hat, loss = build_recon_genomic(g, h, pos, g.const(slot_matrix), tgt)
    return (x_hat.value.copy(),
            None if loss is None else float(loss.value))


def reconstruct_histology(slot_matrix: np.ndarray, bag_matrix: np.ndarray,
                          qmap: FrozenQueryMap, head: ReconHeadParams):
    """Returns (x_hat, loss, flagged) where flagged lists the indices of
    zero-norm rows whose cosine terms were zeroed out."""
    g = Graph()
    h = bind_arrays(g, "head", head, trainable=False)
    x_hat, loss, cos = build_recon_histology(
        g, h, qmap, g.const(bag_matrix), g.const(slot_matrix))
    return x_hat.value.copy(), float(loss.value), g.degenerate_rows(cos)


def cross_modal_encode(bag_h: FeatureBag, genomic_params,
                       t_iters: int) -> slot_mod.SlotSet:
    """Encode a histology bag with the genomic branch's slot parameters."""
    if bag_h.modality != "histology":
        raise ValueError(f"expected a histology bag, got {bag_h.modality!r}")
    return slot_mod.encode(bag_h.matrix, genomic_params, t_iters,
                           mode="deterministic")


def impute_genomic(bag_h: FeatureBag, genomic_params,
                   positions: PositionTable, head: ReconHeadParams,
                   t_iters: int, steps_trained: int) -> FeatureBag:
    """Genomic surrogate bag decoded from histology; requires parameters
    that have actually been trained (steps_trained >= 1)."""
    if steps_trained < 1:
        raise ValueError("imputation requires trained parameters "
                         f"(steps_trained={steps_trained})")
    sset = cross_modal_encode(bag_h, genomic_params, t_iters)
    x_tilde, _ = reconstruct_genomic(sset.slots, positions, head)
    return FeatureBag(modality="genomic",
                      matrix=x_tilde.astype(np.float32))
