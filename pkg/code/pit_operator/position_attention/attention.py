"""
Position-attention kernels.

Global (PosAtt), cross (CroPosAtt) and local (LocPosAtt)
position-attention, multi-head assembly, the two lambda
reparametrizations, and the content-based variants used by the
ablation models (SelfAtt and the combined SelfPosAtt).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from ._shared.errors import ShapeError
from .autodiff import Param, Tensor2
from .geometry import PairwiseDistances, ReceptiveField

logger = logging.getLogger(__name__)

SQUARE = "square"
TAN = "tan"
LAMBDA_MODES = (SQUARE, TAN)

TAN_UPPER = np.pi / 2.0 - 1e-4

POSATT = "posatt"
CRO_POSATT = "cro-posatt"
LOC_POSATT = "loc-posatt"
SELF_ATT = "self-att"
SELF_POSATT = "self-posatt"
VARIANTS = (POSATT, CRO_POSATT, LOC_POSATT, SELF_ATT, SELF_POSATT)


class LambdaParam:
    """
    Non-negative attention rate lambda.

    In "square" mode lambda = raw**2. In "tan" mode
    lambda = tan(raw) with raw kept inside [0, pi/2 - 1e-4]
    by ``project`` after every optimizer step.
    """

    def __init__(self, raw: float, mode: str = TAN, name: str = "lambda"):
        if mode not in LAMBDA_MODES:
            raise NotImplementedError(f"Lambda mode {mode} not currently implemented.")
        self.mode = mode
        self.raw = Param(raw, name=name)
        self.project()

    @classmethod
    def from_effective(cls, value: float, mode: str = TAN, name: str = "lambda") -> "LambdaParam":
        """Builds the parameter whose effective value is ``value``"""
        if value < 0:
            raise ValueError(f"Effective lambda must be non-negative, got {value}")
        raw = np.sqrt(value) if mode == SQUARE else np.arctan(value)
        return cls(raw, mode=mode, name=name)

    def project(self):
        """Clamps raw into the admissible interval of tan mode"""
        if self.mode == TAN:
            np.clip(self.raw.value, 0.0, TAN_UPPER, out=self.raw.value)

    def effective_value(self) -> float:
        """Current value of lambda"""
        raw = float(self.raw.value[0, 0])
        if self.mode == SQUARE:
            return raw * raw
        return float(np.tan(np.clip(raw, 0.0, TAN_UPPER)))

    def effective(self, tape: ad.Tape) -> Tensor2:
        """Lambda as a 1x1 node of ``tape``"""
        raw = tape.watch(self.raw)
        if self.mode == SQUARE:
            return ad.square(raw)
        return ad.tan(ad.clip(raw, 0.0, TAN_UPPER))


@dataclass
class AttentionHead:
    """
    Trainable parameters of one head.

    w_q and w_k are present only for the content-based
    variants. ``score_scale`` divides the content scores and
    equals sqrt of the output width of the owning layer.
    """

    lambda_: Optional[LambdaParam]
    w_v: Param
    w_q: Optional[Param] = None
    w_k: Optional[Param] = None
    score_scale: float = 1.0

    def params(self) -> List[Param]:
        """Parameters of the head in canonical order"""
        out = []
        if self.lambda_ is not None:
            out.append(self.lambda_.raw)
        out.append(self.w_v)
        if self.w_q is not None:
            out.extend([self.w_q, self.w_k])
        return out


@dataclass
class AttentionLayer:
    """
    Multi-head attention layer; all heads share the variant
    and the input width.
    """

    heads: List[AttentionHead]
    variant: str
    d_in: int
    d_out: int

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown attention variant {self.variant}")
        if not self.heads:
            raise ValueError("An attention layer needs at least one head")
        if self.d_out % len(self.heads):
            raise ValueError(f"Output width {self.d_out} not divisible by {len(self.heads)} heads")
        for head in self.heads:
            if head.w_v.shape != (self.d_in, self.d_out // len(self.heads)):
                raise ShapeError(f"Head value matrix {head.w_v.shape} does not fit the layer")

    def params(self) -> List[Param]:
        """Parameters of all heads"""
        return [p for head in self.heads for p in head.params()]

    def project(self):
        """Applies the lambda constraint of every head"""
        for head in self.heads:
            if head.lambda_ is not None:
                head.lambda_.project()


@dataclass
class AttentionContext:
    """
    Geometry an attention layer works on.

    ``distances`` rows index the target mesh and columns the
    source mesh. ``field`` restricts LocPosAtt rows and
    ``query_index`` maps every target point to its nearest
    source point for content-based attention across meshes.
    """

    distances: Optional[PairwiseDistances] = None
    field: Optional[ReceptiveField] = None
    query_index: Optional[np.ndarray] = None


def init_head(
    rng: np.random.Generator,
    d_in: int,
    d_head: int,
    d_out: int,
    lambda_mode: Optional[str],
    content: bool,
    prefix: str,
) -> AttentionHead:
    """
    Draws a head: lambda_eff uniform in [0.1, 1.0] and
    uniform fan-in scaled value/query/key matrices.
    """
    lambda_ = None
    if lambda_mode is not None:
        lambda_ = LambdaParam.from_effective(
            float(rng.uniform(0.1, 1.0)), mode=lambda_mode, name=f"{prefix}.lambda"
        )

    bound = 1.0 / np.sqrt(d_in)
    w_v = Param(rng.uniform(-bound, bound, (d_in, d_head)), name=f"{prefix}.value")
    w_q = w_k = None
    if content:
        w_q = Param(rng.uniform(-bound, bound, (d_in, d_head)), name=f"{prefix}.query")
        w_k = Param(rng.uniform(-bound, bound, (d_in, d_head)), name=f"{prefix}.key")

    return AttentionHead(lambda_=lambda_, w_v=w_v, w_q=w_q, w_k=w_k, score_scale=np.sqrt(d_out))


def init_layer(
    rng: np.random.Generator,
    variant: str,
    d_in: int,
    d_out: int,
    heads: int,
    lambda_mode: str,
    prefix: str,
) -> AttentionLayer:
    """
    Creates a multi-head layer of the given variant.
    """
    if heads < 1 or d_out % heads:
        raise ValueError(f"Output width {d_out} not divisible by {heads} heads")

    positional = variant != SELF_ATT
    content = variant in (SELF_ATT, SELF_POSATT)
    layer_heads = [
        init_head(
            rng,
            d_in,
            d_out // heads,
            d_out,
            lambda_mode if positional else None,
            content,
            f"{prefix}.head{i}",
        )
        for i in range(heads)
    ]
    return AttentionLayer(heads=layer_heads, variant=variant, d_in=d_in, d_out=d_out)


def _check_value_input(u: Tensor2, head: AttentionHead):
    if u.cols != head.w_v.shape[0]:
        raise ShapeError(
            f"Features have {u.cols} columns, value matrix expects {head.w_v.shape[0]}"
        )


def _values(u: Tensor2, head: AttentionHead) -> Tensor2:
    return ad.matmul(u, u.tape.watch(head.w_v))


def _positional_scores(tape: ad.Tape, d: PairwiseDistances, head: AttentionHead) -> Tensor2:
    if head.lambda_ is None:
        raise ValueError("Positional attention needs a lambda parameter")
    return ad.scale(ad.mul(head.lambda_.effective(tape), tape.constant(d.matrix)), -1.0)


def _content_scores(
    u: Tensor2, head: AttentionHead, query_index: Optional[np.ndarray] = None
) -> Tensor2:
    if head.w_q is None or head.w_k is None:
        raise ValueError("Content-based attention needs query and key matrices")
    tape = u.tape
    queries_from = u if query_index is None else ad.gather_rows(u, query_index)
    queries = ad.matmul(queries_from, tape.watch(head.w_q))
    keys = ad.matmul(u, tape.watch(head.w_k))
    return ad.scale(ad.matmul(queries, ad.transpose(keys)), 1.0 / head.score_scale)


def pos_att(u: Tensor2, d: PairwiseDistances, head: AttentionHead) -> Tensor2:
    """
    Position-attention, Softmax(-lambda D) U W^V.

    Parameters
    ----------
    u: Tensor2
        Features on the mesh, N x d_in (optionally batched).

    d: PairwiseDistances
        Square N x N distance matrix of the mesh.

    head: AttentionHead
        Parameters.

    Returns
    -------
    Tensor2
        N x d_head output.
    """
    rows, cols = d.shape
    if rows != cols or u.rows != cols:
        raise ShapeError(f"pos_att: features with {u.rows} rows on a {d.shape} distance matrix")
    _check_value_input(u, head)
    weights = ad.softmax_rows(_positional_scores(u.tape, d, head))
    return ad.matmul(weights, _values(u, head))


def cro_pos_att(u: Tensor2, d_cross: PairwiseDistances, head: AttentionHead) -> Tensor2:
    """
    Cross position-attention: interpolates ``u`` from the source
    mesh (columns of ``d_cross``) onto the target mesh (rows).
    """
    if u.rows != d_cross.shape[1]:
        raise ShapeError(
            f"cro_pos_att: features with {u.rows} rows, distances with {d_cross.shape[1]} sources"
        )
    _check_value_input(u, head)
    weights = ad.softmax_rows(_positional_scores(u.tape, d_cross, head))
    return ad.matmul(weights, _values(u, head))


def loc_pos_att(
    u: Tensor2, rf: ReceptiveField, d: PairwiseDistances, head: AttentionHead
) -> Tensor2:
    """
    Local position-attention: row i aggregates only the points
    with D_ik <= r_i^2, with Softmax weights renormalized over
    that receptive field. Works for square and cross distances.

    Raises
    ------
    ValueError
        If a receptive field is empty.
    """
    if rf.mask.shape != d.shape:
        raise ShapeError(f"Receptive field {rf.mask.shape} does not match distances {d.shape}")
    if u.rows != d.shape[1]:
        raise ShapeError(f"loc_pos_att: features with {u.rows} rows, {d.shape[1]} sources")
    if not np.all(rf.mask.any(axis=1)):
        raise ValueError("loc_pos_att: empty receptive field")
    _check_value_input(u, head)
    weights = ad.softmax_rows(_positional_scores(u.tape, d, head), mask=rf.mask)
    return ad.matmul(weights, _values(u, head))


def self_att(u: Tensor2, head: AttentionHead, query_index: Optional[np.ndarray] = None) -> Tensor2:
    """
    Content-based self-attention,
    Softmax(U W^Q (U W^K)^T / sqrt(d_out)) U W^V.

    ``query_index`` selects the rows of ``u`` that form the
    queries, so the output lives on another mesh (one row per
    index) while keys and values stay on the source mesh.
    """
    _check_value_input(u, head)
    weights = ad.softmax_rows(_content_scores(u, head, query_index))
    return ad.matmul(weights, _values(u, head))


def self_pos_att(u: Tensor2, d: PairwiseDistances, head: AttentionHead) -> Tensor2:
    """
    Combined attention,
    Softmax(-lambda D + U W^Q (U W^K)^T / sqrt(d_out)) U W^V.
    """
    rows, cols = d.shape
    if rows != cols or u.rows != cols:
        raise ShapeError(f"self_pos_att: features with {u.rows} rows on a {d.shape} matrix")
    _check_value_input(u, head)
    scores = ad.add(_positional_scores(u.tape, d, head), _content_scores(u, head))
    weights = ad.softmax_rows(scores)
    return ad.matmul(weights, _values(u, head))


def apply_head(
    u: Tensor2, context: AttentionContext, head: AttentionHead, variant: str
) -> Tensor2:
    """Dispatches one head to the kernel of ``variant``"""
    if variant == POSATT:
        return pos_att(u, context.distances, head)
    if variant == CRO_POSATT:
        return cro_pos_att(u, context.distances, head)
    if variant == LOC_POSATT:
        return loc_pos_att(u, context.field, context.distances, head)
    if variant == SELF_ATT:
        return self_att(u, head, query_index=context.query_index)
    if variant == SELF_POSATT:
        return self_pos_att(u, context.distances, head)
    raise ValueError(f"Unknown attention variant {variant}")


def multi_head(u: Tensor2, context: AttentionContext, layer: AttentionLayer) -> Tensor2:
    """
    Concatenation of the per-head outputs along features.

    Returns
    -------
    Tensor2
        N x d_out output.
    """
    if layer.d_out % len(layer.heads):
        raise ValueError(f"Output width {layer.d_out} not divisible by {len(layer.heads)} heads")
    outputs = [apply_head(u, context, head, layer.variant) for head in layer.heads]
    if len(outputs) == 1:
        return outputs[0]
    return ad.concat_cols(outputs)


def interpretable_radius(head: AttentionHead) -> float:
    """
    Radius 1/sqrt(lambda) inside which most of the attention of
    a query point is spent. Returns ``inf`` when lambda is zero
    and ``nan`` for heads without a positional term.
    """
    if head.lambda_ is None:
        return float("nan")
    value = head.lambda_.effective_value()
    if value <= 0.0:
        return float("inf")
    return float(1.0 / np.sqrt(value))


def attention_weights(
    context: AttentionContext,
    head: AttentionHead,
    variant: str,
    features: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Attention matrix of one head, outside any tape.
    Used by reports and row-stochasticity checks.

    Parameters
    ----------
    context: AttentionContext
        Geometry of the layer.

    head: AttentionHead
        Parameters.

    variant: str
        Attention variant.

    features: Optional[np.ndarray]
        N x d_in features, required by the content-based
        variants. Default: None

    Returns
    -------
    np.ndarray
        Row-stochastic target x source weights.
    """
    tape = ad.Tape()
    content = variant in (SELF_ATT, SELF_POSATT)
    if content:
        if features is None:
            raise ValueError(f"Weights of {variant} need the layer features")
        u = tape.constant(np.asarray(features, dtype=np.float64))
        query_index = context.query_index if variant == SELF_ATT else None
        scores = _content_scores(u, head, query_index)
        if variant == SELF_POSATT:
            scores = ad.add(_positional_scores(tape, context.distances, head), scores)
        return ad.softmax_rows(scores).numpy()

    scores = _positional_scores(tape, context.distances, head)
    mask = context.field.mask if variant == LOC_POSATT else None
    return ad.softmax_rows(scores, mask=mask).numpy()
