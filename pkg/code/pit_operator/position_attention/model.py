"""
Encoder-Processor-Decoder assembly of the Position-induced
Transformer and its self-attention ablations.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, TypeVar, Union

import numpy as np

from . import attention as att
from . import autodiff as ad
from ._shared.errors import ConfigError, ShapeError
from ._shared.seeds import MODEL_INIT, derive_rng
from .autodiff import Param, Tensor2
from .geometry import Mesh, PairwiseDistances, ReceptiveField, pairwise_sq_dist, quantile_radii

logger = logging.getLogger(__name__)

POSATT = "posatt"
SELFATT_A = "selfatt_a"
SELFATT_B = "selfatt_b"
SELFPOSATT = "selfposatt"
MODEL_VARIANTS = (POSATT, SELFATT_A, SELFATT_B, SELFPOSATT)
ABLATION_VARIANTS = (SELFATT_A, SELFATT_B, SELFPOSATT)

# mesh pairs kept per geometry cache
CACHE_SIZE = 16

T = TypeVar("T")


def _cached(cache: OrderedDict, key: Tuple, build: Callable[[], T]) -> T:
    """Least-recently-used lookup bounded by CACHE_SIZE"""
    if key in cache:
        cache.move_to_end(key)
        return cache[key]
    value = build()
    cache[key] = value
    while len(cache) > CACHE_SIZE:
        cache.popitem(last=False)
    return value


@dataclass
class PiTConfig:
    """
    Architecture of a PiT model.

    ``latent_resolution`` is a grid shape for structured
    input meshes, or a one-element tuple with the number of
    farthest-point samples for point clouds.
    """

    encoding_dim: int = 32
    processor_depth: int = 4
    heads: int = 2
    quantile_encoder: float = 0.1
    quantile_decoder: float = 0.1
    latent_resolution: Tuple[int, ...] = (32,)
    lambda_mode: str = att.TAN
    attention_variant: str = POSATT
    input_channels: int = 1
    output_channels: int = 1
    mlp_hidden: Optional[int] = None
    decoder_processor_block: bool = False
    space_dim: int = 1

    def __post_init__(self):
        self.latent_resolution = tuple(int(n) for n in np.atleast_1d(self.latent_resolution))

    @property
    def hidden_width(self) -> int:
        """Hidden width of the MLPs, d_v unless configured"""
        return self.encoding_dim if self.mlp_hidden is None else self.mlp_hidden

    def validate(self):
        """
        Checks every field.

        Raises
        ------
        ConfigError
            With the name of the first invalid field.
        """
        for key in ("encoding_dim", "heads", "input_channels", "output_channels", "space_dim"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(key, "must be a positive integer")
        if self.processor_depth < 1:
            raise ConfigError("processor_depth", "the Processor needs at least one block")
        if self.encoding_dim % self.heads:
            raise ConfigError(
                "heads", f"encoding_dim {self.encoding_dim} is not divisible by {self.heads} heads"
            )
        for key in ("quantile_encoder", "quantile_decoder"):
            q = getattr(self, key)
            if not (0.0 < q <= 1.0):
                raise ConfigError(key, f"quantile must lie in (0, 1], got {q}")
        if not self.latent_resolution or min(self.latent_resolution) < 1:
            raise ConfigError("latent_resolution", "every entry must be at least 1")
        if self.lambda_mode not in att.LAMBDA_MODES:
            raise ConfigError("lambda_mode", f"expected one of {att.LAMBDA_MODES}")
        if self.attention_variant not in MODEL_VARIANTS:
            raise ConfigError("attention_variant", f"expected one of {MODEL_VARIANTS}")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ConfigError("mlp_hidden", "must be a positive integer")


@dataclass
class Linear:
    """Row-wise fully connected layer"""

    weight: Param
    bias: Param

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, prefix: str) -> "Linear":
        """Uniform fan-in scaled weights and zero bias"""
        bound = 1.0 / np.sqrt(d_in)
        return cls(
            weight=Param(rng.uniform(-bound, bound, (d_in, d_out)), name=f"{prefix}.weight"),
            bias=Param(np.zeros((1, d_out)), name=f"{prefix}.bias"),
        )

    def __call__(self, u: Tensor2) -> Tensor2:
        return ad.linear(u, self.weight, self.bias)

    def params(self) -> List[Param]:
        return [self.weight, self.bias]


@dataclass
class MLP:
    """Two linear layers with a GELU in between"""

    first: Linear
    second: Linear

    @classmethod
    def init(
        cls, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int, prefix: str
    ) -> "MLP":
        return cls(
            first=Linear.init(rng, d_in, d_hidden, f"{prefix}.0"),
            second=Linear.init(rng, d_hidden, d_out, f"{prefix}.1"),
        )

    def __call__(self, u: Tensor2) -> Tensor2:
        return self.second(ad.gelu(self.first(u)))

    def params(self) -> List[Param]:
        return self.first.params() + self.second.params()


@dataclass
class ProcessorBlock:
    """
    h = GELU(Att(U)), U' = GELU(MLP(h) + LINEAR(U)).
    """

    attention: att.AttentionLayer
    mlp: MLP
    linear: Linear

    def __call__(self, u: Tensor2, context: att.AttentionContext) -> Tensor2:
        h = ad.gelu(att.multi_head(u, context, self.attention))
        return ad.gelu(ad.add(self.mlp(h), self.linear(u)))

    def params(self) -> List[Param]:
        return self.attention.params() + self.mlp.params() + self.linear.params()


def _init_block(
    rng: np.random.Generator, config: PiTConfig, variant: str, prefix: str
) -> ProcessorBlock:
    d_v = config.encoding_dim
    return ProcessorBlock(
        attention=att.init_layer(
            rng, variant, d_v, d_v, config.heads, config.lambda_mode, f"{prefix}.attention"
        ),
        mlp=MLP.init(rng, d_v, config.hidden_width, d_v, f"{prefix}.mlp"),
        linear=Linear.init(rng, d_v, d_v, f"{prefix}.linear"),
    )


def layer_variants(model_variant: str) -> Dict[str, str]:
    """
    Attention kernel used by each part of the network.

    Parameters
    ----------
    model_variant: str
        One of posatt, selfatt_a, selfatt_b, selfposatt.

    Returns
    -------
    Dict[str, str]
        Kernel for the encoder, processor, decoder and
        decoder processor block.
    """
    variants = {
        "encoder": att.LOC_POSATT,
        "processor": att.POSATT,
        "decoder": att.LOC_POSATT,
        "decoder_block": att.POSATT,
    }
    if model_variant == SELFATT_A:
        variants = {key: att.SELF_ATT for key in variants}
    elif model_variant == SELFATT_B:
        variants["processor"] = att.SELF_ATT
    elif model_variant == SELFPOSATT:
        variants["processor"] = att.SELF_POSATT
    elif model_variant != POSATT:
        raise ValueError(f"Unknown model variant {model_variant}")
    return variants


@dataclass
class PiTModel:
    """
    Position-induced Transformer.

    The Encoder lifts ``[a(x), x]`` with a linear layer and
    downsamples to the latent mesh with local cross
    position-attention. The Processor stacks global
    position-attention blocks on the latent mesh. The Decoder
    upsamples to the query mesh with local cross
    position-attention and projects with an MLP.
    """

    config: PiTConfig
    latent_mesh: Mesh
    lift: Linear
    encoder_attention: att.AttentionLayer
    blocks: List[ProcessorBlock]
    decoder_attention: att.AttentionLayer
    decoder_block: Optional[ProcessorBlock]
    projection: MLP
    _distances: "OrderedDict[Tuple[str, str], PairwiseDistances]" = field(
        default_factory=OrderedDict, repr=False
    )
    _fields: "OrderedDict[Tuple[str, str, float], ReceptiveField]" = field(
        default_factory=OrderedDict, repr=False
    )
    _nearest: "OrderedDict[Tuple[str, str], np.ndarray]" = field(
        default_factory=OrderedDict, repr=False
    )

    def parameters(self) -> List[Param]:
        """Every Param in canonical order"""
        params = self.lift.params() + self.encoder_attention.params()
        for block in self.blocks:
            params += block.params()
        params += self.decoder_attention.params()
        if self.decoder_block is not None:
            params += self.decoder_block.params()
        return params + self.projection.params()

    def attention_layers(self) -> List[Tuple[str, att.AttentionLayer]]:
        """Named attention layers from input to output"""
        layers = [("Encoder", self.encoder_attention)]
        layers += [(f"Processor {i + 1}", b.attention) for i, b in enumerate(self.blocks)]
        layers.append(("Decoder", self.decoder_attention))
        if self.decoder_block is not None:
            layers.append(("Decoder block", self.decoder_block.attention))
        return layers

    def zero_grad(self):
        """Clears every gradient buffer"""
        for p in self.parameters():
            p.zero_grad()

    def project_constraints(self):
        """Applies the lambda constraints after an optimizer step"""
        for _, layer in self.attention_layers():
            layer.project()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every Param value by canonical name"""
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """
        Overwrites the Param values.

        Raises
        ------
        ValueError
            If a name is missing.

        ShapeError
            If a stored shape differs.
        """
        for p in self.parameters():
            if p.name not in state:
                raise ValueError(f"Missing parameter {p.name} in state")
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"Parameter {p.name}: stored {value.shape}, expected {p.shape}")
            p.value[...] = value
        self.project_constraints()

    def clear_cache(self):
        """Drops the cached distances and receptive fields"""
        self._distances.clear()
        self._fields.clear()
        self._nearest.clear()

    def distances(self, src: Mesh, dst: Mesh) -> PairwiseDistances:
        """Cached D with rows on ``dst`` and columns on ``src``"""
        return _cached(self._distances, (src.key, dst.key), lambda: pairwise_sq_dist(src, dst))

    def receptive_field(self, src: Mesh, dst: Mesh, q: float) -> ReceptiveField:
        """Cached quantile receptive field of D(src -> dst)"""
        key = (src.key, dst.key, float(q))
        return _cached(self._fields, key, lambda: quantile_radii(self.distances(src, dst), q))

    def nearest_source(self, src: Mesh, dst: Mesh) -> np.ndarray:
        """Index of the nearest ``src`` point for every ``dst`` point"""
        return _cached(
            self._nearest,
            (src.key, dst.key),
            lambda: np.argmin(self.distances(src, dst).matrix, axis=1),
        )

    def _context(self, src: Mesh, dst: Mesh, variant: str, q: float) -> att.AttentionContext:
        if variant == att.SELF_ATT:
            query_index = None if src.key == dst.key else self.nearest_source(src, dst)
            return att.AttentionContext(query_index=query_index)
        context = att.AttentionContext(distances=self.distances(src, dst))
        if variant == att.LOC_POSATT:
            context.field = self.receptive_field(src, dst, q)
        return context

    def forward(
        self,
        values: Union[np.ndarray, Tensor2],
        input_mesh: Mesh,
        query_mesh: Mesh,
        tape: Optional[ad.Tape] = None,
    ) -> Tensor2:
        """
        Predicts the output function on ``query_mesh``.

        Parameters
        ----------
        values: Union[np.ndarray, Tensor2]
            Input function values, N_a x d_a or a batch
            B x N_a x d_a.

        input_mesh: Mesh
            Mesh carrying ``values``.

        query_mesh: Mesh
            Mesh where the output is queried.

        tape: Optional[ad.Tape]
            Tape recording the pass. A new one is created
            when None. Default: None

        Returns
        -------
        Tensor2
            N_u x d_u output (B x N_u x d_u for a batch).
        """
        cfg = self.config
        if tape is None:
            tape = values.tape if isinstance(values, Tensor2) else ad.Tape()
        u = values if isinstance(values, Tensor2) else tape.constant(values)

        if u.rows != input_mesh.size:
            raise ShapeError(f"Input has {u.rows} rows, input mesh has {input_mesh.size} points")
        if u.cols != cfg.input_channels:
            raise ShapeError(f"Input has {u.cols} channels, model expects {cfg.input_channels}")
        for mesh in (input_mesh, query_mesh):
            if mesh.dim != cfg.space_dim:
                raise ShapeError(f"Mesh dimension {mesh.dim} differs from {cfg.space_dim}")

        variants = layer_variants(cfg.attention_variant)
        latent = self.latent_mesh

        features = ad.concat_cols([u, tape.constant(input_mesh.points)])
        h = ad.gelu(self.lift(features))
        context = self._context(input_mesh, latent, variants["encoder"], cfg.quantile_encoder)
        h = ad.gelu(att.multi_head(h, context, self.encoder_attention))

        context = self._context(latent, latent, variants["processor"], 1.0)
        for block in self.blocks:
            h = block(h, context)

        context = self._context(latent, query_mesh, variants["decoder"], cfg.quantile_decoder)
        h = ad.gelu(att.multi_head(h, context, self.decoder_attention))
        if self.decoder_block is not None:
            context = self._context(query_mesh, query_mesh, variants["decoder_block"], 1.0)
            h = self.decoder_block(h, context)

        return self.projection(h)

    def predict(self, values: np.ndarray, input_mesh: Mesh, query_mesh: Mesh) -> np.ndarray:
        """Forward pass outside training, returned as an array"""
        return self.forward(values, input_mesh, query_mesh, tape=ad.Tape()).numpy()


def forward(
    model: PiTModel, input_values: np.ndarray, input_mesh: Mesh, query_mesh: Mesh
) -> Tensor2:
    """Module-level alias of ``PiTModel.forward``"""
    return model.forward(input_values, input_mesh, query_mesh)


def build(config: PiTConfig, latent_mesh: Mesh, seed: int = 0) -> PiTModel:
    """
    Creates a PiT model with freshly initialized parameters.

    Parameters
    ----------
    config: PiTConfig
        Architecture.

    latent_mesh: Mesh
        Mesh of the Processor.

    seed: int
        Run seed; the initialization stream is derived from it.
        Default: 0

    Returns
    -------
    PiTModel
        Model ready for training.

    Raises
    ------
    ConfigError
        If the configuration is invalid or the latent mesh
        dimension differs from ``config.space_dim``.
    """
    config.validate()
    if latent_mesh.dim != config.space_dim:
        raise ConfigError(
            "space_dim", f"latent mesh has dimension {latent_mesh.dim}, expected {config.space_dim}"
        )

    rng = derive_rng(seed, MODEL_INIT)
    variants = layer_variants(config.attention_variant)
    d_v = config.encoding_dim

    lift = Linear.init(rng, config.input_channels + config.space_dim, d_v, "encoder.lift")
    encoder_attention = att.init_layer(
        rng, variants["encoder"], d_v, d_v, config.heads, config.lambda_mode, "encoder.attention"
    )
    blocks = [
        _init_block(rng, config, variants["processor"], f"processor.block{i}")
        for i in range(config.processor_depth)
    ]
    decoder_attention = att.init_layer(
        rng, variants["decoder"], d_v, d_v, config.heads, config.lambda_mode, "decoder.attention"
    )
    decoder_block = None
    if config.decoder_processor_block:
        decoder_block = _init_block(rng, config, variants["decoder_block"], "decoder.block")
    projection = MLP.init(rng, d_v, config.hidden_width, config.output_channels, "decoder.mlp")

    model = PiTModel(
        config=config,
        latent_mesh=latent_mesh,
        lift=lift,
        encoder_attention=encoder_attention,
        blocks=blocks,
        decoder_attention=decoder_attention,
        decoder_block=decoder_block,
        projection=projection,
    )
    logger.info(
        f"Built {config.attention_variant} model with {count_params(model)} parameters "
        f"on a latent mesh of {latent_mesh.size} points"
    )
    return model


def build_ablation(config: PiTConfig, latent_mesh: Mesh, seed: int = 0) -> PiTModel:
    """
    Builds one of the attention ablations: selfatt_a (every
    attention layer content-based), selfatt_b (Processor only)
    or selfposatt (combined attention in the Processor).
    """
    if config.attention_variant not in ABLATION_VARIANTS:
        raise ConfigError(
            "attention_variant",
            f"{config.attention_variant} is not an ablation, expected one of {ABLATION_VARIANTS}",
        )
    return build(config, latent_mesh, seed=seed)


def count_params(model: PiTModel) -> int:
    """Number of trainable scalars"""
    return int(sum(p.size for p in model.parameters() if p.trainable))
