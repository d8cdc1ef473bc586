"""
Ranking Models
ListNet linear baseline, ListNet + self-attention and ListNet + regularized self-attention.

The two self-attention variants share one architecture: one document encoder per
active kind, outputs concatenated column-wise and mapped to one score per document
by a linear scoring head. They differ only in whether the objective regularizes the
attention matrices (see objective.total_loss).
"""

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from diff_engine import (
    Tensor,
    add,
    as_tensor,
    concat_cols,
    elu,
    hadamard,
    layer_norm,
    matmul,
    one_minus,
    parameter,
    sigmoid,
    transpose,
)
from letor_data import QueryGroup

logger = logging.getLogger(__name__)

# Encoder kinds in canonical concatenation order
ENCODER_KINDS: Tuple[str, ...] = ("+", ">", "-", "<")

# File- and parameter-name friendly spelling of each kind
KIND_NAMES: Dict[str, str] = {"+": "plus", ">": "gt", "-": "minus", "<": "lt"}

VARIANTS: Tuple[str, ...] = ("listnet", "listnet_sa", "listnet_rsa")

# Highway gates start biased toward carrying their input through
GATE_BIAS_INIT = -1.0

# Order in which encoder sublayers are applied; stored in every checkpoint
SUBLAYER_ORDER = "ff1>layer_norm>elu>highway1|attention>highway2|ff2>layer_norm>elu>highway3"

ParamValue = Union[np.ndarray, Tensor]


class ModelConfigError(ValueError):
    """Raised for an invalid model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a scorer; d is the input feature count, d_h the hidden width."""

    d: int
    d_h: int = 64
    encoders: Tuple[str, ...] = ENCODER_KINDS
    seed: int = 0
    variant: str = "listnet_rsa"
    attention_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "encoders", canonical_encoders(self.encoders))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d < 1:
            raise ModelConfigError(f"feature count d must be >= 1, got {self.d}")
        if self.d_h < 1:
            raise ModelConfigError(f"hidden width d_h must be >= 1, got {self.d_h}")
        if self.variant != "listnet" and not self.encoders:
            raise ModelConfigError(f"variant {self.variant} needs at least one active encoder")
        if self.attention_weight < 0:
            raise ModelConfigError(f"attention_weight must be >= 0, got {self.attention_weight}")

    @property
    def uses_encoders(self) -> bool:
        return self.variant != "listnet"

    @property
    def regularized(self) -> bool:
        return self.variant == "listnet_rsa"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "d": self.d,
            "d_h": self.d_h,
            "encoders": "".join(self.encoders),
            "seed": self.seed,
            "variant": self.variant,
            "attention_weight": self.attention_weight,
            "sublayer_order": SUBLAYER_ORDER,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        order = data.get("sublayer_order", SUBLAYER_ORDER)
        if order != SUBLAYER_ORDER:
            raise ModelConfigError(f"unsupported encoder sublayer order {order!r}")
        return cls(
            d=int(data["d"]),
            d_h=int(data["d_h"]),
            encoders=tuple(data["encoders"]),
            seed=int(data["seed"]),
            variant=str(data["variant"]),
            attention_weight=float(data.get("attention_weight", 1.0)),
        )


def canonical_encoders(kinds) -> Tuple[str, ...]:
    """Validate an encoder subset and return it in canonical order."""
    kinds = tuple(kinds)
    unknown = [k for k in kinds if k not in ENCODER_KINDS]
    if unknown:
        raise ModelConfigError(f"unknown encoder kind(s) {unknown}; expected a subset of {ENCODER_KINDS}")
    if len(set(kinds)) != len(kinds):
        raise ModelConfigError(f"duplicate encoder kinds in {kinds}")
    return tuple(k for k in ENCODER_KINDS if k in kinds)


@dataclass
class EncoderParams:
    """
    Parameters of one document encoder.

    Shapes: ff1_W (d, d_h); g1_W and g1_P (d, d_h); every other matrix (d_h, d_h);
    every vector (d_h,). g1_P projects the encoder input onto the hidden width on the
    first highway's carry path.
    """

    ff1_W: ParamValue
    ff1_b: ParamValue
    ln1_gain: ParamValue
    ln1_bias: ParamValue
    g1_W: ParamValue
    g1_b: ParamValue
    g1_P: ParamValue
    W_q: ParamValue
    W_k: ParamValue
    W_v: ParamValue
    g2_W: ParamValue
    g2_b: ParamValue
    ff2_W: ParamValue
    ff2_b: ParamValue
    ln2_gain: ParamValue
    ln2_bias: ParamValue
    g3_W: ParamValue
    g3_b: ParamValue

    @staticmethod
    def shapes(d: int, d_h: int) -> Dict[str, Tuple[int, ...]]:
        return {
            "ff1_W": (d, d_h), "ff1_b": (d_h,),
            "ln1_gain": (d_h,), "ln1_bias": (d_h,),
            "g1_W": (d, d_h), "g1_b": (d_h,), "g1_P": (d, d_h),
            "W_q": (d_h, d_h), "W_k": (d_h, d_h), "W_v": (d_h, d_h),
            "g2_W": (d_h, d_h), "g2_b": (d_h,),
            "ff2_W": (d_h, d_h), "ff2_b": (d_h,),
            "ln2_gain": (d_h,), "ln2_bias": (d_h,),
            "g3_W": (d_h, d_h), "g3_b": (d_h,),
        }

    def items(self) -> Iterator[Tuple[str, ParamValue]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class RsaModel:
    """
    A scorer of any variant.

    listnet uses only listnet_w; the self-attention variants use the encoders of the
    active kinds plus the scoring head (head_w of length len(encoders) * d_h).
    """

    config: ModelConfig
    encoders: Dict[str, EncoderParams] = field(default_factory=dict)
    head_w: Optional[ParamValue] = None
    head_b: Optional[ParamValue] = None
    listnet_w: Optional[ParamValue] = None

    def parameters(self) -> Dict[str, ParamValue]:
        """Flat, ordered mapping of every parameter by its checkpoint name."""
        flat: Dict[str, ParamValue] = {}
        if not self.config.uses_encoders:
            flat["listnet.w"] = self.listnet_w
            return flat
        for kind in self.config.encoders:
            prefix = f"encoder.{KIND_NAMES[kind]}."
            for name, value in self.encoders[kind].items():
                flat[prefix + name] = value
        flat["head.w"] = self.head_w
        flat["head.b"] = self.head_b
        return flat

    def with_parameters(self, flat: Mapping[str, ParamValue]) -> "RsaModel":
        """A model of the same config whose parameters are taken from flat."""
        return model_from_parameters(self.config, flat)

    def bind(self) -> Tuple["RsaModel", Dict[str, Tensor]]:
        """Copy every parameter onto a fresh leaf tensor of a new tape."""
        leaves = {name: parameter(np.asarray(value), name=name)
                  for name, value in self.parameters().items()}
        return self.with_parameters(leaves), leaves

    def num_parameters(self) -> int:
        return int(sum(np.asarray(_data(v)).size for v in self.parameters().values()))


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Expected shape of every named parameter for a config, in parameter order."""
    if not config.uses_encoders:
        return {"listnet.w": (config.d,)}
    shapes: Dict[str, Tuple[int, ...]] = {}
    for kind in config.encoders:
        prefix = f"encoder.{KIND_NAMES[kind]}."
        for name, shape in EncoderParams.shapes(config.d, config.d_h).items():
            shapes[prefix + name] = shape
    shapes["head.w"] = (len(config.encoders) * config.d_h,)
    shapes["head.b"] = ()
    return shapes


def model_from_parameters(config: ModelConfig, flat: Mapping[str, ParamValue]) -> RsaModel:
    expected = parameter_shapes(config)
    missing = [name for name in expected if name not in flat]
    if missing:
        raise ModelConfigError(f"missing parameters: {missing}")
    if not config.uses_encoders:
        return RsaModel(config=config, listnet_w=flat["listnet.w"])
    encoders = {}
    for kind in config.encoders:
        prefix = f"encoder.{KIND_NAMES[kind]}."
        encoders[kind] = EncoderParams(**{
            name: flat[prefix + name] for name in EncoderParams.shapes(config.d, config.d_h)
        })
    return RsaModel(config=config, encoders=encoders,
                    head_w=flat["head.w"], head_b=flat["head.b"])


def _data(value: ParamValue) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else value


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: Tuple[int, ...]) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: Optional[int] = None) -> RsaModel:
    """
    Draw a fresh model.

    Weights are uniform in (-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases are 0,
    highway gate biases -1, layer-norm gains 1. Draws follow parameter order, so a
    seed fixes every bit of the result.

    Args:
        config: architecture
        seed: overrides config.seed when given

    Returns:
        RsaModel holding numpy arrays
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    flat: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "listnet.w":
            flat[name] = _glorot(rng, config.d, 1, shape)
        elif name == "head.w":
            flat[name] = _glorot(rng, shape[0], 1, shape)
        elif leaf in ("g1_b", "g2_b", "g3_b"):
            flat[name] = np.full(shape, GATE_BIAS_INIT)
        elif leaf.startswith("ln") and leaf.endswith("gain"):
            flat[name] = np.ones(shape)
        elif len(shape) == 2:
            flat[name] = _glorot(rng, shape[0], shape[1], shape)
        else:
            flat[name] = np.zeros(shape)
    logger.debug(f"Initialized {config.variant} model with seed {seed}")
    return model_from_parameters(config, flat)


def _features(group_or_features: Union[QueryGroup, np.ndarray, Tensor]) -> Tensor:
    if isinstance(group_or_features, QueryGroup):
        return as_tensor(group_or_features.features)
    return as_tensor(group_or_features)


def listnet_score(weights: ParamValue, group: Union[QueryGroup, np.ndarray]) -> Tensor:
    """ListNet baseline: one linear layer without bias, s = features . w."""
    return matmul(_features(group), weights)


def _highway(transformed: Tensor, carried: Tensor, gate_input: Tensor,
             gate_W: ParamValue, gate_b: ParamValue) -> Tensor:
    # y = g * H(x) + (1 - g) * x with g = sigmoid(x W_g + b_g)
    gate = sigmoid(add(matmul(gate_input, gate_W), gate_b))
    return add(hadamard(gate, transformed), hadamard(one_minus(gate), carried))


def encoder_forward(params: EncoderParams, V: Union[np.ndarray, Tensor]) -> Tuple[Tensor, Tensor]:
    """
    Run one document encoder over an (n, d) document matrix.

    Returns:
        (V_out, sigma): the (n, d_h) representation and the (n, n) attention matrix
    """
    V = as_tensor(V)

    hidden = elu(layer_norm(add(matmul(V, params.ff1_W), params.ff1_b),
                            params.ln1_gain, params.ln1_bias))
    h1 = _highway(hidden, matmul(V, params.g1_P), V, params.g1_W, params.g1_b)

    queries = matmul(h1, params.W_q)
    keys = matmul(h1, params.W_k)
    values = matmul(h1, params.W_v)
    sigma = sigmoid(matmul(queries, transpose(keys)))
    attended = matmul(sigma, values)
    h2 = _highway(attended, h1, h1, params.g2_W, params.g2_b)

    hidden = elu(layer_norm(add(matmul(h2, params.ff2_W), params.ff2_b),
                            params.ln2_gain, params.ln2_bias))
    h3 = _highway(hidden, h2, h2, params.g3_W, params.g3_b)
    return h3, sigma


def rsa_forward(model: RsaModel, group: Union[QueryGroup, np.ndarray]) -> Tuple[Tensor, Dict[str, Tensor]]:
    """
    Score a group with the active document encoders and the scoring head.

    Returns:
        (scores, sigma_map): one score per document and each encoder's attention matrix
    """
    if not model.config.uses_encoders:
        raise ModelConfigError("rsa_forward needs a self-attention variant")
    V = _features(group)
    outputs: List[Tensor] = []
    sigma_map: Dict[str, Tensor] = {}
    for kind in model.config.encoders:
        out, sigma = encoder_forward(model.encoders[kind], V)
        outputs.append(out)
        sigma_map[kind] = sigma
    scores = add(matmul(concat_cols(outputs), model.head_w), model.head_b)
    return scores, sigma_map


def forward(model: RsaModel, group: Union[QueryGroup, np.ndarray]) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Variant dispatch; the ListNet baseline has no attention matrices."""
    if model.config.uses_encoders:
        return rsa_forward(model, group)
    return listnet_score(model.listnet_w, group), {}


def score_group(model: RsaModel, group: Union[QueryGroup, np.ndarray]) -> np.ndarray:
    scores, _ = forward(model, group)
    return scores.numpy()


def with_config(model: RsaModel, **changes) -> RsaModel:
    """Same parameters under a modified config (e.g. toggling regularization)."""
    config = replace(model.config, **changes)
    return model_from_parameters(config, model.parameters())
