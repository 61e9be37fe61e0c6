"""
ConvTransformer Service - Network assembly, forward pass and parameter accounting

Pipeline for one batch:
    LFE (strided 3-D conv per kt, BatchNorm, ELU, reshape to patches)
    -> CT module x 2 (multi-head region attention, then convolutional feature expansion)
    -> convolutional encoder (patch axis collapsed)
    -> classifier (two hidden layers with dropout + ReLU)
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core import functional as F
from app.core.exceptions import ShapeError
from app.core.functional import BatchNormState, Mode
from app.core.tensor import Tensor, concat, no_grad
from app.models.presets import REFERENCE_PARAMETER_COUNTS
from app.models.schemas import ArchitectureSummary, ModuleSummary, VariantConfig

logger = logging.getLogger(__name__)

CT_MODULES = (1, 2)
DROPOUT_LAYER_IDS = (1, 2)

ARCHITECTURE_ASSUMPTIONS = [
    "CT-Wide uses D = C / H = 6 so that C = H * D = 72 holds",
    "per-head q/k/v point-wise projections without bias; no output projection after concatenation",
    "CFE output is residually added to its input before the final BatchNorm",
    "CFE point-wise projection has no bias (a BatchNorm follows)",
    "convolutional encoder consumes the whole patch axis with same temporal padding: F x 1 x T",
    "classifier input is F * T, flattened channel-major",
    "BatchNorm counts gamma and beta as trainable; running statistics are buffers",
]


@dataclass
class HeadParams:
    """Point-wise projection kernels of one attention head, each D x C x 1 x 1."""
    query: Tensor
    key: Tensor
    value: Tensor


@dataclass
class ModelParameters:
    """Named tensors and BatchNorm layers for one network instance."""

    config: VariantConfig
    tensors: Dict[str, Tensor]
    norms: Dict[str, BatchNormState]
    seed: int = 0
    step: int = field(default=0)

    def trainable(self) -> Dict[str, Tensor]:
        """Every learnable tensor in a fixed order (BatchNorm gamma/beta included)."""
        out = dict(self.tensors)
        for name, bn in self.norms.items():
            out[f"{name}.gamma"] = bn.gamma
            out[f"{name}.beta"] = bn.beta
        return out

    def head(self, ct_index: int, h: int) -> HeadParams:
        prefix = f"ct{ct_index}.head{h}"
        return HeadParams(
            query=self.tensors[f"{prefix}.query"],
            key=self.tensors[f"{prefix}.key"],
            value=self.tensors[f"{prefix}.value"],
        )

    def set_mode(self, mode: Mode) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        for bn in self.norms.values():
            bn.mode = mode

    def zero_grad(self) -> None:
        for tensor in self.trainable().values():
            tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Trainable tensors followed by BatchNorm running statistics."""
        state = {name: t.data for name, t in self.trainable().items()}
        for name, bn in self.norms.items():
            state[f"{name}.running_mean"] = bn.running_mean
            state[f"{name}.running_var"] = bn.running_var
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        dtype = self.config.dtype
        expected = self.state_dict()
        missing = set(expected) - set(state)
        if missing:
            raise ShapeError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, tensor in self.trainable().items():
            if state[name].shape != tensor.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {tensor.shape}")
            tensor.data[...] = state[name].astype(dtype)
        for name, bn in self.norms.items():
            bn.running_mean = state[f"{name}.running_mean"].astype(dtype)
            bn.running_var = state[f"{name}.running_var"].astype(dtype)


# ============================================
# CONSTRUCTION
# ============================================

def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype, name: str) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True, name=name)


def _zeros(shape: Tuple[int, ...], dtype, name: str) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def build_variant(cfg: VariantConfig, rng_seed: int = 0) -> ModelParameters:
    """
    Allocate and initialise every tensor for ``cfg``.

    Weights: uniform Kaiming fan-in scaling; biases zero; BatchNorm gamma=1, beta=0.
    Allocation order is fixed, so a seed reproduces identical bytes.
    """
    rng = np.random.default_rng(rng_seed)
    dtype = cfg.dtype
    H, D, C, E, Fc = cfg.heads, cfg.projections, cfg.local_features, cfg.expansions, cfg.final_channels
    km, P, T = cfg.spatial_kernel, cfg.patches, cfg.time_frames
    splits = len(cfg.temporal_kernels)
    tensors: Dict[str, Tensor] = {}
    norms: Dict[str, BatchNormState] = {}

    def add(name: str, shape: Tuple[int, ...], fan_in: Optional[int] = None) -> None:
        tensors[name] = _zeros(shape, dtype, name) if fan_in is None else _uniform(rng, shape, fan_in, dtype, name)

    for kt in cfg.temporal_kernels:
        add(f"lfe.conv.k{kt}.weight", (C // splits, 1, km, km, kt), km * km * kt)
        add(f"lfe.conv.k{kt}.bias", (C // splits,))
    norms["lfe.bn"] = BatchNormState.create(C, dtype, "lfe.bn")

    for ct in CT_MODULES:
        for h in range(H):
            for role in ("query", "key", "value"):
                add(f"ct{ct}.head{h}.{role}", (D, C, 1, 1), C)
        norms[f"ct{ct}.mha.bn"] = BatchNormState.create(C, dtype, f"ct{ct}.mha.bn")
        for kt in cfg.temporal_kernels:
            add(f"ct{ct}.cfe.conv.k{kt}.weight", (E // splits, C, 1, kt), C * kt)
            add(f"ct{ct}.cfe.conv.k{kt}.bias", (E // splits,))
        norms[f"ct{ct}.cfe.bn1"] = BatchNormState.create(E, dtype, f"ct{ct}.cfe.bn1")
        add(f"ct{ct}.cfe.pointwise", (C, E, 1, 1), E)
        norms[f"ct{ct}.cfe.bn2"] = BatchNormState.create(C, dtype, f"ct{ct}.cfe.bn2")

    for kt in cfg.temporal_kernels:
        add(f"encoder.conv.k{kt}.weight", (Fc // splits, C, P, kt), C * P * kt)
        add(f"encoder.conv.k{kt}.bias", (Fc // splits,))
    norms["encoder.bn"] = BatchNormState.create(Fc, dtype, "encoder.bn")

    widths = (cfg.classifier_inputs,) + tuple(cfg.hidden_sizes) + (cfg.num_classes,)
    for i in range(len(widths) - 1):
        add(f"classifier.fc{i + 1}.weight", (widths[i], widths[i + 1]), widths[i])
        add(f"classifier.fc{i + 1}.bias", (widths[i + 1],))

    params = ModelParameters(config=cfg, tensors=tensors, norms=norms, seed=rng_seed)
    logger.info(f"Built CT-{cfg.name} (K={cfg.num_classes}): {count_parameters(params)[0]:,} parameters")
    return params


def sweep_variants(base: VariantConfig, heads: List[int]) -> List[VariantConfig]:
    """Vary H (and C = H * D) while keeping D, E, F and geometry fixed."""
    fields = base.model_dump()
    return [VariantConfig(**{**fields, "name": "custom", "heads": h, "local_features": h * base.projections}) for h in heads]


# ============================================
# FORWARD BUILDING BLOCKS
# ============================================

def lfe_forward(x: Tensor, params: ModelParameters) -> Tensor:
    """B x 1 x M x M x T meshes -> B x C x P x T patch features."""
    cfg = params.config
    if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:4] != (cfg.mesh_size, cfg.mesh_size):
        raise ShapeError(f"LFE expects B x 1 x {cfg.mesh_size} x {cfg.mesh_size} x T, got {x.shape}")
    branches = [
        F.conv3d(
            x,
            params.tensors[f"lfe.conv.k{kt}.weight"],
            params.tensors[f"lfe.conv.k{kt}.bias"],
            spatial_stride=cfg.spatial_stride,
            temporal_padding=F.same_padding(kt),
        )
        for kt in cfg.temporal_kernels
    ]
    out = F.elu(F.batchnorm(concat(branches, axis=1), params.norms["lfe.bn"]))
    batch, channels, m1, m2, t = out.shape
    return out.reshape(batch, channels, m1 * m2, t)


def attention_head(x: Tensor, head: HeadParams, return_attention: bool = False):
    """
    Scaled dot-product attention between patches.

    q, k, v: B x D x P x T, flattened per patch to B x P x (D*T);
    context = softmax(q k^T / sqrt(D*T)) v, returned as B x D x P x T.
    """
    batch, _, patches, t = x.shape
    d = head.query.shape[0]

    def project(kernel: Tensor) -> Tensor:
        return F.conv_temporal(x, kernel).transpose(0, 2, 1, 3).reshape(batch, patches, d * t)

    q, k, v = project(head.query), project(head.key), project(head.value)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(d * t))
    attention = F.softmax(scores, axis=-1)
    context = (attention @ v).reshape(batch, patches, d, t).transpose(0, 2, 1, 3)
    return (context, attention) if return_attention else context


def _mha(x: Tensor, params: ModelParameters, ct_index: int) -> Tuple[Tensor, List[Tensor], List[Tensor]]:
    cfg = params.config
    if cfg.heads * cfg.projections != x.shape[1]:
        raise ShapeError(f"H*D = {cfg.heads * cfg.projections} does not match {x.shape[1]} channels")
    contexts, attentions = [], []
    for h in range(cfg.heads):
        context, attention = attention_head(x, params.head(ct_index, h), return_attention=True)
        contexts.append(context)
        attentions.append(attention)
    merged = concat(contexts, axis=1)
    return F.batchnorm(merged + x, params.norms[f"ct{ct_index}.mha.bn"]), contexts, attentions


def mha_block(x: Tensor, params: ModelParameters, ct_index: int = 1) -> Tensor:
    """BatchNorm(concat(heads) + x); shape-preserving, no output projection."""
    return _mha(x, params, ct_index)[0]


def cfe_forward(x: Tensor, params: ModelParameters, ct_index: int = 1) -> Tensor:
    """Temporal expansion to E channels, ELU, point-wise back to C, residual BatchNorm."""
    cfg = params.config
    prefix = f"ct{ct_index}.cfe"
    branches = [
        F.conv_temporal(
            x,
            params.tensors[f"{prefix}.conv.k{kt}.weight"],
            params.tensors[f"{prefix}.conv.k{kt}.bias"],
            temporal_padding=F.same_padding(kt),
        )
        for kt in cfg.temporal_kernels
    ]
    expanded = F.elu(F.batchnorm(concat(branches, axis=1), params.norms[f"{prefix}.bn1"]))
    projected = F.conv_temporal(expanded, params.tensors[f"{prefix}.pointwise"])
    return F.batchnorm(projected + x, params.norms[f"{prefix}.bn2"])


def encoder_forward(x: Tensor, params: ModelParameters) -> Tensor:
    """B x C x P x T -> B x F x 1 x T; each kernel spans every channel and patch."""
    cfg = params.config
    batch, channels, patches, t = x.shape
    flat = x.reshape(batch, channels * patches, 1, t)
    branches = []
    for kt in cfg.temporal_kernels:
        weight = params.tensors[f"encoder.conv.k{kt}.weight"]
        kernel = weight.reshape(weight.shape[0], channels * patches, 1, kt)
        branches.append(
            F.conv_temporal(flat, kernel, params.tensors[f"encoder.conv.k{kt}.bias"], temporal_padding=F.same_padding(kt))
        )
    return F.elu(F.batchnorm(concat(branches, axis=1), params.norms["encoder.bn"]))


def classifier_forward(x: Tensor, params: ModelParameters, mode: Mode) -> Tensor:
    cfg = params.config
    out = x.reshape(x.shape[0], -1)
    layers = len(cfg.hidden_sizes) + 1
    for i in range(1, layers + 1):
        out = F.linear(out, params.tensors[f"classifier.fc{i}.weight"], params.tensors[f"classifier.fc{i}.bias"])
        if i < layers:
            rng = F.dropout_generator(params.seed, i, params.step) if mode == "train" else None
            out = F.relu(F.dropout(out, cfg.dropout, mode, rng))
    return out


def model_forward(
    x,
    params: ModelParameters,
    mode: Mode = "eval",
    trace: Optional[Dict[str, Tuple[int, ...]]] = None,
    capture: Optional[Dict[int, List[Tensor]]] = None,
) -> Tensor:
    """
    Full network: B x 1 x M x M x T -> B x K logits.

    ``trace`` receives each stage's output shape; ``capture`` receives the
    per-head contexts of every CT module. Each training call advances the
    dropout counter.
    """
    params.set_mode(mode)
    cfg = params.config
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=cfg.dtype))
    elif x.dtype != cfg.dtype:
        x = Tensor(x.data.astype(cfg.dtype))

    out = lfe_forward(x, params)
    if trace is not None:
        trace["lfe"] = out.shape
    for ct in CT_MODULES:
        out, contexts, _ = _mha(out, params, ct)
        if capture is not None:
            capture[ct] = contexts
        if trace is not None:
            trace[f"ct{ct}.mha"] = out.shape
        out = cfe_forward(out, params, ct)
        if trace is not None:
            trace[f"ct{ct}.cfe"] = out.shape
    out = encoder_forward(out, params)
    if trace is not None:
        trace["encoder"] = out.shape
    logits = classifier_forward(out, params, mode)
    if trace is not None:
        trace["classifier"] = logits.shape
    if mode == "train":
        params.step += 1
    return logits


def collect_head_representations(
    x,
    params: ModelParameters,
    ct_index: int,
    mode: Mode = "eval",
) -> List[np.ndarray]:
    """Per-head contexts (B x D x P x T, before concatenation) of one CT module."""
    if ct_index not in CT_MODULES:
        raise ValueError(f"ct_index must be one of {CT_MODULES}, got {ct_index}")
    capture: Dict[int, List[Tensor]] = {}
    with no_grad():
        model_forward(x, params, mode=mode, capture=capture)
    return [head.data for head in capture[ct_index]]


def predict(params: ModelParameters, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for N inputs, batched."""
    outputs = []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            outputs.append(model_forward(inputs[start:start + batch_size], params, mode="eval").data)
    return np.concatenate(outputs, axis=0) if outputs else np.empty((0, params.config.num_classes))


# ============================================
# PARAMETER ACCOUNTING
# ============================================

def _module_of(name: str) -> str:
    parts = name.split(".")
    if parts[0].startswith("ct"):
        return f"{parts[0]}.{'mha' if parts[1].startswith('head') or parts[1] == 'mha' else 'cfe'}"
    return parts[0]


def count_parameters(params: ModelParameters) -> Tuple[int, Dict[str, int]]:
    """Exact trainable scalar count with a per-module breakdown."""
    breakdown: Dict[str, int] = {}
    for name, tensor in params.trainable().items():
        module = _module_of(name)
        breakdown[module] = breakdown.get(module, 0) + tensor.size
    return sum(breakdown.values()), breakdown


def architecture_summary(cfg: VariantConfig) -> ArchitectureSummary:
    """Module parameter counts and output shapes (per sample) as a JSON-able report."""
    params = build_variant(cfg, rng_seed=0)
    total, breakdown = count_parameters(params)
    C, P, T = cfg.local_features, cfg.patches, cfg.time_frames
    shapes = {"lfe": [C, P, T], "encoder": [cfg.final_channels, 1, T], "classifier": [cfg.num_classes]}
    for ct in CT_MODULES:
        shapes[f"ct{ct}.mha"] = [C, P, T]
        shapes[f"ct{ct}.cfe"] = [C, P, T]
    modules = [ModuleSummary(name=name, parameters=count, output_shape=shapes[name]) for name, count in breakdown.items()]
    reference = REFERENCE_PARAMETER_COUNTS.get(cfg.name) if cfg.num_classes == 72 and cfg.time_frames == 32 else None
    return ArchitectureSummary(
        variant=cfg.name,
        num_classes=cfg.num_classes,
        modules=modules,
        total_parameters=total,
        reference_parameters=reference,
        relative_difference=None if reference is None else (total - reference) / reference,
        assumptions=ARCHITECTURE_ASSUMPTIONS,
    )
