from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import logging
import torch
import torch.nn.functional as F

from .autodiff import DTYPE, DifferentiableProgram, as_tensor
from .errors import DimensionMismatchError

logger = logging.getLogger("metacv.network")

ACTIVATIONS = {
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
}
OUTPUT_MODES = ("replicate_scalar", "direct")
BOUNDARY_KINDS = ("none", "unit_cube_product")

CHECKPOINT_FORMAT_VERSION = 1


# ============================
# Архитектура
# ============================

@dataclass(frozen=True)
class NetworkSpec:
    """
    Полносвязная сеть, задающая векторное поле ũ: R^d -> R^d.

    - replicate_scalar: скалярный выход умножается на единичную матрицу (копируется в d компонент)
    - direct: выход сразу размерности d
    """
    input_dim: int
    hidden_widths: Tuple[int, ...] = (80, 80)
    output_dim: int = 1
    activation: str = "sigmoid"
    output_mode: str = "replicate_scalar"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if not self.hidden_widths:
            raise ValueError("at least one hidden layer is required")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}', expected one of {sorted(ACTIVATIONS)}")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output_mode '{self.output_mode}', expected one of {OUTPUT_MODES}")
        if self.output_mode == "replicate_scalar" and self.output_dim != 1:
            raise ValueError("output_mode 'replicate_scalar' requires output_dim = 1")
        if self.output_mode == "direct" and self.output_dim != self.input_dim:
            raise ValueError("output_mode 'direct' requires output_dim = input_dim")

    def layer_shapes(self) -> Tuple[Tuple[int, int], ...]:
        """
        Формы матриц весов (выход, вход) слой за слоем.
        """
        widths = (self.input_dim, *self.hidden_widths, self.output_dim)
        return tuple((n_out, n_in) for n_in, n_out in zip(widths[:-1], widths[1:]))


def param_count(spec: NetworkSpec) -> int:
    """
    p — число весов и смещений (без γ₀).
    """
    return sum(n_out * n_in + n_out for n_out, n_in in spec.layer_shapes())


@dataclass(frozen=True)
class BoundaryCorrection:
    """
    none — без поправки; unit_cube_product — δ(x) = ∏ⱼ xⱼ(1−xⱼ), зануляет поле на границе [0,1]^d.
    """
    kind: str = "none"

    def __post_init__(self):
        if self.kind not in BOUNDARY_KINDS:
            raise ValueError(f"unknown boundary correction '{self.kind}', expected one of {BOUNDARY_KINDS}")

    def factor(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "unit_cube_product":
            return torch.prod(x * (1.0 - x), dim=-1)
        return torch.ones((), dtype=x.dtype)


# ============================
# Параметры γ = (γ₀, γ₁:ₚ)
# ============================

@dataclass(frozen=True)
class CVParameters:
    """
    Порядок весов фиксирован: слой за слоем, сначала матрица (по строкам), потом смещения.
    """
    gamma0: float
    weights: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "gamma0", float(self.gamma0))
        object.__setattr__(self, "weights", as_tensor(self.weights).reshape(-1))
        if not bool(torch.isfinite(self.weights).all()) or not torch.isfinite(torch.tensor(self.gamma0)):
            raise ValueError("CV parameters must be finite")

    @property
    def size(self) -> int:
        return self.weights.shape[0] + 1

    def flat(self) -> torch.Tensor:
        return torch.cat([torch.tensor([self.gamma0], dtype=DTYPE), self.weights])

    @classmethod
    def from_flat(cls, gamma: torch.Tensor) -> "CVParameters":
        gamma = as_tensor(gamma).detach().reshape(-1)
        return cls(gamma0=float(gamma[0]), weights=gamma[1:].clone())

    def with_gamma0(self, gamma0: float) -> "CVParameters":
        return CVParameters(gamma0=gamma0, weights=self.weights)

    def check(self, spec: NetworkSpec) -> "CVParameters":
        if self.weights.shape[0] != param_count(spec):
            raise DimensionMismatchError(
                f"expected {param_count(spec)} network weights, got {self.weights.shape[0]}"
            )
        return self

    def to_bytes(self) -> bytes:
        buffer = io.BytesIO()
        torch.save(self.flat(), buffer)
        return buffer.getvalue()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "CVParameters":
        return cls.from_flat(torch.load(io.BytesIO(payload), weights_only=True))


def init_params(spec: NetworkSpec, sigma_init: float = 0.01, gamma0_init: float = 0.0, seed: int = 0) -> CVParameters:
    """
    Веса и смещения ~ N(0, σ²) независимо, γ₀ = gamma0_init. Детерминировано по seed.
    """
    if sigma_init < 0:
        raise ValueError(f"sigma_init must be non-negative, got {sigma_init}")
    generator = torch.Generator().manual_seed(int(seed))
    weights = torch.randn(param_count(spec), generator=generator, dtype=DTYPE) * sigma_init
    return CVParameters(gamma0=gamma0_init, weights=weights)


# ============================
# Векторное поле u(x) = ũ(x)·δ(x)
# ============================

def vector_field(spec: NetworkSpec, weights: torch.Tensor, bc: BoundaryCorrection, x: torch.Tensor) -> torch.Tensor:
    """
    Одна точка x ∈ R^d -> u(x) ∈ R^d. Для батча используем vmap снаружи.
    """
    if x.shape[-1] != spec.input_dim:
        raise DimensionMismatchError(f"network expects inputs of dimension {spec.input_dim}, got {x.shape[-1]}")
    if weights.shape[-1] != param_count(spec):
        raise DimensionMismatchError(f"expected {param_count(spec)} network weights, got {weights.shape[-1]}")

    activation = ACTIVATIONS[spec.activation]
    shapes = spec.layer_shapes()
    hidden = x
    offset = 0
    for k, (n_out, n_in) in enumerate(shapes):
        matrix = weights[offset:offset + n_out * n_in].reshape(n_out, n_in)
        offset += n_out * n_in
        bias = weights[offset:offset + n_out]
        offset += n_out
        hidden = F.linear(hidden, matrix, bias)
        if k < len(shapes) - 1:
            hidden = activation(hidden)

    if spec.output_mode == "replicate_scalar":
        hidden = hidden.expand(spec.input_dim)
    return hidden * bc.factor(x)


def network_program(spec: NetworkSpec, bc: BoundaryCorrection) -> DifferentiableProgram:
    def program(weights: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return vector_field(spec, weights, bc, x)

    return program


# ============================
# Чекпоинты
# ============================

def save_checkpoint(
        path: Union[str, Path],
        spec: NetworkSpec,
        params: CVParameters,
        metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    torch.save словаря {format_version, spec, gamma, metadata}. Восстанавливается бит-в-бит.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"created_at": datetime.now(timezone.utc).isoformat()}
    meta.update(metadata or {})
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": {**asdict(spec), "hidden_widths": list(spec.hidden_widths)},
        "gamma": params.check(spec).flat(),
        "metadata": meta,
    }
    torch.save(payload, path)
    logger.info("Checkpoint written to %s", path)
    return path


@dataclass(frozen=True)
class Checkpoint:
    spec: NetworkSpec
    params: CVParameters
    metadata: Dict[str, Any] = field(default_factory=dict)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"Unsupported checkpoint format in {path}: {payload.get('format_version')}")
    spec = NetworkSpec(**payload["spec"])
    params = CVParameters.from_flat(payload["gamma"]).check(spec)
    return Checkpoint(spec=spec, params=params, metadata=dict(payload.get("metadata", {})))
