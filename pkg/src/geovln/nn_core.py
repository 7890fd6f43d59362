"""Differentiable building blocks shared by every learned component.

Autodiff is delegated to torch; the formulas themselves are written out here
so that masking and normalization semantics are explicit.  The
finite-difference checker at the bottom is the independent oracle used to
validate every analytic gradient in the package.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

__all__ = [
    "DimensionError",
    "affine",
    "layer_norm",
    "softmax_over_axis",
    "gru_cell",
    "residual_mlp",
    "dropout",
    "cross_entropy",
    "Affine",
    "LayerNorm",
    "GRUCell",
    "ResidualMLP",
    "ParamStore",
    "GradCheckReport",
    "finite_diff_check",
]


class DimensionError(ValueError):
    pass


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"affine: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}"
        )
    y = x @ weight
    if bias is not None:
        if bias.shape[-1] != weight.shape[1]:
            raise DimensionError(
                f"affine: bias shape {tuple(bias.shape)} incompatible with weight shape {tuple(weight.shape)}"
            )
        y = y + bias
    return y


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def softmax_over_axis(x: Tensor, axis: int, mask: Tensor | None = None) -> Tensor:
    """Softmax along ``axis``; masked-out entries get exactly zero weight.

    A position whose entries are all masked produces an all-zero slice
    instead of NaN.
    """
    if not -x.dim() <= axis < x.dim():
        raise IndexError(f"softmax axis {axis} out of range for {x.dim()}-d input")
    if mask is None:
        shift = x.amax(dim=axis, keepdim=True).detach()
        e = torch.exp(x - shift)
        return e / e.sum(dim=axis, keepdim=True)
    mask = torch.broadcast_to(mask, x.shape)
    filled = x.masked_fill(~mask, -math.inf)
    shift = filled.amax(dim=axis, keepdim=True).detach()
    shift = torch.where(torch.isfinite(shift), shift, torch.zeros_like(shift))
    e = torch.exp(filled - shift)
    total = e.sum(dim=axis, keepdim=True)
    return e / torch.where(total > 0, total, torch.ones_like(total))


def gru_cell(state: Tensor, inputs: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """One GRU step.  ``params`` holds ``w_z, b_z, w_r, b_r, w_h, b_h``.

    Gate weights act on the concatenation ``[inputs, state]`` and have shape
    ``(d_in + d_h, d_h)``.
    """
    d_h = state.shape[-1]
    expected = inputs.shape[-1] + d_h
    for name in ("w_z", "w_r", "w_h"):
        if tuple(params[name].shape) != (expected, d_h):
            raise DimensionError(
                f"gru_cell: {name} shape {tuple(params[name].shape)} does not fit "
                f"inputs {tuple(inputs.shape)} and state {tuple(state.shape)}"
            )
    joined = torch.cat([inputs, state], dim=-1)
    z = torch.sigmoid(affine(joined, params["w_z"], params["b_z"]))
    r = torch.sigmoid(affine(joined, params["w_r"], params["b_r"]))
    candidate = torch.tanh(affine(torch.cat([inputs, r * state], dim=-1), params["w_h"], params["b_h"]))
    return (1.0 - z) * state + z * candidate


def residual_mlp(x: Tensor, params: Mapping[str, Tensor], eps: float = 1e-6, activation: str = "relu") -> Tensor:
    """``MLP(LN(x))``; the caller adds the residual."""
    h = layer_norm(x, params["ln_gain"], params["ln_bias"], eps)
    h = affine(h, params["w1"], params["b1"])
    h = _activate(h, activation)
    return affine(h, params["w2"], params["b2"])


def _activate(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return torch.relu(x)
    if name == "gelu":
        return torch.nn.functional.gelu(x)
    if name == "tanh":
        return torch.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


def dropout(x: Tensor, rate: float, training: bool, rng: torch.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype, device=x.device) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def cross_entropy(probs: Tensor, target: int | Tensor, floor: float = 1e-12) -> Tensor:
    """``-log p[target]`` along the last axis, clamped at ``floor``."""
    if isinstance(target, int):
        p = probs[..., target]
    else:
        p = probs.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return -torch.log(p.clamp_min(floor))


# --------------------------------------------------------------------------
# module wrappers


def _uniform(shape: tuple[int, ...], bound: float, gen: torch.Generator | None) -> nn.Parameter:
    t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * bound
    return nn.Parameter(t.to(torch.get_default_dtype()))


class Affine(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, gen: torch.Generator | None = None):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = _uniform((d_in, d_out), bound, gen)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class GRUCell(nn.Module):
    def __init__(self, d_in: int, d_h: int, gen: torch.Generator | None = None):
        super().__init__()
        bound = 1.0 / math.sqrt(d_h)
        for gate in ("z", "r", "h"):
            setattr(self, f"w_{gate}", _uniform((d_in + d_h, d_h), bound, gen))
            setattr(self, f"b_{gate}", nn.Parameter(torch.zeros(d_h)))

    def gate_params(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in ("w_z", "b_z", "w_r", "b_r", "w_h", "b_h")}

    def forward(self, state: Tensor, inputs: Tensor) -> Tensor:
        return gru_cell(state, inputs, self.gate_params())


class ResidualMLP(nn.Module):
    """Two affine layers with one nonlinearity behind a layer norm."""

    def __init__(
        self,
        d_in: int,
        d_hidden: int | None = None,
        d_out: int | None = None,
        eps: float = 1e-6,
        activation: str = "relu",
        gen: torch.Generator | None = None,
    ):
        super().__init__()
        d_hidden = d_hidden or d_in
        d_out = d_out or d_in
        self.ln_gain = nn.Parameter(torch.ones(d_in))
        self.ln_bias = nn.Parameter(torch.zeros(d_in))
        self.w1 = _uniform((d_in, d_hidden), 1.0 / math.sqrt(d_in), gen)
        self.b1 = nn.Parameter(torch.zeros(d_hidden))
        self.w2 = _uniform((d_hidden, d_out), 1.0 / math.sqrt(d_hidden), gen)
        self.b2 = nn.Parameter(torch.zeros(d_out))
        self.eps = eps
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        params = {n: getattr(self, n) for n in ("ln_gain", "ln_bias", "w1", "b1", "w2", "b2")}
        return residual_mlp(x, params, self.eps, self.activation)


# --------------------------------------------------------------------------
# parameter store and gradient checking


class ParamStore(Mapping[str, Tensor]):
    """Named trainable tensors, iterated in lexicographic path order."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors = {name: tensors[name] for name in sorted(tensors)}

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls(dict(module.named_parameters()))

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def num_scalars(self) -> int:
        return sum(t.numel() for t in self._tensors.values())


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_error < self.tolerance

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            status = "ok" if err < self.tolerance and name not in self.failures else "FAIL"
            out.append(f"{name}\t{err:.3e}\t{status}")
        return out


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f`` with central differences.

    Per parameter path the error is
    ``max|g_analytic - g_numeric| / (abs_floor + max(|g_analytic|, |g_numeric|))``
    with maxima taken over the tensor's elements.
    """
    report = GradCheckReport(tolerance=tolerance)
    names = list(params)
    tensors = [params[n] for n in names]
    value = f(params)
    if not torch.isfinite(value):
        report.failures.extend(names)
        report.errors.update({n: math.inf for n in names})
        return report
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    with torch.no_grad():
        for name, tensor, grad in zip(names, tensors, grads):
            analytic = torch.zeros_like(tensor) if grad is None else grad.detach().clone()
            numeric = torch.zeros_like(tensor)
            flat = tensor.view(-1)
            num_flat = numeric.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                up = f(params).item()
                flat[i] = original - step
                down = f(params).item()
                flat[i] = original
                num_flat[i] = (up - down) / (2.0 * step)
            if not (torch.isfinite(analytic).all() and torch.isfinite(numeric).all()):
                report.failures.append(name)
                report.errors[name] = math.inf
                continue
            diff = (analytic - numeric).abs().max().item()
            scale = max(analytic.abs().max().item(), numeric.abs().max().item())
            report.errors[name] = diff / (abs_floor + scale)
            if report.errors[name] >= tolerance:
                report.failures.append(name)
    return report
