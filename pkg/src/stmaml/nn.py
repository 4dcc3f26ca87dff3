"""MLP blocks, diagonal Gaussians and their KL divergence."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "none": None}

# positivity floor added after the softplus on every std head
STD_FLOOR = 1e-4


@dataclass
class MlpParams:
    """Ordered ``(weight [in x out], bias [out])`` layers.

    Leaves may be numpy arrays (stored parameters) or Tensors (on a tape).
    """

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases differ in length")
        for i in range(1, len(self.weights)):
            if self.weights[i - 1].shape[1] != self.weights[i].shape[0]:
                raise ValueError(
                    f"layer {i}: in-dim {self.weights[i].shape[0]} does not chain "
                    f"with previous out-dim {self.weights[i - 1].shape[1]}"
                )

    @property
    def dims(self) -> list[int]:
        if not self.weights:
            return []
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def __len__(self):
        return len(self.weights)

    def leaves(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_leaves(self, leaves) -> "MlpParams":
        leaves = list(leaves)
        return MlpParams(leaves[0::2], leaves[1::2], self.activation)


def init_params(dims, seed, activation: str = "relu") -> MlpParams:
    """Xavier-uniform weights and zero biases, fully determined by ``seed``."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("dims needs at least an input and an output size")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out)) if d_in + d_out else 0.0
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return MlpParams(weights, biases, activation)


def linear(x: Tensor, w, b) -> Tensor:
    """``x @ w + b`` with the bias repeated over rows."""
    out = ad.matmul(x, w)
    return ad.add(out, ad.broadcast_to(b, out.shape, axis=0))


def mlp_forward(params: MlpParams, x, final_activation: bool = False) -> Tensor:
    """Affine layers with ``params.activation`` between them.

    The last layer is left linear unless ``final_activation`` is set.
    """
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.ndim != 2:
        raise ad.ShapeError(f"mlp_forward: expected a [n x d] input, got {h.shape}")
    act = ACTIVATIONS[params.activation]
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if h.shape[1] != w.shape[0]:
            raise ad.ShapeError(
                f"mlp_forward: layer {i} expects {w.shape[0]} inputs, got {h.shape[1]}"
            )
        h = linear(h, w, b)
        if act is not None and (i < n - 1 or final_activation):
            h = act(h)
    return h


@dataclass
class GaussianDiag:
    mean: Tensor
    std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean {self.mean.shape} and std {self.std.shape} differ in shape")

    @classmethod
    def from_raw(cls, mean: Tensor, raw_std: Tensor) -> "GaussianDiag":
        """Build from an unconstrained std head output via softplus plus a floor."""
        return cls(mean, ad.add(ad.softplus(raw_std), STD_FLOOR))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, x) -> np.ndarray:
        x = np.asarray(x)
        m, s = self.mean.values, self.std.values
        return np.sum(-0.5 * ((x - m) / s) ** 2 - np.log(s) - 0.5 * np.log(2 * np.pi), axis=-1)


def kl_diag_gaussians(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over dimensions."""
    if q.mean.shape != p.mean.shape:
        raise ad.ShapeError(f"kl_diag_gaussians: dimensions {q.mean.shape} and {p.mean.shape} differ")
    var_p = ad.square(p.std)
    num = ad.add(ad.square(q.std), ad.square(ad.sub(q.mean, p.mean)))
    terms = ad.add(
        ad.sub(ad.log(p.std), ad.log(q.std)),
        ad.sub(ad.div(num, ad.mul(var_p, 2.0)), 0.5),
    )
    return ad.sum(terms)


def reparameterize_sample(dist: GaussianDiag, noise) -> Tensor:
    """``mean + std * noise``; gradients reach mean and std but never the noise."""
    noise = np.asarray(noise.values if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.shape != dist.mean.shape:
        raise ad.ShapeError(f"reparameterize_sample: noise {noise.shape} vs mean {dist.mean.shape}")
    return ad.add(dist.mean, ad.mul(dist.std, Tensor(noise)))


# ------------------------------------------------------------- serialization


def _as_array(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def mlp_to_dict(params: MlpParams) -> dict:
    return {
        str(i): {"w": _as_array(w).tolist(), "b": _as_array(b).tolist()}
        for i, (w, b) in enumerate(zip(params.weights, params.biases))
    }


def mlp_from_dict(layers: dict, activation: str = "relu") -> MlpParams:
    keys = sorted(layers, key=int)
    ws, bs = [], []
    for k in keys:
        w = np.asarray(layers[k]["w"], dtype=np.float64)
        b = np.asarray(layers[k]["b"], dtype=np.float64)
        ws.append(w.reshape(len(w), -1) if w.ndim != 2 else w)
        bs.append(b.reshape(-1))
    return MlpParams(ws, bs, activation)


def dump_modules(modules: dict[str, MlpParams]) -> str:
    """Serialize ``{name: MlpParams}`` as ``{name: {layer: {"w", "b"}}}`` JSON."""
    return json.dumps({name: mlp_to_dict(p) for name, p in modules.items()}, sort_keys=True)


def load_modules(text: str, activations: dict[str, str] | None = None) -> dict[str, MlpParams]:
    activations = activations or {}
    raw = json.loads(text)
    return {name: mlp_from_dict(layers, activations.get(name, "relu")) for name, layers in raw.items()}
