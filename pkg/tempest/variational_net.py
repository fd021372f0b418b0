"""
Image-generating encoder-decoder f_w(z) with skip connections.

Weights are stored as variational parameters (mu, rho) with std softplus(rho).
The same network serves all four methods: point mode uses mu directly,
dropout mode masks the input of every convolution, meanfield mode draws
w = mu + softplus(rho) * eps on every forward pass.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from tempest import tensor_engine as te
from tempest.errors import InvalidArgumentError, InvalidStateError
from tempest.helpers import substream
from tempest.schema import NetConfig, WeightMode
from tempest.tensor_engine import Tensor

logger = logging.getLogger(__name__)

KERNEL_SIZE = 3


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    @property
    def pad(self) -> int:
        return self.kernel // 2

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def n_params(self) -> int:
        return self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels


@dataclass
class VariationalParams:
    """Per-weight means and softplus-parameterized stds, keyed by parameter name."""

    mode: WeightMode
    mu: Dict[str, Tensor] = field(default_factory=dict)
    rho: Dict[str, Tensor] = field(default_factory=dict)

    def names(self) -> List[str]:
        return list(self.mu)

    def sigma(self, name: str) -> Tensor:
        return self.rho[name].softplus()

    def trainable(self) -> List[Tensor]:
        """Tensors the optimizer updates in the current mode."""
        params = list(self.mu.values())
        if self.mode == WeightMode.MEANFIELD:
            params += list(self.rho.values())
        return params

    def n_weights(self) -> int:
        return sum(t.size for t in self.mu.values())


@dataclass(frozen=True)
class NoiseInput:
    """The fixed network input z, drawn once from U(0, 0.1)."""

    data: np.ndarray

    @classmethod
    def create(cls, channels: int, height: int, width: int, seed: int) -> "NoiseInput":
        rng = substream(seed, "noise-input")
        z = rng.uniform(0.0, 0.1, size=(1, channels, height, width))
        z.setflags(write=False)
        return cls(z)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def tensor(self) -> Tensor:
        return Tensor(self.data)


@dataclass
class NetOutput:
    x_hat: Tensor
    neg_log_s2: Optional[Tensor] = None

    def image(self) -> np.ndarray:
        return self.x_hat.data[0, 0]

    def variance(self) -> Optional[np.ndarray]:
        """sigma^2 = exp(-output); only materialized for reporting."""
        if self.neg_log_s2 is None:
            return None
        return np.exp(-self.neg_log_s2.data[0, 0])


def layer_specs(cfg: NetConfig) -> List[LayerSpec]:
    """Enumerate every convolution of the architecture in forward order."""
    specs: List[LayerSpec] = []
    in_ch = cfg.in_channels
    for level in range(cfg.depth):
        specs.append(LayerSpec(f"skip{level}", in_ch, cfg.skip_channels, 1))
        specs.append(LayerSpec(f"down{level}a", in_ch, cfg.channels, KERNEL_SIZE, stride=2))
        specs.append(LayerSpec(f"down{level}b", cfg.channels, cfg.channels, KERNEL_SIZE))
        in_ch = cfg.channels
    for level in reversed(range(cfg.depth)):
        specs.append(LayerSpec(f"up{level}a", cfg.channels + cfg.skip_channels, cfg.channels, KERNEL_SIZE))
        specs.append(LayerSpec(f"up{level}b", cfg.channels, cfg.channels, 1))
    specs.append(LayerSpec("head", cfg.channels, cfg.out_channels, 1))
    return specs


class VariationalNet:
    def __init__(self, cfg: NetConfig, params: VariationalParams):
        self.cfg = cfg
        self.params = params
        self.specs = {spec.name: spec for spec in layer_specs(cfg)}

    @property
    def mode(self) -> WeightMode:
        return self.params.mode

    def n_params(self) -> int:
        return self.params.n_weights()

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.params.mu[n].data.ravel() for n in self.params.names()])


def build_net(cfg: NetConfig, seed: int, mode: WeightMode = WeightMode.MEANFIELD) -> VariationalNet:
    """
    Initialize a network deterministically from a seed.

    Means follow N(0, 2 / fan_in) (biases start at 0); rho is set so that
    softplus(rho) equals ``cfg.sigma_init``.

    Args:
        cfg: Architecture
        seed: Run seed; the "net-init" substream is used
        mode: Weight parameterization the network will be trained in

    Returns:
        VariationalNet
    """
    rng = substream(seed, "net-init")
    rho0 = float(np.log(np.expm1(cfg.sigma_init)))
    params = VariationalParams(mode=mode)
    train_rho = mode == WeightMode.MEANFIELD
    for spec in layer_specs(cfg):
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape)
        for name, mu in ((f"{spec.name}.weight", weight), (f"{spec.name}.bias", np.zeros(spec.out_channels))):
            params.mu[name] = Tensor(mu, requires_grad=True)
            params.rho[name] = Tensor(np.full(mu.shape, rho0), requires_grad=train_rho)
    logger.debug("built %s net with %d weights", mode.value, params.n_weights())
    return VariationalNet(cfg, params)


def sample_weights(vp: VariationalParams, eps_seed: int, zero_noise: bool = False) -> Dict[str, Tensor]:
    """
    Reparameterized draw w = mu + softplus(rho) * eps with eps ~ N(0, I).

    Args:
        vp: Variational parameters in meanfield mode
        eps_seed: Seed of this draw
        zero_noise: Force eps = 0

    Returns:
        Mapping of parameter name to sampled weight tensor (differentiable in mu and rho)
    """
    if vp.mode != WeightMode.MEANFIELD:
        raise InvalidStateError(f"weights are only sampled in meanfield mode, not {vp.mode.value}")
    rng = np.random.default_rng(eps_seed)
    weights = {}
    for name in vp.names():
        mu = vp.mu[name]
        eps = np.zeros(mu.shape) if zero_noise else rng.standard_normal(mu.shape)
        weights[name] = mu + vp.sigma(name) * Tensor(eps)
    return weights


def dropout_mask(shape: Tuple[int, ...], p: float, seed: Union[int, np.random.Generator]) -> np.ndarray:
    """
    Bernoulli(1 - p) keep mask scaled by 1 / (1 - p).

    Args:
        shape: Mask shape
        p: Drop rate in (0, 1)
        seed: Seed or generator

    Returns:
        Array whose expectation is all ones
    """
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError(f"dropout rate must lie in (0, 1), got {p}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def forward(
    net: VariationalNet,
    z: NoiseInput,
    mode: Optional[WeightMode] = None,
    seed: int = 0,
    dropout_p: Optional[float] = None,
) -> NetOutput:
    """
    Run f_w(z).

    Args:
        net: The network
        z: Noise input of shape [1, in_channels, H, W]
        mode: Weight mode for this pass (defaults to the network's mode)
        seed: Seed for weight noise or dropout masks
        dropout_p: Drop rate, required in dropout mode

    Returns:
        NetOutput with x_hat in (0, 1) and, for heteroscedastic nets, -log sigma^2
    """
    mode = mode or net.mode
    cfg = net.cfg
    if z.shape[1] != cfg.in_channels:
        raise InvalidArgumentError(f"noise input has {z.shape[1]} channels, net expects {cfg.in_channels}")
    factor = 2 ** cfg.depth
    if z.shape[2] % factor or z.shape[3] % factor:
        raise InvalidArgumentError(f"spatial size {z.shape[2:]} must be divisible by {factor}")

    if mode == WeightMode.MEANFIELD:
        weights = sample_weights(net.params, seed)
    else:
        weights = dict(net.params.mu)
    mask_rng = None
    if mode == WeightMode.DROPOUT:
        if dropout_p is None:
            raise InvalidArgumentError("dropout mode needs dropout_p")
        mask_rng = np.random.default_rng(seed)

    def conv(name: str, x: Tensor) -> Tensor:
        spec = net.specs[name]
        if mask_rng is not None:
            x = x * Tensor(dropout_mask(x.shape, dropout_p, mask_rng))
        return te.conv2d(x, weights[f"{name}.weight"], weights[f"{name}.bias"], stride=spec.stride, pad=spec.pad)

    x = z.tensor()
    skips = []
    for level in range(cfg.depth):
        skips.append(conv(f"skip{level}", x).leaky_relu())
        x = conv(f"down{level}a", x).leaky_relu()
        x = conv(f"down{level}b", x).leaky_relu()
    for level in reversed(range(cfg.depth)):
        x = te.concat([te.upsample_nearest2x(x), skips[level]])
        x = conv(f"up{level}a", x).leaky_relu()
        x = conv(f"up{level}b", x).leaky_relu()
    out = conv("head", x)

    if cfg.heteroscedastic:
        return NetOutput(te.select_channel(out, 0).sigmoid(), te.select_channel(out, 1))
    return NetOutput(out.sigmoid())


def save_checkpoint(net: VariationalNet, path: Union[str, Path]) -> None:
    """
    Write a JSON header line followed by little-endian float64 mu and rho values.
    """
    names = net.params.names()
    header = {
        "mode": net.mode.value,
        "config": net.cfg.model_dump(),
        "layers": [{"name": n, "shape": list(net.params.mu[n].shape)} for n in names],
    }
    payload = b"".join(
        np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        for n in names
        for t in (net.params.mu[n], net.params.rho[n])
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(json.dumps(header).encode("utf-8") + b"\n" + payload)


def load_checkpoint(path: Union[str, Path]) -> VariationalNet:
    raw = Path(path).read_bytes()
    head, payload = raw.split(b"\n", 1)
    header = json.loads(head)
    cfg = NetConfig(**header["config"])
    mode = WeightMode(header["mode"])
    values = np.frombuffer(payload, dtype="<f8")
    params = VariationalParams(mode=mode)
    offset = 0
    for layer in header["layers"]:
        shape = tuple(layer["shape"])
        size = int(np.prod(shape))
        mu = values[offset:offset + size].reshape(shape).astype(np.float64)
        rho = values[offset + size:offset + 2 * size].reshape(shape).astype(np.float64)
        offset += 2 * size
        params.mu[layer["name"]] = Tensor(mu, requires_grad=True)
        params.rho[layer["name"]] = Tensor(rho, requires_grad=mode == WeightMode.MEANFIELD)
    if offset != values.size:
        raise InvalidArgumentError(f"{path}: payload has {values.size} values, header describes {offset}")
    return VariationalNet(cfg, params)
