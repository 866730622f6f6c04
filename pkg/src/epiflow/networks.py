"""The estimator: convolutional filter -> recurrent summary -> conditional coupling flow.

All three parts are trained jointly by minimizing the negative log posterior
density of standardized unconstrained parameters under the flow.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Conv1D, Dense, LSTM, Module, Tensor
from .autodiff.tensor import default_dtype
from .simcore import make_rng

INPUT_TRANSFORMS = ("log1p", "identity")


@dataclass(frozen=True)
class NetworkConfig:
    n_params: int
    n_channels: int
    kernel_widths: tuple[int, ...] = (1, 3, 5, 7)
    n_filters: int = 8
    filter_blocks: int = 2
    summary_dim: int = 64
    flow_blocks: int = 6
    coupling_units: int = 128
    coupling_layers: int = 2
    clamp: float = 1.9
    input_transform: str = "log1p"
    no_filter_net: bool = False
    no_summary_net: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel_widths", tuple(int(k) for k in self.kernel_widths))
        if self.n_params < 1 or self.n_channels < 1:
            raise ValueError("n_params and n_channels must be positive")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_widths):
            raise ValueError(f"kernel widths must be odd, got {self.kernel_widths}")
        if self.input_transform not in INPUT_TRANSFORMS:
            raise ValueError(f"input_transform must be one of {INPUT_TRANSFORMS}")
        if self.clamp <= 0:
            raise ValueError("clamp must be positive")

    @classmethod
    def for_sir(cls, n_params: int = 5, **kw) -> "NetworkConfig":
        return cls(n_params=n_params, n_channels=kw.pop("n_channels", 1), **kw)

    @classmethod
    def for_seir(cls, n_params: int = 34, n_channels: int = 3, **kw) -> "NetworkConfig":
        kw.setdefault("summary_dim", 128)
        kw.setdefault("flow_blocks", 10)
        return cls(n_params=n_params, n_channels=n_channels, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_widths"] = list(self.kernel_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------ filter
class FilterNet(Module):
    """Stacked blocks of parallel same-padded convolutions at several widths."""

    def __init__(self, n_in: int, rng, kernel_widths=(1, 3, 5, 7), n_filters: int = 8, n_blocks: int = 2):
        self.blocks = []
        width_in = n_in
        for _ in range(n_blocks):
            self.blocks.append([Conv1D(k, width_in, n_filters, rng) for k in kernel_widths])
            width_in = n_filters * len(kernel_widths)
        self.n_out = width_in

    def named_parameters(self, prefix: str = ""):
        for b, block in enumerate(self.blocks):
            for j, conv in enumerate(block):
                yield from conv.named_parameters(f"{prefix}blocks.{b}.{j}.")

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = ad.elu(ad.concat([conv(x) for conv in block], axis=-1))
        return x


def filter_forward(net: FilterNet, x) -> Tensor:
    return net(ad.as_tensor(x))


# ----------------------------------------------------------------- summary
class SummaryNet(Module):
    """LSTM over time; the final hidden state is the summary vector."""

    def __init__(self, n_in: int, hidden: int, rng):
        self.lstm = LSTM(n_in, hidden, rng)
        self.n_out = hidden

    def __call__(self, x: Tensor) -> Tensor:
        return self.lstm(x)


class MeanPool(Module):
    """Stand-in summary for the summary-network ablation: time average."""

    def __init__(self, n_in: int):
        self.n_out = n_in

    def __call__(self, x: Tensor) -> Tensor:
        return ad.mean(x, axis=1)


def summarize(net, xf) -> Tensor:
    xf = ad.as_tensor(xf)
    squeeze = xf.ndim == 2
    y = net(ad.reshape(xf, (1,) + xf.shape) if squeeze else xf)
    return ad.reshape(y, y.shape[1:]) if squeeze else y


# -------------------------------------------------------------------- flow
class CouplingBlock(Module):
    """Affine coupling: permute, keep one part, scale-and-shift the other.

    The conditioning part and the summary vector feed a small ELU network
    that outputs ``log_scale`` (soft-clamped) and ``shift`` for the
    transformed part. The result is written back in the original order.
    """

    def __init__(self, n_params: int, cond_dim: int, n_keep: int, perm: np.ndarray, rng,
                 units: int = 128, layers: int = 2, clamp: float = 1.9):
        self.perm = np.asarray(perm, dtype=np.intp)
        self.inv_perm = np.argsort(self.perm)
        self.n_keep = n_keep
        self.n_trans = n_params - n_keep
        self.clamp = clamp
        self.hidden = []
        width = n_keep + cond_dim
        for _ in range(layers):
            self.hidden.append(Dense(width, units, rng, activation=ad.elu))
            width = units
        # zero-initialised output: every block starts as the identity map
        self.out = Dense(width, 2 * self.n_trans, rng, zero_init=True)

    def _scale_shift(self, keep: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        h = ad.concat([keep, y], axis=-1)
        for layer in self.hidden:
            h = layer(h)
        raw = self.out(h)
        log_scale = ad.soft_clamp(raw[..., : self.n_trans], self.clamp)
        return log_scale, raw[..., self.n_trans :]

    def forward(self, x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        xp = ad.take(x, self.perm, axis=-1)
        keep, trans = xp[..., : self.n_keep], xp[..., self.n_keep :]
        log_scale, shift = self._scale_shift(keep, y)
        out = trans * ad.exp(log_scale) + shift
        z = ad.take(ad.concat([keep, out], axis=-1), self.inv_perm, axis=-1)
        return z, ad.tsum(log_scale, axis=-1)

    def inverse(self, z: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        zp = ad.take(z, self.perm, axis=-1)
        keep, out = zp[..., : self.n_keep], zp[..., self.n_keep :]
        log_scale, shift = self._scale_shift(keep, y)
        trans = (out - shift) * ad.exp(-log_scale)
        x = ad.take(ad.concat([keep, trans], axis=-1), self.inv_perm, axis=-1)
        return x, -ad.tsum(log_scale, axis=-1)


class CouplingFlow(Module):
    """Conditional invertible map R^P -> R^P built from affine coupling blocks.

    Block k keeps ceil(P/2) coordinates when k is even and floor(P/2) when k
    is odd, after a fixed random permutation, so every coordinate is
    transformed repeatedly.
    """

    def __init__(self, n_params: int, cond_dim: int, n_blocks: int, rng, units: int = 128,
                 layers: int = 2, clamp: float = 1.9):
        self.n_params = n_params
        self.blocks = []
        for k in range(n_blocks):
            n_keep = (n_params + 1) // 2 if k % 2 == 0 else n_params // 2
            if n_params == 1:
                n_keep = 0
            perm = rng.permutation(n_params)
            self.blocks.append(CouplingBlock(n_params, cond_dim, n_keep, perm, rng, units, layers, clamp))

    def forward(self, theta_u: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        z = ad.as_tensor(theta_u)
        logdet = None
        for block in self.blocks:
            z, ld = block.forward(z, y)
            logdet = ld if logdet is None else logdet + ld
        if logdet is None:
            logdet = Tensor(np.zeros(z.shape[:-1]))
        return z, logdet

    def inverse(self, z: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        x = ad.as_tensor(z)
        logdet = None
        for block in reversed(self.blocks):
            x, ld = block.inverse(x, y)
            logdet = ld if logdet is None else logdet + ld
        if logdet is None:
            logdet = Tensor(np.zeros(x.shape[:-1]))
        return x, logdet


def flow_forward(flow: CouplingFlow, theta_u, y) -> tuple[np.ndarray, np.ndarray]:
    with ad.no_grad():
        z, logdet = flow.forward(ad.as_tensor(theta_u, flow_dtype(flow)), ad.as_tensor(y, flow_dtype(flow)))
    return z.data, logdet.data


def flow_inverse(flow: CouplingFlow, z, y, return_logdet: bool = False):
    """Exact inverse of :func:`flow_forward`; raises on non-finite output."""
    with ad.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        theta, logdet = flow.inverse(ad.as_tensor(z, flow_dtype(flow)), ad.as_tensor(y, flow_dtype(flow)))
    if not np.all(np.isfinite(theta.data)):
        raise ad.NonFiniteError("flow inverse produced non-finite values (diverged weights?)")
    return (theta.data, logdet.data) if return_logdet else theta.data


def flow_dtype(module: Module):
    params = module.parameters()
    return params[0].dtype if params else default_dtype()


# ---------------------------------------------------------------- pipeline
class Amortizer(Module):
    """Filter, summary and flow networks with their input preprocessing."""

    def __init__(self, config: NetworkConfig, dtype=None):
        self.config = config
        rng = make_rng(config.seed)
        with ad.precision(dtype or default_dtype()):
            n_in = config.n_channels
            if config.no_filter_net:
                self.filter = None
            else:
                self.filter = FilterNet(n_in, rng, config.kernel_widths, config.n_filters, config.filter_blocks)
                n_in = self.filter.n_out
            if config.no_summary_net:
                self.summary = MeanPool(n_in)
            else:
                self.summary = SummaryNet(n_in, config.summary_dim, rng)
            self.flow = CouplingFlow(config.n_params, self.summary.n_out, config.flow_blocks, rng,
                                     config.coupling_units, config.coupling_layers, config.clamp)

    @property
    def dtype(self):
        return flow_dtype(self)

    def named_parameters(self, prefix: str = ""):
        if self.filter is not None:
            yield from self.filter.named_parameters(prefix + "filter.")
        yield from self.summary.named_parameters(prefix + "summary.")
        yield from self.flow.named_parameters(prefix + "flow.")

    def preprocess(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.config.n_channels:
            raise ValueError(f"expected series with {self.config.n_channels} channels, got shape {x.shape}")
        if x.shape[1] < 1:
            raise ValueError("series must have at least one time step")
        if self.config.input_transform == "log1p":
            x = np.log1p(np.maximum(x, 0.0))
        return x.astype(self.dtype)

    def embed(self, x) -> Tensor:
        """Summary vectors (B, H) for raw series (B, T, C) or (T, C)."""
        h = Tensor(self.preprocess(x), dtype=self.dtype)
        if self.filter is not None:
            h = self.filter(h)
        return self.summary(h)

    def forward(self, theta_u, x) -> tuple[Tensor, Tensor]:
        y = self.embed(x)
        return self.flow.forward(Tensor(theta_u, dtype=self.dtype), y)

    def log_density(self, theta_u, x) -> np.ndarray:
        """log q(theta_u | x) including the Gaussian normalizing constant."""
        with ad.no_grad():
            z, logdet = self.forward(theta_u, x)
        p = z.shape[-1]
        return -0.5 * np.sum(z.data.astype(np.float64) ** 2, axis=-1) - 0.5 * p * np.log(2 * np.pi) + logdet.data

    def sample(self, x, m: int, rng) -> np.ndarray:
        """``m`` draws of standardized unconstrained parameters for one series."""
        if m < 1:
            raise ValueError("m must be >= 1")
        rng = make_rng(rng)
        with ad.no_grad():
            y = self.embed(x)
        if y.shape[0] != 1:
            raise ValueError("sample expects a single series")
        z = rng.standard_normal((m, self.config.n_params))
        y_rep = np.broadcast_to(y.data, (m, y.shape[1]))
        return flow_inverse(self.flow, z, y_rep).astype(np.float64)

    def sample_batch(self, x, m: int, rng) -> np.ndarray:
        """Draws for many series at once: returns (B, m, P)."""
        rng = make_rng(rng)
        with ad.no_grad():
            y = self.embed(x).data
        b = y.shape[0]
        z = rng.standard_normal((b * m, self.config.n_params))
        out = flow_inverse(self.flow, z, np.repeat(y, m, axis=0))
        return out.reshape(b, m, -1).astype(np.float64)

    # ------------------------------------------------------------ weights
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ValueError(f"weight names differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def nll_loss(amortizer: Amortizer, theta_u, x) -> Tensor:
    """Mean over the batch of 0.5 * ||z||^2 - log|det J| (constant dropped)."""
    theta_u = np.asarray(theta_u)
    if theta_u.shape[0] == 0:
        raise ValueError("empty batch")
    z, logdet = amortizer.forward(theta_u, x)
    per_item = 0.5 * ad.tsum(ad.square(z), axis=-1) - logdet
    return ad.mean(per_item)


def flow_nll(flow: CouplingFlow, theta_u, y) -> Tensor:
    """The same criterion with a fixed conditioning vector instead of a series."""
    z, logdet = flow.forward(ad.as_tensor(theta_u, flow_dtype(flow)), ad.as_tensor(y, flow_dtype(flow)))
    return ad.mean(0.5 * ad.tsum(ad.square(z), axis=-1) - logdet)
