"""Offline, online and round-based hybrid training, plus checkpoint files.

All randomness flows from ``TrainConfig.seed``: one child stream drives prior
draws and simulation, another drives mini-batch selection. Network weights
are initialised from the network config's own seed.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import Adam, CosineDecay, TrainingAborted
from .models import build_model
from .networks import Amortizer, NetworkConfig, nll_loss
from .priors import ParameterSpace
from .simcore import make_rng

MODES = ("offline", "online", "hybrid")
MAGIC = b"EPIFLOW\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")  # magic, version, header length


class CheckpointError(ValueError):
    pass


class CheckpointCorrupt(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


@dataclass
class TrainConfig:
    """Settings shared by the three regimes.

    ``iterations`` is the total budget for offline and online training and the
    per-round budget for hybrid training. ``table_size`` is S for offline
    training; ``rounds`` and ``per_round`` are R and S for hybrid training.
    """

    mode: str = "online"
    batch_size: int = 32
    iterations: int = 20_000
    n_days: int = 14
    table_size: int = 0
    rounds: int = 1
    per_round: int = 0
    seed: int = 0
    lr: float = 5e-4
    lr_final: float = 1e-5
    clip_norm: float = 5.0
    early_stop: bool = True
    window: int = 500
    patience: int = 2000
    min_delta: float = 1e-3
    log_every: int = 100
    checkpoint_every: int = 0
    max_failure_rate: float = 0.01
    retry_factor: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.iterations < 1 or self.n_days < 1:
            raise ValueError("batch_size, iterations and n_days must be >= 1")
        if self.mode == "offline" and self.table_size < 1:
            raise ValueError("offline training needs table_size >= 1")
        if self.mode == "hybrid" and (self.rounds < 1 or self.per_round < 1):
            raise ValueError("hybrid training needs rounds >= 1 and per_round >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training settings: {sorted(unknown)}")
        return cls(**d)


def default_network_config(simulator, n_params: int, seed: int = 0) -> NetworkConfig:
    n_channels = len(simulator.channels)
    if simulator.name == "seir":
        return NetworkConfig.for_seir(n_params, n_channels, seed=seed)
    if simulator.name == "sir":
        return NetworkConfig.for_sir(n_params, n_channels=n_channels, seed=seed)
    return NetworkConfig(n_params=n_params, n_channels=n_channels, summary_dim=32, flow_blocks=4,
                         coupling_units=64, input_transform="identity", seed=seed)


def config_hash(network: dict, model: dict, space: ParameterSpace) -> str:
    """Compatibility hash of architecture, simulator and prior (the init seed is excluded)."""
    arch = {k: v for k, v in network.items() if k != "seed"}
    text = json.dumps({"network": arch, "model": model, "priors": space.config_hash()}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# --------------------------------------------------------------- simulation
def simulate_pairs(space: ParameterSpace, simulator, n: int, n_days: int, rng,
                   max_failures: float, chunk: int = 1000) -> tuple[np.ndarray, np.ndarray, int]:
    """Draw ``n`` successful (theta, x) pairs, resampling failed simulations.

    Raises :class:`TrainingAborted` once more than ``max_failures`` failures
    have been seen.
    """
    thetas, xs = [], []
    have, failures = 0, 0
    while have < n:
        need = min(n - have, chunk)
        theta = space.sample(rng, need)
        batch = simulator.simulate_batch(theta, n_days, rng)
        ok = batch.ok & np.all(np.isfinite(batch.observed), axis=(1, 2))
        failures += int(np.sum(~ok))
        if failures > max_failures:
            raise TrainingAborted(
                f"{failures} failed simulations while drawing {n} pairs (limit {max_failures:g}); "
                "the prior may place mass on numerically unstable parameters")
        thetas.append(theta[ok])
        xs.append(batch.observed[ok])
        have += int(ok.sum())
    return np.concatenate(thetas)[:n], np.concatenate(xs)[:n], failures


class ReferenceTable:
    """Append-only store of (natural theta, simulated series) pairs.

    The stamp ties the table to the prior, simulator and series length it was
    generated under; training refuses a table with a foreign stamp.
    """

    def __init__(self, stamp: str):
        self.stamp = stamp
        self._theta: list[np.ndarray] = []
        self._x: list[np.ndarray] = []
        self._cache = None
        self.failures = 0

    @staticmethod
    def make_stamp(space: ParameterSpace, simulator, n_days: int) -> str:
        text = json.dumps({"priors": space.config_hash(), "model": simulator.config(), "n_days": n_days},
                          sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def __len__(self) -> int:
        return sum(len(t) for t in self._theta)

    def append(self, theta: np.ndarray, x: np.ndarray, stamp: str) -> None:
        if stamp != self.stamp:
            raise ValueError(f"table stamp {self.stamp} does not match {stamp}")
        if len(theta) != len(x):
            raise ValueError("theta and x must have the same number of rows")
        self._theta.append(np.asarray(theta, dtype=np.float64))
        self._x.append(np.asarray(x, dtype=np.float64))
        self._cache = None

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if self._cache is None:
            self._cache = (np.concatenate(self._theta), np.concatenate(self._x))
        return self._cache

    def minibatch(self, rng, b: int) -> tuple[np.ndarray, np.ndarray]:
        theta, x = self.arrays()
        idx = rng.choice(len(theta), size=b, replace=len(theta) < b)
        return theta[idx], x[idx]

    def fill(self, space: ParameterSpace, simulator, n: int, n_days: int, rng,
             max_failure_rate: float = 0.01) -> None:
        theta, x, failed = simulate_pairs(space, simulator, n, n_days, rng, max_failure_rate * n)
        self.failures += failed
        self.append(theta, x, self.make_stamp(space, simulator, n_days))


# ---------------------------------------------------------------- training
def converged(history, window: int = 500, patience: int = 2000, min_delta: float = 1e-3) -> bool:
    """True when the moving-average loss improved by less than ``min_delta``
    over the last ``patience`` iterations."""
    n = len(history)
    if n < window + patience:
        return False
    h = np.asarray(history[n - window - patience:], dtype=np.float64)
    then, now = np.nanmean(h[:window]), np.nanmean(h[-window:])
    return bool(then - now < min_delta)


@dataclass
class NetworkCheckpoint:
    network: dict
    model: dict
    space: dict
    weights: dict[str, np.ndarray]
    optimizer: dict = field(default_factory=dict)
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))
    train: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def config_hash(self) -> str:
        return config_hash(self.network, self.model, self.parameter_space())

    @property
    def id(self) -> str:
        h = hashlib.sha256(self.config_hash.encode())
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()[:16]

    def parameter_space(self) -> ParameterSpace:
        return ParameterSpace.from_dict(self.space)

    def simulator(self):
        return build_model(self.model)

    def amortizer(self) -> Amortizer:
        dtype = next(iter(self.weights.values())).dtype if self.weights else None
        net = Amortizer(NetworkConfig.from_dict(self.network), dtype=dtype)
        net.load_state_dict(self.weights)
        return net

    def load_into(self, net: Amortizer, simulator, space: ParameterSpace) -> Amortizer:
        """Copy weights into ``net`` after checking the target configuration."""
        target = config_hash(net.config.to_dict(), simulator.config(), space)
        if target != self.config_hash:
            raise CheckpointMismatch(
                f"checkpoint config hash {self.config_hash} does not match model config hash {target}")
        net.load_state_dict(self.weights)
        return net


class Trainer:
    """One amortizer, its optimizer and the loss history."""

    def __init__(self, cfg: TrainConfig, space: ParameterSpace, simulator, net: Amortizer, total_steps: int):
        if net.config.n_params != space.dim:
            raise ValueError(f"network expects {net.config.n_params} parameters, space has {space.dim}")
        if net.config.n_channels != len(simulator.channels):
            raise ValueError("network channel count does not match the simulator")
        self.cfg, self.space, self.simulator, self.net = cfg, space, simulator, net
        self.params = net.parameters()
        self.opt = Adam(self.params, CosineDecay(cfg.lr, cfg.lr_final, total_steps), clip_norm=cfg.clip_norm)
        self.history: list[float] = []
        self.sim_failures = 0
        self.started = time.time()
        self.round = 0

    def step(self, theta: np.ndarray, x: np.ndarray) -> float:
        loss = nll_loss(self.net, self.space.to_unconstrained(theta), x)
        value = float(loss.item())
        if not np.isfinite(value):
            self.opt.skip()
        else:
            self.opt.step(ad.grad(loss, self.params))
        self.history.append(value)
        return value

    def record(self, final: bool = False) -> dict:
        h = self.history
        return {
            "iteration": len(h),
            "round": self.round,
            "loss": h[-1] if h else None,
            "loss_ma": float(np.nanmean(h[-self.cfg.window:])) if h else None,
            "sim_failures": self.sim_failures,
            "skipped": self.opt.state.skipped,
            "lr": self.opt.lr,
            "elapsed": round(time.time() - self.started, 3),
            "final": final,
        }

    def checkpoint(self, stopped_early: bool = False) -> NetworkCheckpoint:
        names = [n for n, _ in self.net.named_parameters()]
        st = self.opt.state
        optimizer = {
            "step": st.step,
            "skipped": st.skipped,
            "schedule": asdict(st.schedule),
            "m": {n: a.copy() for n, a in zip(names, st.m)},
            "v": {n: a.copy() for n, a in zip(names, st.v)},
        }
        meta = {
            "iterations": len(self.history),
            "sim_failures": self.sim_failures,
            "stopped_early": stopped_early,
            "package_version": __version__,
            "seconds": round(time.time() - self.started, 3),
        }
        return NetworkCheckpoint(
            network=self.net.config.to_dict(),
            model=self.simulator.config(),
            space=self.space.to_dict(),
            weights={n: p.copy() for n, p in self.net.state_dict().items()},
            optimizer=optimizer,
            history=np.asarray(self.history, dtype=np.float64),
            train=self.cfg.to_dict(),
            meta=meta,
        )


ProgressSink = TextIO | Callable[[dict], None] | None


def _emit(progress: ProgressSink, record: dict) -> None:
    if progress is None:
        return
    if callable(progress):
        progress(record)
    else:
        progress.write(json.dumps(record) + "\n")
        progress.flush()


def _setup(cfg: TrainConfig, space: ParameterSpace, simulator, nets: Amortizer | None, total_steps: int):
    if not space.standardized:
        space = space.fit_standardization(rng=cfg.seed)
    if nets is None:
        nets = Amortizer(default_network_config(simulator, space.dim, cfg.seed))
    sim_seq, batch_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    return Trainer(cfg, space, simulator, nets, total_steps), make_rng(sim_seq), make_rng(batch_seq)


def _run(trainer: Trainer, n_iter: int, draw: Callable[[], tuple[np.ndarray, np.ndarray]],
         progress: ProgressSink, checkpoint_path: str | None) -> bool:
    """Train for up to ``n_iter`` iterations; returns True on early stop."""
    cfg = trainer.cfg
    start = len(trainer.history)
    for _ in range(n_iter):
        theta, x = draw()
        trainer.step(theta, x)
        done = len(trainer.history)
        if cfg.log_every and done % cfg.log_every == 0:
            _emit(progress, trainer.record())
        if checkpoint_path and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(trainer.checkpoint(), checkpoint_path)
        if cfg.early_stop and converged(trainer.history[start:], cfg.window, cfg.patience, cfg.min_delta):
            return True
    return False


def _finish(trainer: Trainer, stopped: bool, model_before: dict, progress, checkpoint_path) -> NetworkCheckpoint:
    if trainer.simulator.config() != model_before:
        raise RuntimeError("simulator configuration changed during training")
    _emit(progress, trainer.record(final=True))
    ckpt = trainer.checkpoint(stopped)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt


def train_online(cfg: TrainConfig, space: ParameterSpace, simulator, nets: Amortizer | None = None,
                 progress: ProgressSink = None, checkpoint_path: str | None = None) -> NetworkCheckpoint:
    """Every iteration trains on a freshly simulated batch that is then discarded."""
    before = simulator.config()
    trainer, sim_rng, _ = _setup(cfg, space, simulator, nets, cfg.iterations)

    def draw():
        theta, x, failed = simulate_pairs(trainer.space, simulator, cfg.batch_size, cfg.n_days, sim_rng,
                                          cfg.retry_factor * cfg.batch_size)
        trainer.sim_failures += failed
        return theta, x

    stopped = _run(trainer, cfg.iterations, draw, progress, checkpoint_path)
    return _finish(trainer, stopped, before, progress, checkpoint_path)


def train_offline(cfg: TrainConfig, space: ParameterSpace, simulator, nets: Amortizer | None = None,
                  table: ReferenceTable | None = None, progress: ProgressSink = None,
                  checkpoint_path: str | None = None) -> NetworkCheckpoint:
    """Train on mini-batches drawn from a reference table of ``table_size`` pairs."""
    before = simulator.config()
    trainer, sim_rng, batch_rng = _setup(cfg, space, simulator, nets, cfg.iterations)
    stamp = ReferenceTable.make_stamp(trainer.space, simulator, cfg.n_days)
    if table is None:
        table = ReferenceTable(stamp)
        table.fill(trainer.space, simulator, cfg.table_size, cfg.n_days, sim_rng, cfg.max_failure_rate)
    elif table.stamp != stamp:
        raise ValueError(f"reference table stamp {table.stamp} does not match current setup {stamp}")
    trainer.sim_failures = table.failures
    stopped = _run(trainer, cfg.iterations, lambda: table.minibatch(batch_rng, cfg.batch_size),
                   progress, checkpoint_path)
    return _finish(trainer, stopped, before, progress, checkpoint_path)


def train_hybrid(cfg: TrainConfig, space: ParameterSpace, simulator, nets: Amortizer | None = None,
                 progress: ProgressSink = None, checkpoint_path: str | None = None,
                 on_round: Callable[[int, ReferenceTable], None] | None = None) -> NetworkCheckpoint:
    """Rounds of: simulate ``per_round`` new pairs, then train on the whole table."""
    before = simulator.config()
    trainer, sim_rng, batch_rng = _setup(cfg, space, simulator, nets, cfg.rounds * cfg.iterations)
    table = ReferenceTable(ReferenceTable.make_stamp(trainer.space, simulator, cfg.n_days))
    stopped = False
    for r in range(1, cfg.rounds + 1):
        trainer.round = r
        table.fill(trainer.space, simulator, cfg.per_round, cfg.n_days, sim_rng, cfg.max_failure_rate)
        trainer.sim_failures = table.failures
        stopped = _run(trainer, cfg.iterations, lambda: table.minibatch(batch_rng, cfg.batch_size),
                       progress, checkpoint_path)
        if on_round is not None:
            on_round(r, table)
    return _finish(trainer, stopped, before, progress, checkpoint_path)


def train(cfg: TrainConfig, space: ParameterSpace, simulator, nets: Amortizer | None = None,
          **kw) -> NetworkCheckpoint:
    fn = {"online": train_online, "offline": train_offline, "hybrid": train_hybrid}[cfg.mode]
    return fn(cfg, space, simulator, nets, **kw)


# -------------------------------------------------------------- file format
def _blob_dtype(arr: np.ndarray) -> str:
    return "<f8" if arr.dtype == np.float64 else "<f4"


def save_checkpoint(ckpt: NetworkCheckpoint, path) -> None:
    """Write atomically: a temporary file in the target directory is renamed over ``path``.

    Layout: magic, format version, header length, JSON header, little-endian
    float blobs, CRC32 of everything before the trailer.
    """
    arrays: list[tuple[str, np.ndarray]] = list(ckpt.weights.items())
    opt = dict(ckpt.optimizer)
    for key in ("m", "v"):
        arrays += [(f"opt.{key}.{n}", a) for n, a in opt.pop(key, {}).items()]
    arrays.append(("history", np.asarray(ckpt.history, dtype=np.float64)))
    index, blobs, offset = [], [], 0
    for name, arr in arrays:
        dt = "<f8" if name == "history" else _blob_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        index.append({"name": name, "dtype": dt, "shape": list(np.shape(arr)), "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config_hash": ckpt.config_hash,
        "network": ckpt.network,
        "model": ckpt.model,
        "space": ckpt.space,
        "optimizer": opt,
        "train": ckpt.train,
        "meta": ckpt.meta,
        "arrays": index,
    }, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, ckpt.version, len(header)) + header + b"".join(blobs)
    payload = body + struct.pack("<I", zlib.crc32(body))
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expect_hash: str | None = None) -> NetworkCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size + 4 or data[:8] != MAGIC:
        raise CheckpointCorrupt(f"{path}: not an epiflow checkpoint (bad magic or truncated)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointCorrupt(f"{path}: CRC mismatch, file is truncated or damaged")
    _, version, hlen = _PREFIX.unpack_from(body)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen])
    start = _PREFIX.size + hlen
    arrays = {}
    for entry in header["arrays"]:
        lo = start + entry["offset"]
        raw = body[lo:lo + entry["nbytes"]]
        dt = np.dtype(entry["dtype"])
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).astype(dt.newbyteorder("="))
    optimizer = dict(header["optimizer"])
    for key in ("m", "v"):
        prefix = f"opt.{key}."
        optimizer[key] = {n[len(prefix):]: a for n, a in arrays.items() if n.startswith(prefix)}
    weights = {n: a for n, a in arrays.items() if n != "history" and not n.startswith("opt.")}
    ckpt = NetworkCheckpoint(header["network"], header["model"], header["space"], weights, optimizer,
                             arrays["history"], header["train"], header["meta"], version)
    if ckpt.config_hash != header["config_hash"]:
        raise CheckpointCorrupt(f"{path}: stored config hash {header['config_hash']} is inconsistent")
    if expect_hash is not None and expect_hash != ckpt.config_hash:
        raise CheckpointMismatch(
            f"checkpoint config hash {ckpt.config_hash} does not match model config hash {expect_hash}")
    return ckpt
