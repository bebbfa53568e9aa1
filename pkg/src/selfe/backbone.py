"""Conditional dual-time MLP with velocity and clean-sample heads.

Condition rows in the embedding table are laid out as
``[class 0 .. class K-1, null, fake 0 .. fake K-1]``.
"""

from __future__ import annotations

import copy
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

CKPT_MAGIC = b"SELFECKP"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ConditionToken:
    kind: str  # "class", "null" or "fake"
    id: int = 0

    def row(self, n_classes: int) -> int:
        if self.kind == "null":
            return n_classes
        if not 0 <= self.id < n_classes:
            raise ValueError(f"class id {self.id} out of range for {n_classes} classes")
        if self.kind == "class":
            return self.id
        if self.kind == "fake":
            return n_classes + 1 + self.id
        raise ValueError(f"unknown condition kind {self.kind!r}")


def null_rows(like: Tensor, n_classes: int) -> Tensor:
    return torch.full_like(like, n_classes)


def fake_rows(class_rows: Tensor, n_classes: int) -> Tensor:
    """Fake-tagged row for each class row; null rows pass through unchanged."""
    return torch.where(class_rows < n_classes, class_rows + n_classes + 1, class_rows)


@dataclass(frozen=True)
class NetSpec:
    dim: int = 2
    n_classes: int = 4
    width: int = 128
    depth: int = 3
    cond_dim: int = 32
    n_freqs: int = 16
    max_freq: float = 1e4


def sinusoid(t: Tensor, n_freqs: int, max_freq: float) -> Tensor:
    """``[sin(w t), cos(w t)]`` features with ``w`` geometric on ``[1, max_freq]``."""
    freqs = torch.logspace(0.0, float(np.log10(max_freq)), n_freqs, dtype=t.dtype, device=t.device)
    arg = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


def _time_mlp(n_in: int, width: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, width), nn.SiLU(), nn.Linear(width, width))


class Network(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.mlp_t = _time_mlp(2 * spec.n_freqs, w)
        self.mlp_s = _time_mlp(2 * spec.n_freqs, w)
        self.cond_embed = nn.Embedding(2 * spec.n_classes + 1, spec.cond_dim)
        layers: list[nn.Module] = [nn.Linear(spec.dim + w + spec.cond_dim, w), nn.SiLU()]
        for _ in range(spec.depth - 1):
            layers += [nn.Linear(w, w), nn.SiLU()]
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(w, spec.dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def time_embed(self, t: Tensor, s: Tensor) -> Tensor:
        sp = self.spec
        e_t = self.mlp_t(sinusoid(t, sp.n_freqs, sp.max_freq))
        e_s = self.mlp_s(sinusoid(t - s, sp.n_freqs, sp.max_freq))
        return e_t + e_s

    def forward(self, x: Tensor, t: Tensor, s: Tensor, cond: Tensor) -> Tensor:
        return self.predict_velocity(x, t, s, cond)

    def predict_velocity(self, x: Tensor, t, s, cond) -> Tensor:
        t, s, cond = _broadcast_inputs(x, t, s, cond)
        if torch.isnan(x).any() or torch.isnan(t).any() or torch.isnan(s).any():
            raise ValueError("NaN in network inputs")
        h = torch.cat([x, self.time_embed(t, s), self.cond_embed(cond)], dim=-1)
        return self.head(self.trunk(h))

    def predict_x0(self, x: Tensor, t, s, cond) -> Tensor:
        """Clean-sample head ``G = x - t V``."""
        t, s, cond = _broadcast_inputs(x, t, s, cond)
        return x - t[:, None] * self.predict_velocity(x, t, s, cond)


def _as_batch(v, n: int, dtype, device) -> Tensor:
    v = torch.as_tensor(v, dtype=dtype, device=device)
    return v.expand(n) if v.ndim == 0 else v


def _broadcast_inputs(x: Tensor, t, s, cond):
    n = x.shape[0]
    return (
        _as_batch(t, n, x.dtype, x.device),
        _as_batch(s, n, x.dtype, x.device),
        _as_batch(cond, n, torch.long, x.device),
    )


def build_network(spec: NetSpec, seed: int = 0, dtype: torch.dtype = torch.float32) -> Network:
    # Local RNG state so construction never touches the global torch stream.
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Network(spec)
    return net.to(dtype)


class EmaShadow:
    """Exponential moving average copy of a network's parameters."""

    def __init__(self, net: Network, decay: float):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {decay}")
        self.decay = decay
        self.net = copy.deepcopy(net)
        self.net.requires_grad_(False)


@torch.no_grad()
def ema_update(shadow: EmaShadow, net: Network) -> None:
    src = list(net.parameters())
    dst = list(shadow.net.parameters())
    if len(src) != len(dst) or any(a.shape != b.shape for a, b in zip(src, dst)):
        raise ValueError("EMA shadow and network parameter shapes differ")
    d = shadow.decay
    for p_ema, p in zip(dst, src):
        p_ema.mul_(d).add_(p.detach(), alpha=1.0 - d)


# -- checkpoint container ---------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(path, net: Network, iteration: int, ema: bool) -> None:
    """Write ``path`` (binary parameters) and ``path.json`` (sidecar metadata)."""
    path = Path(path)
    state = net.state_dict()
    header = {
        "net": asdict(net.spec),
        "dim": net.spec.dim,
        "n_classes": net.spec.n_classes,
        "tensors": [[name, list(t.shape)] for name, t in state.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = b"".join(t.detach().cpu().numpy().astype("<f4").tobytes() for t in state.values())
    blob = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + body
    _atomic_write(path, blob)
    meta = {"iteration": int(iteration), "ema": bool(ema), "file": path.name}
    _atomic_write(path.with_name(path.name + ".json"), (json.dumps(meta, indent=2) + "\n").encode())


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> tuple[Network, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen])
    data = np.frombuffer(blob[16 + hlen:], dtype="<f4")
    net = Network(NetSpec(**header["net"]))
    state, offset = {}, 0
    for name, shape in header["tensors"]:
        size = int(np.prod(shape))
        state[name] = torch.from_numpy(data[offset:offset + size].reshape(shape).copy())
        offset += size
    if offset != data.size:
        raise ValueError(f"{path}: payload size does not match header")
    net.load_state_dict(state)
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return net.to(dtype), meta
