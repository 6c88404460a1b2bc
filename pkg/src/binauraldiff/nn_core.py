"""Neural-network core: named parameters, seeded init, AdamW, checkpoints,
and finite-difference gradient checking.

Tensor storage and the backward pass are delegated to torch (CPU); this
module owns everything the rest of the package depends on for
reproducibility: deterministic per-name initialization, the decoupled
weight-decay update rule, a self-describing binary checkpoint format, and
the gradcheck harness that validates every op the models use against
64-bit central differences.
"""
from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"BDCKPT01"
SCHEMA_VERSION = 1


def configure_torch():
    """Single-threaded, deterministic torch session."""
    torch.set_num_threads(1)
    torch.manual_seed(0)


def assert_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t


def seeded_init(name: str, shape: tuple, scheme: str, seed: int,
                dtype=torch.float32) -> torch.Tensor:
    """Deterministic parameter init keyed by (name, seed).

    Schemes: 'kaiming_uniform' draws U(-b, b) with b = sqrt(6/fan_in);
    'zeros' for biases, normalization offsets, and modulation/output layers
    that must start as the identity.
    """
    if scheme == "zeros":
        return torch.zeros(shape, dtype=dtype)
    digest = hashlib.sha256(f"{name}|{seed}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    if scheme == "kaiming_uniform":
        fan_in = shape[1] if len(shape) > 1 else shape[0]
        for k in shape[2:]:
            fan_in *= k
        bound = float(np.sqrt(6.0 / fan_in))
        values = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return torch.tensor(values, dtype=dtype)


class Module:
    """Minimal named-parameter container; composition via child modules."""

    def __init__(self, name: str):
        self.name = name
        self._own: dict[str, torch.Tensor] = {}
        self._children: list[Module] = []

    def add_param(self, local: str, tensor: torch.Tensor) -> torch.Tensor:
        tensor.requires_grad_(True)
        self._own[f"{self.name}.{local}"] = tensor
        return tensor

    def add_child(self, child: "Module") -> "Module":
        self._children.append(child)
        return child

    def params(self) -> dict[str, torch.Tensor]:
        out = dict(self._own)
        for child in self._children:
            dup = set(out) & set(child.params())
            if dup:
                raise ValueError(f"duplicate parameter names {sorted(dup)}")
            out.update(child.params())
        return out

    def load_params(self, values: dict[str, torch.Tensor], strict: bool = True):
        mine = self.params()
        missing = set(mine) - set(values)
        if strict and missing:
            raise ValueError(f"checkpoint missing parameters {sorted(missing)[:4]}")
        for k, t in mine.items():
            if k in values:
                src = values[k]
                if tuple(src.shape) != tuple(t.shape):
                    raise ValueError(f"shape mismatch for {k}")
                with torch.no_grad():
                    t.copy_(src.to(t.dtype))

    def zero_grad(self):
        for t in self.params().values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.numel() for t in self.params().values())


class Linear(Module):
    def __init__(self, name, n_in, n_out, seed, dtype=torch.float32,
                 init="kaiming_uniform"):
        super().__init__(name)
        self.W = self.add_param("W", seeded_init(f"{name}.W", (n_out, n_in),
                                                 init, seed, dtype))
        self.b = self.add_param("b", seeded_init(f"{name}.b", (n_out,),
                                                 "zeros", seed, dtype))

    def __call__(self, x):
        return F.linear(x, self.W, self.b)


class Conv2d(Module):
    def __init__(self, name, n_in, n_out, kernel, seed, stride=1, padding=0,
                 dtype=torch.float32, init="kaiming_uniform"):
        super().__init__(name)
        self.stride = stride
        self.padding = padding
        self.W = self.add_param("W", seeded_init(
            f"{name}.W", (n_out, n_in, kernel, kernel), init, seed, dtype))
        self.b = self.add_param("b", seeded_init(f"{name}.b", (n_out,),
                                                 "zeros", seed, dtype))

    def __call__(self, x):
        return F.conv2d(x, self.W, self.b, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, name, channels, seed, groups=8, dtype=torch.float32):
        super().__init__(name)
        # at least 2 channels per group so tiny configs stay well-posed on
        # 1x1 grids (variance over a single value is undefined)
        self.groups = max(1, min(groups, channels // 2))
        while channels % self.groups:
            self.groups -= 1
        self.gamma = self.add_param("gamma", torch.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", seeded_init(f"{name}.beta", (channels,),
                                                       "zeros", seed, dtype))

    def __call__(self, x):
        return F.group_norm(x, self.groups, self.gamma, self.beta, eps=1e-5)


def silu(x):
    return F.silu(x)


def sigmoid(x):
    return torch.sigmoid(x)


def mean_pool(x):
    """Global average over spatial dims of [B, C, H, W] -> [B, C]."""
    return x.mean(dim=(-2, -1))


def film_modulate(x, scale, shift):
    """Feature-wise affine conditioning: x*(1+scale)+shift, broadcast over
    spatial dims. Zero scale/shift is the identity."""
    return x * (1.0 + scale[..., None, None]) + shift[..., None, None]


def upsample_nearest(x, factor=2):
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def attention_core(q, k, v):
    """softmax(q k^T / sqrt(d)) v over token axis: [B, heads, T, d]."""
    scores = q @ k.transpose(-2, -1) / (q.shape[-1] ** 0.5)
    return torch.softmax(scores, dim=-1) @ v


class SelfAttention2d(Module):
    """Multi-head self-attention over the flattened spatial grid, with a
    residual connection and zero-init output projection."""

    def __init__(self, name, channels, seed, heads=2, head_dim=None,
                 dtype=torch.float32):
        super().__init__(name)
        self.heads = heads
        self.head_dim = head_dim or max(channels // heads, 1)
        inner = self.heads * self.head_dim
        self.norm = self.add_child(GroupNorm(f"{name}.norm", channels, seed,
                                             dtype=dtype))
        self.qkv = self.add_child(Conv2d(f"{name}.qkv", channels, 3 * inner, 1,
                                         seed, dtype=dtype))
        self.proj = self.add_child(Conv2d(f"{name}.proj", inner, channels, 1,
                                          seed, dtype=dtype, init="zeros"))

    def __call__(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x))
        qkv = qkv.reshape(b, 3, self.heads, self.head_dim, h * w)
        q, k, v = (qkv[:, i].transpose(-2, -1) for i in range(3))
        out = attention_core(q, k, v)
        out = out.transpose(-2, -1).reshape(b, self.heads * self.head_dim, h, w)
        return x + self.proj(out)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamWConfig:
    lr: float = 1e-4
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 1e-3

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie strictly in (0, 1)")


def adamw_step(params: dict[str, torch.Tensor], state: dict, cfg: AdamWConfig,
               step: int):
    """One decoupled-weight-decay Adam update, in place.

    state maps name -> (m, v) first/second moments and is created lazily.
    Gradients are read from .grad; parameters without one are skipped.
    """
    if step < 1:
        raise ValueError("step counts from 1")
    bc1 = 1.0 - cfg.beta1**step
    bc2 = 1.0 - cfg.beta2**step
    with torch.no_grad():
        for name, p in params.items():
            if p.grad is None:
                g = torch.zeros_like(p)
            else:
                g = p.grad
            if name not in state:
                state[name] = (torch.zeros_like(p), torch.zeros_like(p))
            m, v = state[name]
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            denom = (v / bc2).sqrt_().add_(cfg.eps)
            # p -= lr * (m_hat/denom + wd * p), decay on the pre-update value
            update = (m / bc1).div_(denom).add_(p, alpha=cfg.weight_decay)
            p.add_(update, alpha=-cfg.lr)


class AdamW:
    """Stateful wrapper tying adamw_step to a parameter dict."""

    def __init__(self, params: dict[str, torch.Tensor], cfg: AdamWConfig | None = None):
        self.params = params
        self.cfg = cfg or AdamWConfig()
        self.state: dict = {}
        self.step_count = 0

    def step(self):
        self.step_count += 1
        adamw_step(self.params, self.state, self.cfg, self.step_count)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, (m, v) in self.state.items():
            out[f"opt.{name}.m"] = m
            out[f"opt.{name}.v"] = v
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step_count: int):
        self.step_count = step_count
        self.state = {}
        for name in self.params:
            m = tensors.get(f"opt.{name}.m")
            v = tensors.get(f"opt.{name}.v")
            if m is not None and v is not None:
                self.state[name] = (m.clone(), v.clone())


# ---------------------------------------------------------------------------
# checkpoint container

def save_checkpoint(path, tensors: dict[str, torch.Tensor], config: dict,
                    extras: dict | None = None):
    """Binary container: magic, JSON header (schema, config, tensor index,
    extras), then a single little-endian float32 blob."""
    index = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().to(torch.float32).contiguous()
        raw = t.numpy().astype("<f4").tobytes()
        index.append({"name": name, "shape": list(t.shape), "offset": offset,
                      "numel": t.numel()})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "tensors": index,
        "extras": extras or {},
    }).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Returns (tensors, config, extras). Raises on magic or schema mismatch."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        if header["schema_version"] != SCHEMA_VERSION:
            raise ValueError(
                f"{path}: checkpoint schema {header['schema_version']} "
                f"does not match supported {SCHEMA_VERSION}"
            )
        blob = f.read()
    tensors = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        end = start + 4 * entry["numel"]
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.tensor(arr.copy())
    return tensors, header["config"], header["extras"]


def rng_state_to_json(torch_state: torch.Tensor, np_state: dict) -> dict:
    return {
        "torch": base64.b64encode(torch_state.numpy().tobytes()).decode(),
        "numpy": json.loads(json.dumps(np_state, default=int)),
    }


def rng_state_from_json(blob: dict):
    torch_state = torch.tensor(
        np.frombuffer(base64.b64decode(blob["torch"]), dtype=np.uint8).copy()
    )
    return torch_state, blob["numpy"]


# ---------------------------------------------------------------------------
# finite-difference gradient checking

def gradcheck(loss_fn, tensors: dict[str, torch.Tensor], h: float = 1e-5,
              max_entries: int = 24, seed: int = 0) -> float:
    """Compare analytic gradients of loss_fn() against 64-bit central
    differences, perturbing up to max_entries coordinates per tensor.
    Returns the worst relative error across all checked coordinates.
    """
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise ValueError("gradcheck requires float64 tensors")
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad.clone() if t.grad is not None else torch.zeros_like(t))
                for k, t in tensors.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in tensors.items():
        flat = t.detach().reshape(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(max_entries, n), replace=False)
        for idx in picks:
            idx = int(idx)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
            up = loss_fn().item()
            with torch.no_grad():
                flat[idx] = orig - h
            down = loss_fn().item()
            with torch.no_grad():
                flat[idx] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[name].reshape(-1)[idx].item()
            scale = max(abs(a), abs(numeric), 1.0)
            worst = max(worst, abs(a - numeric) / scale)
    return worst
