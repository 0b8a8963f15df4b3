"""Parameter-selection policies and low-rank adapter algebra.

Three nested policies decide what trains:
  * lora       — rank-r adapters on the attention projections, all else frozen,
  * lora_plus  — lora plus full training of embeddings and every norm gain,
  * hylora     — lora_plus plus the SSM blocks' causal-conv kernels and biases.

Adapters follow the usual convention: the effective weight is
``W + (alpha/rank) * (B A)^T`` for our right-multiplication layout, with A
Gaussian-initialized at scale 1/sqrt(rank) and B zero, so a fresh policy is
an exact no-op on the model output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .model import AttentionLayer, HybridModel, SSMLayer
from .tensor import Tensor

POLICIES = ("lora", "lora_plus", "hylora")

ATTENTION_TARGETS = ("w_q", "w_k", "w_v", "w_o")


@dataclass
class LoRAAdapter:
    a: Tensor  # (rank, d_in)
    b: Tensor  # (d_out, rank)
    rank: int
    alpha: float
    target: str

    @classmethod
    def fresh(cls, d_in, d_out, rank, alpha, target, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        a = Tensor((rng.standard_normal((rank, d_in)) / math.sqrt(rank)).astype(dtype), requires_grad=True)
        b = Tensor(np.zeros((d_out, rank), dtype=dtype), requires_grad=True)
        return cls(a=a, b=b, rank=rank, alpha=alpha, target=target)

    def delta(self):
        """Dense weight delta in the model's (d_in, d_out) layout."""
        return (self.a.data.T @ self.b.data.T) * (self.alpha / self.rank)

    @property
    def parameter_count(self):
        return self.a.size + self.b.size


@dataclass
class AdapterPolicy:
    policy: str
    rank: int = 32
    alpha: float = 64.0
    targets: tuple = ATTENTION_TARGETS
    train_conv_bias: bool = True

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        self.targets = tuple(self.targets)


def apply_policy(model, policy, seed=0):
    """Freeze the model, attach adapters, and mark the policy's extras trainable.

    Returns {"trainable": [...names...], "frozen": [...names...]}; adapters are
    named ``blocks.<i>.<matrix>.lora_a`` / ``.lora_b``.
    """
    if any(block.adapters for _, block in model.attention_layers()):
        raise UsageError("adapters already attached; merge them before applying a policy again")

    model.set_all_trainable(False)
    dtype = model.config.np_dtype

    for i, block in model.attention_layers():
        mats = block.params.matrices()
        for ti, target in enumerate(policy.targets):
            if target not in mats:
                raise ConfigError(f"adapter target {target!r} not present on layer {i}")
            w = mats[target]
            block.adapters[target] = LoRAAdapter.fresh(
                d_in=w.shape[0],
                d_out=w.shape[1],
                rank=policy.rank,
                alpha=policy.alpha,
                target=target,
                seed=np.random.SeedSequence([seed, i, ti]).generate_state(1)[0],
                dtype=dtype,
            )

    if policy.policy in ("lora_plus", "hylora"):
        model.embedding.requires_grad = True
        model.final_norm.requires_grad = True
        for block in model.blocks:
            block.norm.requires_grad = True

    if policy.policy == "hylora":
        for block in model.blocks:
            if isinstance(block, SSMLayer):
                block.conv_kernel.requires_grad = True
                if policy.train_conv_bias:
                    block.conv_bias.requires_grad = True

    named = model.named_parameters()
    trainable = [k for k, p in named.items() if p.requires_grad]
    frozen = [k for k, p in named.items() if not p.requires_grad]
    return {"trainable": trainable, "frozen": frozen}


def merge_adapters(model):
    """Fold every adapter delta into its base matrix and detach the adapters."""
    merged_any = False
    for _, block in model.attention_layers():
        for target, adapter in block.adapters.items():
            w = block.params.matrices()[target]
            w.data = w.data + adapter.delta().astype(w.dtype)
            merged_any = True
        block.adapters = {}
    if not merged_any:
        raise UsageError("no adapters attached; double merge or policy never applied")
    return model


def adapter_parameter_count(model):
    return sum(ad.parameter_count for _, block in model.attention_layers() for ad in block.adapters.values())


def expected_adapter_count(cfg, policy):
    """Closed form: every targeted matrix contributes rank*(d_in + d_out)."""
    n_attn = cfg.layer_kinds().count("attn")
    return n_attn * len(policy.targets) * policy.rank * (cfg.d + cfg.d_model)


def expected_trainable_count(cfg, policy):
    """Closed-form trainable parameter count after apply_policy."""
    total = expected_adapter_count(cfg, policy)
    kinds = cfg.layer_kinds()
    if policy.policy in ("lora_plus", "hylora"):
        total += cfg.vocab * cfg.d  # embedding
        total += cfg.d * (len(kinds) + 1)  # block norms + final norm
    if policy.policy == "hylora":
        n_ssm = kinds.count("ssm")
        total += n_ssm * cfg.conv_width * cfg.state_dim
        if policy.train_conv_bias:
            total += n_ssm * cfg.state_dim
    return total


def conv_parameter_fraction(model):
    """Share of total parameters living in the SSM conv kernels and biases."""
    conv = sum(
        block.conv_kernel.size + block.conv_bias.size
        for block in model.blocks
        if isinstance(block, SSMLayer)
    )
    return conv / model.parameter_count()


# adapter-only checkpoints (same container format as full checkpoints)


def save_adapter_checkpoint(path, model):
    entries = []
    offset = 0
    buffers = []
    tag = "<f8" if model.config.np_dtype == np.float64 else "<f4"
    manifest = []
    for i, block in model.attention_layers():
        for target, ad in block.adapters.items():
            manifest.append({"layer": i, "matrix": target, "rank": ad.rank, "alpha": ad.alpha})
            for role, t in (("lora_a", ad.a), ("lora_b", ad.b)):
                raw = np.ascontiguousarray(t.data, dtype=tag).tobytes()
                entries.append(
                    {"name": f"blocks.{i}.{target}.{role}", "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
                )
                buffers.append(raw)
                offset += len(raw)
    if not manifest:
        raise UsageError("no adapters attached; nothing to save")
    header = {"format": "spanattn-adapters", "version": 1, "dtype": tag, "adapters": manifest, "params": entries}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for raw in buffers:
            f.write(raw)


def load_adapter_checkpoint(path, model):
    """Attach (or overwrite) adapters on a base model from an adapter-only file."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    if header.get("format") != "spanattn-adapters":
        raise UsageError(f"{path} is not an adapter checkpoint")
    dtype = model.config.np_dtype
    by_layer = {}
    for entry in header["adapters"]:
        block = model.blocks[entry["layer"]]
        if not isinstance(block, AttentionLayer):
            raise UsageError(f"layer {entry['layer']} is not an attention layer")
        w = block.params.matrices()[entry["matrix"]]
        ad = LoRAAdapter.fresh(
            d_in=w.shape[0], d_out=w.shape[1], rank=entry["rank"], alpha=entry["alpha"], target=entry["matrix"], dtype=dtype
        )
        block.adapters[entry["matrix"]] = ad
        by_layer[(entry["layer"], entry["matrix"])] = ad
    for entry in header["params"]:
        _, layer_str, matrix, role = entry["name"].split(".")
        ad = by_layer[(int(layer_str), matrix)]
        arr = np.frombuffer(blob, dtype=header["dtype"], count=int(np.prod(entry["shape"])), offset=entry["offset"])
        tensor = ad.a if role == "lora_a" else ad.b
        tensor.data = arr.reshape(entry["shape"]).astype(dtype).copy()
    return model
