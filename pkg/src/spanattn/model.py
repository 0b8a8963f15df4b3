"""Toy hybrid causal language model: gated SSM blocks interleaved with
attention blocks that dispatch to any of the package's attention variants.

The SSM block is a deliberately small stand-in with the classic shape
(norm, input projection, causal depthwise conv, diagonal linear recurrence,
multiplicative gate, output projection, residual); its decay is sigmoid
constrained so the state always fades for bounded input.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionParams, full_attention, sliding_window_attention
from .errors import ConfigError, InputError, UsageError
from .ops import causal_conv1d, cross_entropy_logits, embedding_lookup, linear_recurrence, rms_norm, sigmoid
from .se_attn import SEAttnConfig, se_attn_forward
from .tensor import Tensor, backward, concat, matmul, narrow, scale, transpose
from .vocab import PAD_ID, VOCAB_SIZE


@dataclass
class ModelConfig:
    layers: int = 4
    d: int = 64
    d_model: int = 64
    heads: int = 4
    blend_ratio: int = 3  # SSM blocks per attention block
    vocab: int = VOCAB_SIZE
    state_dim: int = 0  # 0 selects 2*d
    conv_width: int = 4
    conv_max_width: int = 8
    tied_head: bool = False
    rope_base: float = 10000.0
    rope_pos_scale: float = 1.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("model needs at least one layer")
        if self.d_model % self.heads != 0:
            raise ConfigError("d_model must be divisible by the head count")
        if self.blend_ratio < 0:
            raise ConfigError("blend ratio must be >= 0")
        if self.conv_width > self.conv_max_width:
            raise ConfigError("conv width exceeds the configured maximum")
        if self.state_dim == 0:
            self.state_dim = 2 * self.d

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def layer_kinds(self):
        """Block pattern: one attention block after every blend_ratio SSM blocks."""
        period = self.blend_ratio + 1
        return ["attn" if (i + 1) % period == 0 else "ssm" for i in range(self.layers)]


@dataclass
class AttentionSetting:
    """Which attention variant the model's attention blocks run."""

    kind: str  # full | sw | se
    window: int = 0
    se_cfg: SEAttnConfig = None

    def __post_init__(self):
        if self.kind not in ("full", "sw", "se"):
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        if self.kind == "sw" and self.window < 1:
            raise ConfigError("sliding window attention needs window >= 1")
        if self.kind == "se" and self.se_cfg is None:
            raise ConfigError("se attention needs an SEAttnConfig")


class SSMLayer:
    """norm -> in_proj -> causal conv -> diagonal recurrence -> gate -> out_proj + residual."""

    def __init__(self, cfg, rng):
        d, e, w = cfg.d, cfg.state_dim, cfg.conv_width
        dt = cfg.np_dtype
        self.state_dim = e
        self.conv_max_width = cfg.conv_max_width
        self.norm = Tensor(np.ones(d, dtype=dt), requires_grad=True)
        self.in_proj = Tensor((rng.standard_normal((d, 2 * e)) / math.sqrt(d)).astype(dt), requires_grad=True)
        self.conv_kernel = Tensor((rng.standard_normal((w, e)) / math.sqrt(w)).astype(dt), requires_grad=True)
        self.conv_bias = Tensor(np.zeros(e, dtype=dt), requires_grad=True)
        # decay stays in (0, 1) through the sigmoid; initialized spread over (0.5, 0.95)
        a0 = rng.uniform(0.5, 0.95, size=e)
        self.decay_logit = Tensor(np.log(a0 / (1.0 - a0)).astype(dt), requires_grad=True)
        self.input_gain = Tensor(np.ones(e, dtype=dt), requires_grad=True)
        self.out_proj = Tensor((rng.standard_normal((e, d)) / math.sqrt(e)).astype(dt), requires_grad=True)

    def named_params(self, prefix):
        return {
            f"{prefix}.norm": self.norm,
            f"{prefix}.in_proj": self.in_proj,
            f"{prefix}.conv_kernel": self.conv_kernel,
            f"{prefix}.conv_bias": self.conv_bias,
            f"{prefix}.decay_logit": self.decay_logit,
            f"{prefix}.input_gain": self.input_gain,
            f"{prefix}.out_proj": self.out_proj,
        }

    def forward(self, x):
        e = self.state_dim
        h = rms_norm(x, self.norm)
        both = matmul(h, self.in_proj)
        u = narrow(both, 1, 0, e)
        gate = narrow(both, 1, e, 2 * e)
        u = causal_conv1d(u, self.conv_kernel, self.conv_bias, max_width=self.conv_max_width)
        decay = sigmoid(self.decay_logit)
        state = linear_recurrence(u, decay, self.input_gain)
        gated = state * sigmoid(gate)
        return x + matmul(gated, self.out_proj)


class AttentionLayer:
    """norm -> attention variant + residual; LoRA deltas fold into the projections."""

    def __init__(self, cfg, rng):
        d, dm = cfg.d, cfg.d_model
        dt = cfg.np_dtype

        def init(rows, cols):
            return Tensor((rng.standard_normal((rows, cols)) / math.sqrt(rows)).astype(dt), requires_grad=True)

        self.norm = Tensor(np.ones(d, dtype=dt), requires_grad=True)
        self.params = AttentionParams(
            w_q=init(d, dm),
            w_k=init(d, dm),
            w_v=init(d, dm),
            w_o=init(dm, d),
            head_count=cfg.heads,
            d_model=dm,
            d=d,
            rope_base=cfg.rope_base,
            rope_pos_scale=cfg.rope_pos_scale,
        )
        self.adapters = {}  # matrix name -> LoRAAdapter
        self.merged = False

    def named_params(self, prefix):
        out = {f"{prefix}.norm": self.norm}
        for name, w in self.params.matrices().items():
            out[f"{prefix}.{name}"] = w
        for name, ad in self.adapters.items():
            out[f"{prefix}.{name}.lora_a"] = ad.a
            out[f"{prefix}.{name}.lora_b"] = ad.b
        return out

    def effective_params(self):
        if not self.adapters:
            return self.params
        mats = {}
        for name, w in self.params.matrices().items():
            ad = self.adapters.get(name)
            if ad is None:
                mats[name] = w
            else:
                delta = scale(matmul(transpose(ad.a), transpose(ad.b)), ad.alpha / ad.rank)
                mats[name] = w + delta
        return AttentionParams(
            w_q=mats["w_q"],
            w_k=mats["w_k"],
            w_v=mats["w_v"],
            w_o=mats["w_o"],
            head_count=self.params.head_count,
            d_model=self.params.d_model,
            d=self.params.d,
            rope_base=self.params.rope_base,
            rope_pos_scale=self.params.rope_pos_scale,
            use_rope=self.params.use_rope,
        )

    def forward(self, x, setting, rng=None):
        h = rms_norm(x, self.norm)
        p = self.effective_params()
        trace = None
        if setting.kind == "full":
            out = full_attention(h, p, causal=True)
        elif setting.kind == "sw":
            out = sliding_window_attention(h, p, window=setting.window)
        else:
            out, trace = se_attn_forward(h, p, setting.se_cfg, rng=rng)
        return x + out, trace


class HybridModel:
    def __init__(self, cfg):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        self.embedding = Tensor((rng.standard_normal((cfg.vocab, cfg.d)) / math.sqrt(cfg.d)).astype(dt), requires_grad=True)
        self.blocks = []
        for kind in cfg.layer_kinds():
            self.blocks.append(SSMLayer(cfg, rng) if kind == "ssm" else AttentionLayer(cfg, rng))
        self.final_norm = Tensor(np.ones(cfg.d, dtype=dt), requires_grad=True)
        if cfg.tied_head:
            self.head = None
        else:
            self.head = Tensor((rng.standard_normal((cfg.d, cfg.vocab)) / math.sqrt(cfg.d)).astype(dt), requires_grad=True)

    def attention_layers(self):
        return [(i, b) for i, b in enumerate(self.blocks) if isinstance(b, AttentionLayer)]

    def named_parameters(self):
        out = {"embedding": self.embedding}
        for i, block in enumerate(self.blocks):
            out.update(block.named_params(f"blocks.{i}"))
        out["final_norm"] = self.final_norm
        if self.head is not None:
            out["head"] = self.head
        return out

    def trainable_parameters(self):
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def parameter_count(self, trainable_only=False):
        params = self.trainable_parameters() if trainable_only else self.named_parameters()
        return sum(p.size for p in params.values())

    def set_all_trainable(self, flag):
        for p in self.named_parameters().values():
            p.requires_grad = flag


def expected_parameter_count(cfg):
    """Closed-form total parameter count for a freshly built model."""
    e, w = cfg.state_dim, cfg.conv_width
    ssm = cfg.d + cfg.d * 2 * e + w * e + e + e + e + e * cfg.d
    attn = cfg.d + 4 * cfg.d * cfg.d_model
    kinds = cfg.layer_kinds()
    total = cfg.vocab * cfg.d + cfg.d  # embedding + final norm
    if not cfg.tied_head:
        total += cfg.d * cfg.vocab
    total += sum(ssm if k == "ssm" else attn for k in kinds)
    return total


def model_forward(model, tokens, setting, step=0, collect_traces=False):
    """Causal LM logits for one token sequence.

    ``step`` seeds the per-layer chunk-size draws so identical (tokens,
    step) pairs replay bitwise identically.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size < 1:
        raise InputError("tokens must be a non-empty 1-d sequence")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab:
        raise InputError(f"token id out of range for vocab {model.config.vocab}")
    h = embedding_lookup(model.embedding, tokens)
    traces = []
    for li, block in enumerate(model.blocks):
        if isinstance(block, SSMLayer):
            h = block.forward(h)
        else:
            rng = np.random.default_rng([model.config.seed, li, step])
            h, trace = block.forward(h, setting, rng=rng)
            if collect_traces and trace is not None:
                traces.append((li, trace))
    h = rms_norm(h, model.final_norm)
    head = transpose(model.embedding) if model.head is None else model.head
    logits = matmul(h, head)
    return (logits, traces) if collect_traces else logits


class AdamW:
    """Adaptive moments with decoupled weight decay; frozen tensors are never touched."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update.astype(p.data.dtype)


def train_step(model, batch, optimizer, setting, step=0, pad_id=PAD_ID):
    """One optimizer step of mean next-token cross entropy over a batch of sequences."""
    optimizer.zero_grad()
    losses = []
    for i, seq in enumerate(batch):
        tokens = np.asarray(seq)
        if tokens.size < 2:
            raise InputError("training sequences need at least two tokens")
        logits = model_forward(model, tokens[:-1], setting, step=step * len(batch) + i)
        losses.append(cross_entropy_logits(logits, tokens[1:], ignore_index=pad_id))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    loss = scale(total, 1.0 / len(losses))
    value = loss.item()
    backward(loss)
    optimizer.step()
    return value


def greedy_generate(model, prompt_tokens, setting, max_new_tokens, stop_id=None, step=0):
    """Greedy decoding by full re-forward per emitted token (desk scale)."""
    tokens = list(np.asarray(prompt_tokens))
    out = []
    for _ in range(max_new_tokens):
        logits = model_forward(model, np.asarray(tokens), setting, step=step)
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        tokens.append(nxt)
        if stop_id is not None and nxt == stop_id:
            break
    return out


# checkpoint container: one JSON header line, then raw little-endian buffers


def _dtype_tag(np_dtype):
    return "<f8" if np_dtype == np.float64 else "<f4"


def adapter_manifest(model):
    entries = []
    for i, block in model.attention_layers():
        for matrix, ad in block.adapters.items():
            entries.append({"layer": i, "matrix": matrix, "rank": ad.rank, "alpha": ad.alpha})
    return entries


def save_checkpoint(path, model, extra=None):
    params = model.named_parameters()
    tag = _dtype_tag(model.config.np_dtype)
    manifest = []
    offset = 0
    buffers = []
    for name, p in params.items():
        raw = np.ascontiguousarray(p.data, dtype=tag).tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        buffers.append(raw)
        offset += len(raw)
    header = {
        "format": "spanattn-checkpoint",
        "version": 1,
        "dtype": tag,
        "model": asdict(model.config),
        "adapters": adapter_manifest(model),
        "params": manifest,
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for raw in buffers:
            f.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    if header.get("format") != "spanattn-checkpoint":
        raise UsageError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(**header["model"])
    model = HybridModel(cfg)
    if header.get("adapters"):
        from .adaptation import LoRAAdapter  # deferred: adaptation builds on this module

        for entry in header["adapters"]:
            block = model.blocks[entry["layer"]]
            w = block.params.matrices()[entry["matrix"]]
            block.adapters[entry["matrix"]] = LoRAAdapter.fresh(
                d_in=w.shape[0],
                d_out=w.shape[1],
                rank=entry["rank"],
                alpha=entry["alpha"],
                target=entry["matrix"],
                seed=0,
                dtype=cfg.np_dtype,
            )
    params = model.named_parameters()
    for entry in header["params"]:
        name = entry["name"]
        if name not in params:
            raise UsageError(f"checkpoint parameter {name} not present in the rebuilt model")
        arr = np.frombuffer(blob, dtype=header["dtype"], count=int(np.prod(entry["shape"])), offset=entry["offset"])
        params[name].data = arr.reshape(entry["shape"]).astype(cfg.np_dtype).copy()
    return model, header
