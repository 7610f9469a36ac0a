"""Tiny decoder-only transformer target model with exposed features.

Pre-norm blocks with RMS normalization and rotary position encoding. The
"feature" at a position is the final-norm output of the last block, i.e. the
vector the LM head multiplies; draft layers consume and predict these.
Byte-level tokenizer: id = byte + 2, with BOS=0 and EOS=1.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .rng import CounterRng
from .tensor import Tensor

BOS_ID = 0
EOS_ID = 1
BYTE_OFFSET = 2


class CapacityError(RuntimeError):
    """Sequence does not fit the model's maximum context length."""


@dataclass
class ModelConfig:
    vocab_size: int = 258
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 512
    rms_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        return 4 * self.d_model


def tokenize(text: str | bytes) -> np.ndarray:
    """Byte-level ids with BOS prepended; bijective with detokenize."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = np.empty(len(data) + 1, dtype=np.int64)
    ids[0] = BOS_ID
    if data:
        ids[1:] = np.frombuffer(data, dtype=np.uint8).astype(np.int64) + BYTE_OFFSET
    return ids


def detokenize(ids) -> bytes:
    arr = np.asarray(ids, dtype=np.int64)
    return bytes((arr[arr >= BYTE_OFFSET] - BYTE_OFFSET).astype(np.uint8).tolist())


def rotary_tables(max_len: int, head_dim: int, dtype=np.float32, base: float = 10000.0):
    """cos/sin tables of shape (max_len, head_dim/2)."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.outer(np.arange(max_len, dtype=np.float64), inv_freq)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


class KVCache:
    """Per-layer key/value arrays over a committed prefix.

    Keys/values have shape (n_heads, length, head_dim); `length` is the
    committed length and truncation never exceeds it.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int, dtype=np.float32):
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.dtype = dtype
        self.keys = [np.zeros((n_heads, 0, head_dim), dtype=dtype) for _ in range(n_layers)]
        self.vals = [np.zeros((n_heads, 0, head_dim), dtype=dtype) for _ in range(n_layers)]

    @property
    def length(self) -> int:
        return self.keys[0].shape[1]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        self.keys[layer] = np.concatenate([self.keys[layer], k], axis=1)
        self.vals[layer] = np.concatenate([self.vals[layer], v], axis=1)

    def truncate(self, length: int) -> None:
        if length > self.length:
            raise ValueError(f"cannot truncate cache of length {self.length} to {length}")
        self.keys = [k[:, :length] for k in self.keys]
        self.vals = [v[:, :length] for v in self.vals]

    def clone(self) -> "KVCache":
        c = KVCache(len(self.keys), self.n_heads, self.head_dim, self.dtype)
        c.keys = [k.copy() for k in self.keys]
        c.vals = [v.copy() for v in self.vals]
        return c


def _init_block(params: dict, prefix: str, cfg: ModelConfig, rng: CounterRng,
                dtype, requires_grad: bool) -> None:
    d, ff = cfg.d_model, cfg.ffn_hidden
    scale_out = 0.02 / np.sqrt(2.0 * cfg.n_layers)
    spec = {
        "wq": ((d, d), 0.02), "wk": ((d, d), 0.02), "wv": ((d, d), 0.02),
        "wo": ((d, d), scale_out),
        "w_gate": ((d, ff), 0.02), "w_up": ((d, ff), 0.02), "w_down": ((ff, d), scale_out),
    }
    for name, (shape, std) in spec.items():
        params[f"{prefix}{name}"] = Tensor(rng.normal(shape, std, dtype), requires_grad)
    params[f"{prefix}attn_norm"] = Tensor(np.ones(d, dtype=dtype), requires_grad)
    params[f"{prefix}ffn_norm"] = Tensor(np.ones(d, dtype=dtype), requires_grad)


def block_forward(params: dict, prefix: str, x: Tensor, positions: np.ndarray,
                  cos: np.ndarray, sin: np.ndarray, cfg: ModelConfig,
                  ctx_kv: tuple[np.ndarray, np.ndarray] | None,
                  allow: np.ndarray):
    """One pre-norm transformer block.

    x: (B, S, d). ctx_kv: optional context (K, V) prepended to this call's
    keys, either numpy arrays of shape (H, C, dh) (cached, constant) or
    Tensors of shape (B, H, C, dh) (differentiable banks). allow: bool
    (S, C+S) attention mask. Returns the block output plus this call's new
    key/value tensors (B, H, S, dh).
    """
    B, S, d = x.shape
    H, dh = cfg.n_heads, cfg.head_dim
    p = lambda n: params[prefix + n]

    h = T.rms_norm(x, p("attn_norm"), cfg.rms_norm_eps)
    def heads(t):  # (B,S,d) -> (B,H,S,dh)
        return T.transpose(T.reshape(t, (B, S, H, dh)), (0, 2, 1, 3))
    q = T.rotary(heads(T.matmul(h, p("wq"))), cos[positions], sin[positions])
    k_new = T.rotary(heads(T.matmul(h, p("wk"))), cos[positions], sin[positions])
    v_new = heads(T.matmul(h, p("wv")))

    if ctx_kv is not None:
        ctx_k, ctx_v = ctx_kv
        if not isinstance(ctx_k, Tensor):
            ctx_k = Tensor(np.broadcast_to(ctx_k[None], (B,) + ctx_k.shape))
            ctx_v = Tensor(np.broadcast_to(ctx_v[None], (B,) + ctx_v.shape))
        K = T.concat(ctx_k, k_new, axis=2)
        V = T.concat(ctx_v, v_new, axis=2)
    else:
        K, V = k_new, v_new

    scores = T.scale(T.matmul(q, T.transpose(K, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = np.where(allow, x.dtype.type(0), x.dtype.type(-1e30))[None, None]
    att = T.softmax(scores, axis=-1, bias=mask)
    ctx = T.reshape(T.transpose(T.matmul(att, V), (0, 2, 1, 3)), (B, S, d))
    x = T.add(x, T.matmul(ctx, p("wo")))

    h2 = T.rms_norm(x, p("ffn_norm"), cfg.rms_norm_eps)
    gated = T.mul(T.silu(T.matmul(h2, p("w_gate"))), T.matmul(h2, p("w_up")))
    x = T.add(x, T.matmul(gated, p("w_down")))
    return x, k_new, v_new


def causal_allow(ctx_len: int, n_new: int) -> np.ndarray:
    """Default mask: new rows see the whole context plus a causal window."""
    allow = np.ones((n_new, ctx_len + n_new), dtype=bool)
    allow[:, ctx_len:] = np.tril(np.ones((n_new, n_new), dtype=bool))
    return allow


class TargetModel:
    """Decoder-only transformer exposing logits and pre-head features."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], dtype=np.float32):
        self.cfg = cfg
        self.params = params
        self.dtype = dtype
        self.cos, self.sin = rotary_tables(cfg.max_seq_len, cfg.head_dim, dtype)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: CounterRng, dtype=np.float32,
             requires_grad: bool = True) -> "TargetModel":
        params: dict[str, Tensor] = {}
        params["tok_emb"] = Tensor(rng.normal((cfg.vocab_size, cfg.d_model), 0.02, dtype),
                                   requires_grad)
        for i in range(cfg.n_layers):
            _init_block(params, f"layers.{i}.", cfg, rng, dtype, requires_grad)
        params["final_norm"] = Tensor(np.ones(cfg.d_model, dtype=dtype), requires_grad)
        params["head"] = Tensor(rng.normal((cfg.d_model, cfg.vocab_size), 0.02, dtype),
                                requires_grad)
        return cls(cfg, params, dtype)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype, requires_grad: bool = False) -> "TargetModel":
        params = {k: Tensor(v.values.astype(dtype), requires_grad) for k, v in self.params.items()}
        return TargetModel(self.cfg, params, dtype)

    def new_cache(self) -> KVCache:
        return KVCache(self.cfg.n_layers, self.cfg.n_heads, self.cfg.head_dim, self.dtype)

    def forward_with_features(self, token_ids, cache: KVCache | None = None,
                              positions: np.ndarray | None = None,
                              allow: np.ndarray | None = None,
                              update_cache: bool = True):
        """Run new tokens through the model.

        token_ids: (S,) for inference or (B, S) for training. With a cache,
        only the new positions are computed; `allow` (S, cache+S) overrides
        the causal mask (used for tree verification), and `update_cache=False`
        leaves the cache untouched and returns the new per-layer K/V instead.

        Returns (logits, features[, new_kv]); shapes follow the input rank.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        B, S = ids.shape
        ctx_len = cache.length if cache is not None else 0
        if positions is None:
            positions = np.arange(ctx_len, ctx_len + S)
        if positions.max(initial=0) >= self.cfg.max_seq_len:
            raise CapacityError(
                f"sequence of {ctx_len + S} exceeds max_seq_len {self.cfg.max_seq_len}")
        if allow is None:
            allow = causal_allow(ctx_len, S)

        x = T.embedding(self.params["tok_emb"], ids)
        new_kv = []
        for i in range(self.cfg.n_layers):
            ctx_kv = (cache.keys[i], cache.vals[i]) if cache is not None else None
            x, k_new, v_new = block_forward(self.params, f"layers.{i}.", x, positions,
                                            self.cos, self.sin, self.cfg, ctx_kv, allow)
            if cache is not None:
                new_kv.append((k_new.values[0], v_new.values[0]))
        features = T.rms_norm(x, self.params["final_norm"], self.cfg.rms_norm_eps)
        logits = T.matmul(features, self.params["head"])
        if squeeze:
            logits = T.reshape(logits, (S, self.cfg.vocab_size))
            features = T.reshape(features, (S, self.cfg.d_model))
        if cache is not None and update_cache:
            for i, (k, v) in enumerate(new_kv):
                cache.append(i, k, v)
        if cache is not None and not update_cache:
            return logits, features, new_kv
        return logits, features


def sample_token(logits, temperature: float, rng: CounterRng) -> int:
    """Argmax (lowest index wins ties) at T=0, else a softmax draw."""
    row = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    if not np.isfinite(row).all():
        raise T.NumericError("sample_token got non-finite logits")
    if temperature < 0:
        raise T.ContractError("temperature must be >= 0")
    if temperature == 0:
        return int(np.argmax(row))
    z = row.astype(np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return rng.categorical(p)


def softmax_probs(logits, temperature: float) -> np.ndarray:
    """Float64 probability vector for verification math."""
    row = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    z = row.astype(np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()


def model_config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def save_target(model: TargetModel, path) -> None:
    from .checkpoint import write_container
    write_container(path, "target-model", model_config_dict(model.cfg),
                    {k: v.values for k, v in model.params.items()})


def load_target(path, dtype=np.float32, requires_grad: bool = False) -> TargetModel:
    from .checkpoint import read_container, ArtifactError
    kind, header, tensors = read_container(path)
    if kind != "target-model":
        raise ArtifactError(f"expected a target-model checkpoint, got kind {kind!r}")
    cfg = ModelConfig(**header)
    params = {k: Tensor(v.astype(dtype), requires_grad) for k, v in tensors.items()}
    return TargetModel(cfg, params, dtype)
