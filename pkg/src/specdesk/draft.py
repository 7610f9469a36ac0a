"""Draft layers and the specialist bank that routes draft positions to them.

A draft layer fuses [token embedding; previous-position feature] through a
bias-free linear map into one transformer block, then applies its own final
norm so its output lives in the same feature space the frozen target LM head
consumes. A bank holds one layer per specialist; `route` assigns each draft
position (0-based) to a 1-based specialist index. A bank with a single
specialist and unbounded n behaves exactly like the classic single-draft
setups.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .checkpoint import ArtifactError, read_container, write_container
from .model import KVCache, ModelConfig, TargetModel, block_forward, rotary_tables
from .rng import CounterRng
from .tensor import ContractError, Tensor


def normalize_n(n) -> int | None:
    """Positions-per-specialist; None encodes unbounded (single shared layer)."""
    if n is None or (isinstance(n, float) and math.isinf(n)):
        return None
    n = int(n)
    if n < 1:
        raise ContractError(f"positions per specialist must be >= 1 or unbounded, got {n}")
    return n


def route(position: int, n) -> int:
    """Specialist index (1-based) responsible for a 0-based draft position."""
    if position < 0:
        raise ContractError(f"draft position must be non-negative, got {position}")
    n = normalize_n(n)
    if n is None:
        return 1
    return position // n + 1


def specialist_count(depth: int, n) -> int:
    n = normalize_n(n)
    return 1 if n is None else (depth + n - 1) // n


class DraftLayer:
    """One fusion projection plus one transformer block and a final norm."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], dtype=np.float32):
        self.cfg = cfg
        self.params = params
        self.dtype = dtype
        self.cos, self.sin = rotary_tables(cfg.max_seq_len, cfg.head_dim, dtype)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: CounterRng, dtype=np.float32,
             requires_grad: bool = True) -> "DraftLayer":
        from .model import _init_block
        params: dict[str, Tensor] = {}
        params["fuse"] = Tensor(rng.normal((2 * cfg.d_model, cfg.d_model), 0.02, dtype),
                                requires_grad)
        _init_block(params, "block.", cfg, rng, dtype, requires_grad)
        params["final_norm"] = Tensor(np.ones(cfg.d_model, dtype=dtype), requires_grad)
        return cls(cfg, params, dtype)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def clone(self, requires_grad: bool = True, dtype=None) -> "DraftLayer":
        dtype = dtype or self.dtype
        params = {k: Tensor(v.values.astype(dtype), requires_grad)
                  for k, v in self.params.items()}
        return DraftLayer(self.cfg, params, dtype)

    def new_cache(self) -> KVCache:
        return KVCache(1, self.cfg.n_heads, self.cfg.head_dim, self.dtype)

    def fuse(self, emb: Tensor, feats: Tensor) -> Tensor:
        """[x; f] -> block input through the bias-free fusion projection."""
        if emb.shape[-1] != self.cfg.d_model or feats.shape[-1] != self.cfg.d_model:
            raise T.DimensionError(
                f"fusion expects {self.cfg.d_model}-wide embeddings and features, "
                f"got {emb.shape} and {feats.shape}")
        return T.matmul(T.concat(emb, feats, axis=-1), self.params["fuse"])

    def project_kv(self, x: Tensor, positions: np.ndarray):
        """Keys/values this layer would compute for block inputs x (B,S,d)."""
        B, S, d = x.shape
        H, dh = self.cfg.n_heads, self.cfg.head_dim
        h = T.rms_norm(x, self.params["block.attn_norm"], self.cfg.rms_norm_eps)
        def heads(t):
            return T.transpose(T.reshape(t, (B, S, H, dh)), (0, 2, 1, 3))
        k = T.rotary(heads(T.matmul(h, self.params["block.wk"])),
                     self.cos[positions], self.sin[positions])
        v = heads(T.matmul(h, self.params["block.wv"]))
        return k, v

    def forward(self, x: Tensor, positions: np.ndarray,
                ctx_kv: tuple | None, allow: np.ndarray):
        """Block + final norm over fused inputs; returns (features, k_new, v_new)."""
        out, k_new, v_new = block_forward(self.params, "block.", x, positions,
                                          self.cos, self.sin, self.cfg, ctx_kv, allow)
        feats = T.rms_norm(out, self.params["final_norm"], self.cfg.rms_norm_eps)
        return feats, k_new, v_new


def draft_forward(layer: DraftLayer, head: Tensor, emb: Tensor, feats: Tensor,
                  positions: np.ndarray, ctx_kv: tuple | None, allow: np.ndarray):
    """Fused-input forward returning next-token distributions and features.

    emb/feats: (B, S, d_model) token embeddings and preceding-step features.
    Returns (probs (B,S,V), features (B,S,d), k_new, v_new).
    """
    x = layer.fuse(emb, feats)
    out_feats, k_new, v_new = layer.forward(x, positions, ctx_kv, allow)
    logits = T.matmul(out_feats, head)
    return T.softmax(logits, axis=-1), out_feats, k_new, v_new


class SpecialistBank:
    """Ordered draft layers plus the routing parameter n and max depth."""

    def __init__(self, specialists: list[DraftLayer], n, depth: int, target: TargetModel):
        self.n = normalize_n(n)
        self.depth = int(depth)
        expected = specialist_count(self.depth, self.n)
        if len(specialists) != expected:
            raise ContractError(
                f"bank of {len(specialists)} specialists cannot cover depth {self.depth} "
                f"with n={self.n} (needs {expected})")
        self.specialists = specialists
        self.target = target

    @property
    def m(self) -> int:
        return len(self.specialists)

    @property
    def embedding(self) -> Tensor:
        return self.target.params["tok_emb"]

    @property
    def head(self) -> Tensor:
        return self.target.params["head"]

    def route(self, position: int) -> int:
        # Positions beyond the trained depth fall to the deepest specialist,
        # so depth-ablation runs past the bank's training depth stay defined.
        j = route(position, self.n)
        return min(j, self.m)

    def layer_for(self, position: int) -> DraftLayer:
        return self.specialists[self.route(position) - 1]

    @classmethod
    def init(cls, cfg: ModelConfig, target: TargetModel, n, depth: int, rng: CounterRng,
             dtype=np.float32, requires_grad: bool = True) -> "SpecialistBank":
        m = specialist_count(depth, n)
        return cls([DraftLayer.init(cfg, rng, dtype, requires_grad) for _ in range(m)],
                   n, depth, target)

    @classmethod
    def from_single(cls, layer: DraftLayer, target: TargetModel, n, depth: int,
                    requires_grad: bool = True) -> "SpecialistBank":
        """Replicate one trained layer into every specialist slot."""
        m = specialist_count(depth, n)
        return cls([layer.clone(requires_grad) for _ in range(m)], n, depth, target)

    def parameters(self) -> list[Tensor]:
        return [p for s in self.specialists for p in s.parameters()]

    def astype(self, dtype, requires_grad: bool = False) -> "SpecialistBank":
        target = self.target if self.target.dtype == dtype else self.target.astype(dtype)
        return SpecialistBank([s.clone(requires_grad, dtype) for s in self.specialists],
                              self.n, self.depth, target)


def bank_parameter_count(bank: SpecialistBank) -> dict:
    """Exact per-specialist and total counts; total is linear in m."""
    per = bank.specialists[0].parameter_count()
    return {
        "specialists": bank.m,
        "per_specialist": per,
        "total": bank.m * per,
        "shared_embedding": bank.embedding.size,
        "shared_head": bank.head.size,
    }


def save_bank(bank: SpecialistBank, path) -> None:
    from .model import model_config_dict
    header = {
        "n": bank.n,
        "m": bank.m,
        "depth": bank.depth,
        "fusion_bias": False,
        "model": model_config_dict(bank.specialists[0].cfg),
    }
    tensors = {}
    for j, spec in enumerate(bank.specialists):
        for name, p in spec.params.items():
            tensors[f"specialists.{j}.{name}"] = p.values
    write_container(path, "specialist-bank", header, tensors)


def load_bank(path, target: TargetModel, dtype=np.float32,
              requires_grad: bool = False) -> SpecialistBank:
    kind, header, tensors = read_container(path)
    if kind != "specialist-bank":
        raise ArtifactError(f"expected a specialist-bank checkpoint, got kind {kind!r}")
    cfg = ModelConfig(**header["model"])
    if cfg != target.cfg:
        raise ArtifactError(
            f"bank was built for model config {header['model']}, target differs: {target.cfg}")
    specialists = []
    for j in range(header["m"]):
        prefix = f"specialists.{j}."
        params = {k[len(prefix):]: Tensor(v.astype(dtype), requires_grad)
                  for k, v in tensors.items() if k.startswith(prefix)}
        specialists.append(DraftLayer(cfg, params, dtype))
    return SpecialistBank(specialists, header["n"], header["depth"], target)
