"""Target-model pretraining, corpus distillation and draft training regimes.

Three regimes share one unrolled training core:
  eagle: teacher forcing, single layer, one unroll step;
  hass:  single layer, L unroll steps feeding its own features back in;
  poss:  a specialist bank, L unroll steps with per-position routed losses.
eagle == hass at L=1 and hass == poss with one specialist, bit for bit, since
they run the identical code path.

At unroll step k (1-based), the active specialist attends a composite key
bank: keys from step m at sequence offset d=s-s' are visible iff
m == max(1, k-d), which mirrors inference where the d-th ancestor of a draft
query was produced d steps earlier and everything older used target features.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import read_container, write_container
from .draft import SpecialistBank
from .model import BOS_ID, ModelConfig, TargetModel, model_config_dict
from .rng import CounterRng
from .tensor import AdamW, ContractError, Tensor


@dataclass
class TrainConfig:
    regime: str = "poss"            # eagle | hass | poss
    n: int | None = 1               # positions per specialist (poss only; None = unbounded)
    unroll_depth: int = 6           # L_train
    w: float = 0.1                  # token-loss weight
    k_top: int = 10                 # restricted-distillation support size
    learning_rate: float = 1e-3
    epochs: int = 1
    steps: int = 500                # step cap (plateau may stop earlier for the target)
    batch_size: int = 4
    seed: int = 0
    detach_between_steps: bool = True
    weight_decay: float = 0.01
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.regime not in ("eagle", "hass", "poss"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.unroll_depth < 1:
            raise ValueError("unroll_depth must be >= 1")
        if self.w < 0:
            raise ValueError("w must be >= 0")


@dataclass
class LossBreakdown:
    """Loss components; aggregates are sums over unroll steps."""
    l_feature: float
    l_token: float
    l_topk: float
    l_total: float
    per_step: list[dict] = field(default_factory=list)

    @classmethod
    def combine(cls, steps: list[dict], w: float) -> "LossBreakdown":
        lf = sum(s["l_feature"] for s in steps)
        lt = sum(s["l_token"] for s in steps)
        lk = sum(s["l_topk"] for s in steps)
        return cls(lf, lt, lk, lf + w * lt + lk, steps)


def total_loss(l_feature: float, l_token: float, l_topk: float, w: float = 0.1) -> float:
    """Scalar combination used everywhere: feature + w * token + top-K."""
    return l_feature + w * l_token + l_topk


@dataclass
class DistilledExample:
    tokens: np.ndarray        # (N,) int64, BOS-led window
    features: np.ndarray      # (N, d) float32 target features
    topk_ids: np.ndarray      # (N, K) int64, teacher's K most likely next tokens
    topk_probs: np.ndarray    # (N, K) float32, sorted descending

    def __post_init__(self):
        if len(self.tokens) != len(self.features):
            raise ValueError("feature rows must match token count")


# ---------------------------------------------------------------------------
# corpus windows and target-model pretraining
# ---------------------------------------------------------------------------

def corpus_windows(corpus_ids: np.ndarray, window: int) -> list[np.ndarray]:
    """Contiguous BOS-led slices of at most `window` tokens (never truncates)."""
    body = window - 1
    out = []
    for start in range(0, len(corpus_ids), body):
        chunk = corpus_ids[start:start + body]
        if len(chunk) < 8:  # drop a uselessly small tail window
            continue
        out.append(np.concatenate([[BOS_ID], chunk]).astype(np.int64))
    return out


def lm_loss(model: TargetModel, ids: np.ndarray) -> Tensor:
    """Mean next-token NLL over a (B, N) batch."""
    logits, _ = model.forward_with_features(ids)
    B, N = ids.shape
    lsm = T.log_softmax(logits, axis=-1)
    tgt = ids[:, 1:]
    picked = T.gather_last(T.masked_rows(T.reshape(lsm, (B * N, model.cfg.vocab_size)),
                                         np.tile(np.arange(N) < N - 1, B)),
                           tgt.reshape(-1, 1))
    return T.scale(T.tmean(picked), -1.0)


def train_target(model: TargetModel, corpus_ids: np.ndarray, *, window: int = 128,
                 batch_size: int = 8, steps: int = 1000, learning_rate: float = 1e-3,
                 seed: int = 0, weight_decay: float = 0.01, grad_clip: float = 1.0,
                 plateau_patience: int = 0, plateau_tol: float = 1e-3,
                 log_fn=None) -> list[float]:
    """Next-token pretraining; stops at the step cap or on a loss plateau."""
    rng = CounterRng(seed).child(7)
    windows = corpus_windows(corpus_ids, window)
    opt = AdamW(model.parameters(), lr=learning_rate, betas=(0.9, 0.95),
                weight_decay=weight_decay)
    history: list[float] = []
    order: list[int] = []
    for step in range(steps):
        if len(order) < batch_size:
            fresh = list(range(len(windows)))
            rng.shuffle(fresh)
            order.extend(fresh)
        batch_idx = [order.pop() for _ in range(batch_size)]
        n_min = min(len(windows[i]) for i in batch_idx)
        ids = np.stack([windows[i][:n_min] for i in batch_idx])
        t0 = time.perf_counter_ns()
        opt.zero_grad()
        loss = lm_loss(model, ids)
        loss.backward()
        opt.clip_grad_norm(grad_clip)
        opt.step()
        history.append(loss.item())
        if log_fn:
            log_fn({"step": step, "loss": history[-1],
                    "wall_ms": (time.perf_counter_ns() - t0) / 1e6})
        if plateau_patience and len(history) >= 2 * plateau_patience:
            recent = np.mean(history[-plateau_patience:])
            prior = np.mean(history[-2 * plateau_patience:-plateau_patience])
            if prior - recent < plateau_tol:
                break
    return history


def heldout_lm_loss(model: TargetModel, corpus_ids: np.ndarray, window: int = 128,
                    max_windows: int = 16) -> float:
    windows = corpus_windows(corpus_ids, window)[:max_windows]
    losses = [lm_loss(model, w[None]).item() for w in windows]
    return float(np.mean(losses))


def unigram_cross_entropy(train_ids: np.ndarray, eval_ids: np.ndarray,
                          vocab_size: int = 258) -> float:
    """Add-one-smoothed unigram NLL of eval under train counts (nats)."""
    counts = np.bincount(train_ids, minlength=vocab_size).astype(np.float64) + 1.0
    probs = counts / counts.sum()
    return float(-np.log(probs[eval_ids]).mean())


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

def distill_corpus(target: TargetModel, corpus_ids: np.ndarray, k_top: int = 10,
                   window: int = 128) -> list[DistilledExample]:
    """Teacher features and top-K next-token distributions per window."""
    examples = []
    head = target.params["head"].values
    for ids in corpus_windows(corpus_ids, window):
        _, feats = target.forward_with_features(ids)
        f = feats.values.astype(np.float32)
        logits = (f @ head).astype(np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=-1, keepdims=True)
        top_ids = np.argsort(-probs, axis=-1, kind="stable")[:, :k_top]
        top_p = np.take_along_axis(probs, top_ids, axis=-1)
        examples.append(DistilledExample(ids, f, top_ids.astype(np.int64),
                                         top_p.astype(np.float32)))
    return examples


def save_distilled(examples: list[DistilledExample], cfg: ModelConfig, k_top: int,
                   path) -> None:
    tensors = {}
    for i, ex in enumerate(examples):
        tensors[f"tokens/{i}"] = ex.tokens.astype(np.float32)
        tensors[f"features/{i}"] = ex.features
        tensors[f"topk_ids/{i}"] = ex.topk_ids.astype(np.float32)
        tensors[f"topk_probs/{i}"] = ex.topk_probs
    header = {"model": model_config_dict(cfg), "k_top": k_top, "count": len(examples)}
    write_container(path, "distilled", header, tensors)


def load_distilled(path) -> tuple[list[DistilledExample], dict]:
    from .checkpoint import ArtifactError
    kind, header, tensors = read_container(path)
    if kind != "distilled":
        raise ArtifactError(f"expected a distilled dataset, got kind {kind!r}")
    examples = []
    for i in range(header["count"]):
        examples.append(DistilledExample(
            tensors[f"tokens/{i}"].astype(np.int64),
            tensors[f"features/{i}"],
            tensors[f"topk_ids/{i}"].astype(np.int64),
            tensors[f"topk_probs/{i}"],
        ))
    return examples, header


# ---------------------------------------------------------------------------
# restricted top-K loss
# ---------------------------------------------------------------------------

def loss_topk(pred_logits: Tensor, topk_ids: np.ndarray, topk_probs: np.ndarray) -> Tensor:
    """Cross entropy with teacher and prediction renormalized on the K ids."""
    ids = np.asarray(topk_ids)
    if ids.ndim == 1:
        if len(set(ids.tolist())) != len(ids):
            raise ContractError("top-K ids must be distinct")
        ids = ids[None]
        topk_probs = np.asarray(topk_probs)[None]
        pred_logits = T.reshape(pred_logits, (1, pred_logits.shape[-1]))
    q = np.asarray(topk_probs, dtype=np.float64)
    qhat = (q / q.sum(axis=-1, keepdims=True)).astype(pred_logits.dtype)
    rows = T.cross_entropy_rows(T.gather_last(pred_logits, ids), qhat)
    return T.tmean(rows)


# ---------------------------------------------------------------------------
# the unrolled draft-training core
# ---------------------------------------------------------------------------

def _step_allow_mask(n: int, k: int) -> np.ndarray:
    """Visibility of composite keys [bank 1 .. bank k-1, self] for step k."""
    if k == 1:
        return np.tril(np.ones((n, n), dtype=bool))
    parts = [np.tril(np.ones((n, n), dtype=bool), k=-(k - 1))]
    for m in range(2, k):
        parts.append(np.eye(n, k=-(k - m), dtype=bool))
    parts.append(np.eye(n, dtype=bool))
    return np.concatenate(parts, axis=1)


def _teacher_probs(features: np.ndarray, head: np.ndarray) -> np.ndarray:
    logits = (features.astype(np.float64) @ head.astype(np.float64))
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return (p / p.sum(axis=-1, keepdims=True))


def unrolled_train_step(bank: SpecialistBank, batch: list[DistilledExample],
                        config: TrainConfig, unroll_depth: int) -> tuple[LossBreakdown, Tensor]:
    """Forward all unroll steps and return the LossBreakdown plus the loss node.

    Losses at draft position i = k-1 update only the specialist route(i);
    features crossing step boundaries are detached unless configured otherwise.
    """
    n_min = min(len(ex.tokens) for ex in batch)
    tokens = np.stack([ex.tokens[:n_min] for ex in batch])
    teacher = np.stack([ex.features[:n_min] for ex in batch])
    topk_ids = np.stack([ex.topk_ids[:n_min] for ex in batch])
    topk_probs = np.stack([ex.topk_probs[:n_min] for ex in batch])
    B, N = tokens.shape
    d = bank.specialists[0].cfg.d_model
    head = bank.head
    head_np = head.values

    if unroll_depth > max(N - 2, 1):
        raise ContractError(f"unroll depth {unroll_depth} too deep for window {N}")

    emb = T.embedding(bank.embedding, tokens)  # constant, embedding is frozen
    teacher_dist = _teacher_probs(teacher, head_np)
    positions = np.arange(N)

    # step-1 input features: teacher features shifted right, zeros lead in
    g_np = np.zeros_like(teacher)
    g_np[:, 1:] = teacher[:, :-1]
    g_cur: Tensor = Tensor(g_np, dtype=emb.dtype)

    bank_kv: dict[tuple[int, int], tuple[Tensor, Tensor]] = {}
    raw_feats: dict[int, Tensor] = {1: g_cur}
    step_losses: list[dict] = []
    loss_nodes: list[Tensor] = []

    for k in range(1, unroll_depth + 1):
        sid = bank.route(k - 1)
        layer = bank.specialists[sid - 1]
        # make sure this specialist has keys/values for every earlier bank
        for m in range(1, k):
            if (sid, m) not in bank_kv:
                x_m = layer.fuse(emb, raw_feats[m])
                bank_kv[(sid, m)] = layer.project_kv(x_m, positions)
        x_k = layer.fuse(emb, g_cur)
        ctx = None
        if k > 1:
            ks = [bank_kv[(sid, m)][0] for m in range(1, k)]
            vs = [bank_kv[(sid, m)][1] for m in range(1, k)]
            ck, cv = ks[0], vs[0]
            for t_k, t_v in zip(ks[1:], vs[1:]):
                ck = T.concat(ck, t_k, axis=2)
                cv = T.concat(cv, t_v, axis=2)
            ctx = (ck, cv)
        allow = _step_allow_mask(N, k)
        h_k, k_new, v_new = layer.forward(x_k, positions, ctx, allow)
        bank_kv[(sid, k)] = (k_new, v_new)

        valid = np.zeros(N, dtype=bool)
        valid[k:N - 1] = True
        flat_mask = np.tile(valid, B)
        h_sel = T.masked_rows(T.reshape(h_k, (B * N, d)), flat_mask)
        f_sel = teacher.reshape(B * N, d)[flat_mask]
        logits_sel = T.matmul(h_sel, head)

        l_feature = T.smooth_l1(h_sel, f_sel)
        l_token = T.tmean(T.cross_entropy_rows(
            logits_sel, teacher_dist.reshape(B * N, -1)[flat_mask].astype(h_k.dtype)))
        l_topk = loss_topk(logits_sel,
                           topk_ids.reshape(B * N, -1)[flat_mask],
                           topk_probs.reshape(B * N, -1)[flat_mask])
        l_step = T.add(T.add(l_feature, T.scale(l_token, config.w)), l_topk)
        loss_nodes.append(l_step)
        step_losses.append({
            "step": k, "specialist": sid,
            "l_feature": l_feature.item(), "l_token": l_token.item(),
            "l_topk": l_topk.item(), "l_total": l_step.item(),
            "positions": int(valid.sum()),
        })

        if k < unroll_depth:
            nxt = T.shift_right_rows(h_k)
            g_cur = nxt.detach() if config.detach_between_steps else nxt
            raw_feats[k + 1] = g_cur

    total = loss_nodes[0]
    for node in loss_nodes[1:]:
        total = T.add(total, node)
    return LossBreakdown.combine(step_losses, config.w), total


def train_step_eagle(layer_bank: SpecialistBank, batch, config: TrainConfig,
                     opt: AdamW) -> LossBreakdown:
    """Teacher-forced single-step update (next position only)."""
    return _apply_step(layer_bank, batch, config, opt, unroll_depth=1)


def train_step_hass(layer_bank: SpecialistBank, batch, config: TrainConfig,
                    opt: AdamW) -> LossBreakdown:
    """Multi-step self-feature update on a single shared layer."""
    return _apply_step(layer_bank, batch, config, opt, unroll_depth=config.unroll_depth)


def train_step_poss(bank: SpecialistBank, batch, config: TrainConfig,
                    opt: AdamW) -> LossBreakdown:
    """Multi-step update with per-position routed specialists."""
    return _apply_step(bank, batch, config, opt, unroll_depth=config.unroll_depth)


def _apply_step(bank: SpecialistBank, batch, config: TrainConfig, opt: AdamW,
                unroll_depth: int) -> LossBreakdown:
    opt.zero_grad()
    breakdown, total = unrolled_train_step(bank, batch, config, unroll_depth)
    total.backward()
    if config.grad_clip:
        opt.clip_grad_norm(config.grad_clip)
    opt.step()
    return breakdown


def train_draft(bank: SpecialistBank, examples: list[DistilledExample],
                config: TrainConfig, log_fn=None) -> list[LossBreakdown]:
    """Run the configured regime over the distilled dataset."""
    if config.regime == "eagle":
        step_fn, depth = train_step_eagle, 1
    elif config.regime == "hass":
        step_fn, depth = train_step_hass, config.unroll_depth
    else:
        step_fn, depth = train_step_poss, config.unroll_depth
    expected = 1 if config.regime in ("eagle", "hass") else None
    if expected is not None and bank.m != expected:
        raise ContractError(f"{config.regime} training expects a single-layer bank, got m={bank.m}")

    rng = CounterRng(config.seed).child(11)
    opt = AdamW(bank.parameters(), lr=config.learning_rate, betas=(0.9, 0.95),
                weight_decay=config.weight_decay)
    history: list[LossBreakdown] = []
    order: list[int] = []
    total_steps = config.steps or (config.epochs * max(1, len(examples) // config.batch_size))
    for step in range(total_steps):
        if len(order) < config.batch_size:
            fresh = list(range(len(examples)))
            rng.shuffle(fresh)
            order.extend(fresh)
        batch = [examples[order.pop()] for _ in range(config.batch_size)]
        t0 = time.perf_counter_ns()
        breakdown = step_fn(bank, batch, config, opt)
        history.append(breakdown)
        if log_fn:
            log_fn({"step": step, "regime": config.regime,
                    "l_feature": breakdown.l_feature, "l_token": breakdown.l_token,
                    "l_topk": breakdown.l_topk, "l_total": breakdown.l_total,
                    "wall_ms": (time.perf_counter_ns() - t0) / 1e6})
    return history


def jsonl_logger(stream):
    def log(record: dict) -> None:
        stream.write(json.dumps(record) + "\n")
    return log
