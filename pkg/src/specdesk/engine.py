"""Draft-then-verify generation: tree drafting, verification, cache commits.

One Session owns a target KV cache, one private cache per specialist, and the
RNG stream. Caches always cover committed positions 0..c-2; the last
committed token ("pending") rides along as row 0 of the next verification
batch, which both produces its cache entry and the target distribution that
level-0 drafts are verified against.

Greedy verification is token-identical to vanilla decoding. Stochastic
verification uses residual rejection sampling: chain mode (width 1) is the
distribution-exact reference; tree mode applies the same rule per level
across sibling candidates drawn i.i.d. from the draft distribution (exact
while the token budget keeps every sibling; pruning trades exactness for
coverage and is the documented tree-mode approximation).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .draft import SpecialistBank
from .metrics import RoundRecord
from .model import CapacityError, EOS_ID, TargetModel, sample_token, softmax_probs
from .rng import CounterRng
from .tensor import ContractError, Tensor

METHODS = ("vanilla", "single-draft", "poss")


class ConfigurationError(ValueError):
    """Engine configuration violates its invariants."""


@dataclass
class EngineConfig:
    method: str = "poss"
    depth: int = 6
    width: int = 4
    total_tokens: int = 16
    temperature: float = 0.0
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.width < 1:
            raise ConfigurationError("width must be >= 1")
        if self.total_tokens < self.depth:
            raise ConfigurationError(
                f"total_tokens {self.total_tokens} cannot cover depth {self.depth}")
        if self.temperature < 0:
            raise ConfigurationError("temperature must be >= 0")


@dataclass
class TreeNode:
    token: int
    parent: int                  # node index; -1 means the root (pending token)
    depth: int                   # draft position, 0-based
    prob: float                  # draft probability of this token
    cum_logp: float
    input_feature: np.ndarray    # feature paired with this token at its input
    ancestors: list[int] = field(default_factory=list)  # node indices, root side first
    output_feature: np.ndarray | None = None
    child_dist: np.ndarray | None = None  # draft distribution its children came from
    # duplicate draws stay in the rejection algebra as candidates but can
    # never be accepted (their residual mass is zero), so they grow no subtree
    expandable: bool = True


@dataclass
class DraftTree:
    nodes: list[TreeNode] = field(default_factory=list)
    levels: list[list[int]] = field(default_factory=list)
    level_specialists: list[int] = field(default_factory=list)  # audit log, 1-based
    root_dist: np.ndarray | None = None


@dataclass
class VerificationResult:
    accepted_nodes: list[int]    # node indices along the accepted path
    accepts: list[bool]          # A_1..A_L
    bonus_token: int
    committed: list[int]         # accepted tokens + bonus

    @property
    def committed_count(self) -> int:
        return len(self.committed)


def generate_vanilla(target: TargetModel, prompt_ids, config: EngineConfig):
    """One-token-per-forward autoregressive decoding (speed baseline)."""
    prompt = [int(t) for t in np.asarray(prompt_ids)]
    if len(prompt) >= target.cfg.max_seq_len:
        raise CapacityError(f"prompt of {len(prompt)} tokens does not fit "
                            f"max_seq_len {target.cfg.max_seq_len}")
    rng = CounterRng(config.seed)
    t0 = time.perf_counter_ns()
    cache = target.new_cache()
    out = list(prompt)
    if config.max_new_tokens > 0:
        logits, _ = target.forward_with_features(np.asarray(prompt), cache=cache)
        while True:
            nxt = sample_token(logits.values[-1], config.temperature, rng)
            out.append(nxt)
            if nxt == EOS_ID or len(out) - len(prompt) >= config.max_new_tokens:
                break
            if len(out) >= target.cfg.max_seq_len:
                break
            logits, _ = target.forward_with_features(np.asarray([nxt]), cache=cache)
    wall_ns = time.perf_counter_ns() - t0
    return out, wall_ns


class Session:
    """State for one speculative generation: caches, RNG, committed tokens."""

    def __init__(self, target: TargetModel, bank: SpecialistBank, config: EngineConfig):
        if bank.target.dtype != target.dtype:
            raise ContractError("bank and target must share a dtype")
        self.target = target
        self.bank = bank
        self.config = config
        self.rng = CounterRng(config.seed)
        self.target_cache = target.new_cache()
        self.spec_caches = [layer.new_cache() for layer in bank.specialists]
        self.committed: list[int] = []
        self.tip_feature = np.zeros(target.cfg.d_model, dtype=target.dtype)
        self.records: list[RoundRecord] = []

    @property
    def pending(self) -> int:
        return self.committed[-1]

    def prefill(self, prompt_ids) -> None:
        prompt = [int(t) for t in np.asarray(prompt_ids)]
        if len(prompt) >= self.target.cfg.max_seq_len:
            raise CapacityError(f"prompt of {len(prompt)} tokens does not fit "
                                f"max_seq_len {self.target.cfg.max_seq_len}")
        self.committed = list(prompt)
        if len(prompt) > 1:
            body = np.asarray(prompt[:-1])
            _, feats = self.target.forward_with_features(body, cache=self.target_cache)
            f = feats.values
            self.tip_feature = f[-1]
            prev = np.zeros_like(f)
            prev[1:] = f[:-1]
            emb = T.embedding(self.bank.embedding, body[None])
            positions = np.arange(len(body))
            for layer, cache in zip(self.bank.specialists, self.spec_caches):
                x = layer.fuse(emb, Tensor(prev[None], dtype=self.target.dtype))
                k, v = layer.project_kv(x, positions)
                cache.append(0, k.values[0], v.values[0])

    # ------------------------------------------------------------------
    # draft phase
    # ------------------------------------------------------------------

    def draft_round(self, depth: int) -> tuple[DraftTree, dict[int, int]]:
        """Build the round's candidate tree level by level.

        Level i runs specialist route(i). Each new specialist first projects
        its own keys/values for the round's earlier inputs (root + retained
        nodes), since caches are not shared across layers. The round KV block
        keeps the fixed row order [root, node_0, node_1, ...]; the current
        frontier's rows are appended right after it is forwarded.
        """
        cfg = self.config
        c = len(self.committed)
        base_pos = c - 1
        tree = DraftTree()
        specialist_ns: dict[int, int] = {}
        emb_table = self.bank.embedding.values
        head = self.bank.head

        cur_sid = -1
        round_k = round_v = None
        kv_rows: list[int] = []      # node ids (-1 = root) in round-KV row order
        row_of: dict[int, int] = {}
        frontier = [-1]              # node indices; -1 is the root (pending token)
        retained = 0

        def node_token(idx: int) -> int:
            return self.pending if idx == -1 else tree.nodes[idx].token

        def node_feat(idx: int) -> np.ndarray:
            return self.tip_feature if idx == -1 else tree.nodes[idx].input_feature

        def node_pos(idx: int) -> int:
            return base_pos if idx == -1 else base_pos + 1 + tree.nodes[idx].depth

        def raw_inputs(indices: list[int]):
            toks = np.array([node_token(i) for i in indices])
            feats = np.stack([node_feat(i) for i in indices]).astype(self.target.dtype)
            positions = np.array([node_pos(i) for i in indices])
            return toks, feats, positions

        for level in range(depth):
            sid = self.bank.route(level)
            layer = self.bank.specialists[sid - 1]
            t0 = time.perf_counter_ns()
            if sid != cur_sid:
                # a fresh specialist projects its own keys/values over the
                # round's earlier inputs (root + forwarded draft tokens)
                cur_sid = sid
                if kv_rows:
                    toks, feats, positions = raw_inputs(kv_rows)
                    x = layer.fuse(Tensor(emb_table[toks][None]), Tensor(feats[None]))
                    k, v = layer.project_kv(x, positions)
                    round_k, round_v = k.values[0], v.values[0]
                else:
                    H, dh = self.target.cfg.n_heads, self.target.cfg.head_dim
                    round_k = np.zeros((H, 0, dh), dtype=self.target.dtype)
                    round_v = np.zeros((H, 0, dh), dtype=self.target.dtype)

            toks, feats, positions = raw_inputs(frontier)
            x_q = layer.fuse(Tensor(emb_table[toks][None]), Tensor(feats[None]))
            prefix_len = self.spec_caches[sid - 1].length
            n_round = round_k.shape[1]
            F = len(frontier)
            allow = np.zeros((F, prefix_len + n_round + F), dtype=bool)
            allow[:, :prefix_len] = True
            for r, idx in enumerate(frontier):
                if idx != -1:
                    allow[r, prefix_len + row_of[-1]] = True  # root
                    for a in tree.nodes[idx].ancestors:
                        allow[r, prefix_len + row_of[a]] = True
                allow[r, prefix_len + n_round + r] = True  # self
            ctx_k = np.concatenate([self.spec_caches[sid - 1].keys[0], round_k], axis=1)
            ctx_v = np.concatenate([self.spec_caches[sid - 1].vals[0], round_v], axis=1)
            out_feats, k_new, v_new = layer.forward(x_q, positions, (ctx_k, ctx_v), allow)
            logits = T.matmul(out_feats, head).values[0]
            feats_np = out_feats.values[0]

            # candidates per frontier node: deterministic top-width at T=0,
            # width i.i.d. draws at T>0 (duplicates kept, in draw order)
            candidates = []  # (parent, token, prob, cum_logp, parent_out_feature, expandable)
            for r, idx in enumerate(frontier):
                p = softmax_probs(logits[r], cfg.temperature if cfg.temperature > 0 else 1.0)
                if idx == -1:
                    tree.root_dist = p
                    parent_logp = 0.0
                else:
                    tree.nodes[idx].output_feature = feats_np[r]
                    tree.nodes[idx].child_dist = p
                    parent_logp = tree.nodes[idx].cum_logp
                if cfg.temperature == 0:
                    picks = np.argsort(-p, kind="stable")[:cfg.width].tolist()
                else:
                    picks = [self.rng.categorical(p) for _ in range(cfg.width)]
                seen: set[int] = set()
                for tok in picks:
                    fresh = tok not in seen
                    seen.add(tok)
                    candidates.append((idx, int(tok), float(p[tok]),
                                       parent_logp + float(np.log(max(p[tok], 1e-300))),
                                       feats_np[r], fresh))

            # global budget pruning with one slot reserved per deeper level
            reserve = depth - 1 - level
            keep = min(len(candidates), cfg.total_tokens - retained - reserve)
            order = sorted(range(len(candidates)), key=lambda i: -candidates[i][3])
            kept = sorted(order[:keep])  # tree-index order == draw order

            level_nodes = []
            for ci in kept:
                parent_idx, tok, prob, clp, _parent_feat, fresh = candidates[ci]
                ancestors = ([] if parent_idx == -1
                             else tree.nodes[parent_idx].ancestors + [parent_idx])
                node = TreeNode(tok, parent_idx, level, prob, clp, _parent_feat,
                                ancestors, expandable=fresh)
                tree.nodes.append(node)
                level_nodes.append(len(tree.nodes) - 1)
            retained += len(level_nodes)
            tree.levels.append(level_nodes)
            tree.level_specialists.append(sid)

            round_k = np.concatenate([round_k, k_new.values[0]], axis=1)
            round_v = np.concatenate([round_v, v_new.values[0]], axis=1)
            for r, idx in enumerate(frontier):
                row_of[idx] = n_round + r
            kv_rows.extend(frontier)
            specialist_ns[sid] = specialist_ns.get(sid, 0) + (time.perf_counter_ns() - t0)
            frontier = [i for i in level_nodes if tree.nodes[i].expandable]
            if not frontier:
                break
        return tree, specialist_ns

    # ------------------------------------------------------------------
    # verification phase
    # ------------------------------------------------------------------

    def verify(self, tree: DraftTree, depth: int):
        """Single target forward over pending + tree, then the accept walk."""
        cfg = self.config
        c = len(self.committed)
        base_pos = c - 1
        R = len(tree.nodes)
        ids = np.array([self.pending] + [n.token for n in tree.nodes])
        positions = np.array([base_pos] + [base_pos + 1 + n.depth for n in tree.nodes])
        ctx_len = self.target_cache.length
        allow = np.zeros((1 + R, ctx_len + 1 + R), dtype=bool)
        allow[:, :ctx_len] = True
        allow[:, ctx_len] = True  # everyone sees the pending token
        for i, node in enumerate(tree.nodes):
            for a in node.ancestors:
                allow[1 + i, ctx_len + 1 + a] = True
            allow[1 + i, ctx_len + 1 + i] = True
        logits, feats, new_kv = self.target.forward_with_features(
            ids, cache=self.target_cache, positions=positions, allow=allow,
            update_cache=False)
        logits_np = logits.values
        feats_np = feats.values

        accepted: list[int] = []
        cur_row, cur_node = 0, -1
        bonus = None
        for level in range(min(depth, len(tree.levels))):
            children = [i for i in tree.levels[level] if tree.nodes[i].parent == cur_node]
            if cfg.temperature == 0:
                target_tok = int(np.argmax(logits_np[cur_row]))
                match = next((i for i in children if tree.nodes[i].token == target_tok), None)
                if match is None:
                    bonus = target_tok
                    break
                accepted.append(match)
                cur_node, cur_row = match, 1 + match
            else:
                q = softmax_probs(logits_np[cur_row], cfg.temperature)
                p_draft = tree.root_dist if cur_node == -1 else tree.nodes[cur_node].child_dist
                residual = q.copy()
                chosen = None
                for i in children:
                    node = tree.nodes[i]
                    if node.prob <= 0:
                        raise ContractError("drafted token has zero draft probability")
                    if self.rng.uniform() < min(1.0, residual[node.token] / p_draft[node.token]):
                        chosen = i
                        break
                    residual = np.maximum(residual - p_draft, 0.0)
                    total = residual.sum()
                    if total <= 0:
                        raise ContractError("residual distribution vanished during rejection")
                    residual /= total
                if chosen is None:
                    bonus = self.rng.categorical(residual)
                    break
                accepted.append(chosen)
                cur_node, cur_row = chosen, 1 + chosen
        if bonus is None:
            if cfg.temperature == 0:
                bonus = int(np.argmax(logits_np[cur_row]))
            else:
                bonus = self.rng.categorical(softmax_probs(logits_np[cur_row], cfg.temperature))
        accepts = [True] * len(accepted) + [False] * (cfg.depth - len(accepted))
        committed = [tree.nodes[i].token for i in accepted] + [int(bonus)]
        result = VerificationResult(accepted, accepts, int(bonus), committed)
        return result, logits_np, feats_np, new_kv

    # ------------------------------------------------------------------
    # commit phase
    # ------------------------------------------------------------------

    def commit_round(self, result: VerificationResult, feats_np: np.ndarray, new_kv) -> None:
        """Keep accepted rows in the target cache, extend specialist caches."""
        keep_rows = [0] + [1 + i for i in result.accepted_nodes]
        for layer_i, (k, v) in enumerate(new_kv):
            self.target_cache.append(layer_i, k[:, keep_rows], v[:, keep_rows])

        old_pending = self.pending
        old_tip = self.tip_feature
        new_tokens = np.array([old_pending] + result.committed[:-1])
        new_feats = np.concatenate([old_tip[None], feats_np[keep_rows[:-1]]]) \
            if len(keep_rows) > 1 else old_tip[None]
        positions = np.arange(len(self.committed) - 1,
                              len(self.committed) - 1 + len(new_tokens))
        emb = Tensor(self.bank.embedding.values[new_tokens][None])
        feats_t = Tensor(new_feats[None], dtype=self.target.dtype)
        for layer, cache in zip(self.bank.specialists, self.spec_caches):
            x = layer.fuse(emb, feats_t)
            k, v = layer.project_kv(x, positions)
            cache.append(0, k.values[0], v.values[0])

        self.tip_feature = feats_np[keep_rows[-1]]
        self.committed.extend(result.committed)

    # ------------------------------------------------------------------

    def run_round(self) -> RoundRecord:
        cfg = self.config
        c = len(self.committed)
        depth = min(cfg.depth, self.target.cfg.max_seq_len - c)
        if depth < 1:
            raise CapacityError("no room left in the context window")
        t_round = time.perf_counter_ns()
        tree, specialist_ns = self.draft_round(depth)
        t_draft = time.perf_counter_ns()
        result, _logits, feats_np, new_kv = self.verify(tree, depth)
        t_verify = time.perf_counter_ns()
        self.commit_round(result, feats_np, new_kv)
        t_commit = time.perf_counter_ns()
        record = RoundRecord(
            round_index=len(self.records),
            accepts=result.accepts,
            committed=result.committed_count,
            draft_ns=t_draft - t_round,
            verify_ns=t_verify - t_draft,
            commit_ns=t_commit - t_verify,
            wall_ns=t_commit - t_round,
            specialist_ns=specialist_ns,
        )
        self.records.append(record)
        return record


def generate(target: TargetModel, bank: SpecialistBank, prompt_ids,
             config: EngineConfig):
    """Full speculative generation; returns (tokens, records, wall_ns)."""
    session = Session(target, bank, config)
    t0 = time.perf_counter_ns()
    session.prefill(prompt_ids)
    prompt_len = len(session.committed)
    while True:
        if len(session.committed) - prompt_len >= config.max_new_tokens:
            break
        if len(session.committed) >= target.cfg.max_seq_len - 1:
            break
        session.run_round()
        new = session.committed[prompt_len:]
        if EOS_ID in new:
            session.committed = session.committed[:prompt_len + new.index(EOS_ID) + 1]
            break
    out = session.committed[:prompt_len + config.max_new_tokens]
    wall_ns = time.perf_counter_ns() - t0
    return out, session.records, wall_ns
