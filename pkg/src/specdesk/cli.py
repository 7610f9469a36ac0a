"""Command-line driver: train, distill, benchmark, sweep, report.

Subcommands: train-target, distill, train-draft, bench, sweep, report.
Exit codes: 0 success, 2 usage/config error, 3 artifact/compatibility error,
4 runtime numeric error. Flags override config-file values override
defaults; the effective configuration is echoed into every report.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import plots
from .checkpoint import ArtifactError
from .draft import DraftLayer, SpecialistBank, bank_parameter_count, load_bank, save_bank
from .engine import ConfigurationError, EngineConfig, generate, generate_vanilla
from .metrics import (MeasurementError, RunReport, SWEEP_SCHEMA, build_report,
                      read_report, write_posacc_csv, write_timing_csv)
from .model import (CapacityError, ModelConfig, TargetModel, load_target,
                    save_target, tokenize)
from .rng import CounterRng
from .tensor import ContractError, NumericError
from .training import (TrainConfig, distill_corpus, heldout_lm_loss, jsonl_logger,
                       load_distilled, save_distilled, train_draft, train_target,
                       unigram_cross_entropy)


class ConfigError(ValueError):
    """Bad usage or configuration; maps to exit code 2."""


CONFIG_SECTIONS = {
    "model": set(ModelConfig.__dataclass_fields__),
    "train": set(TrainConfig.__dataclass_fields__) | {"window", "target_steps"},
    "engine": set(EngineConfig.__dataclass_fields__),
    "bench": {"prompts", "repeats", "max_prompts"},
    "paths": {"corpus", "target", "bank", "distilled", "init", "out_dir"},
}


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = json.loads(p.read_text())
    for section, content in raw.items():
        if section not in CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        unknown = set(content) - CONFIG_SECTIONS[section]
        if unknown:
            raise ConfigError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    return raw


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, {}))


def _require_path(value: str | None, field: str) -> Path:
    if not value:
        raise ConfigError(f"missing required path: {field}")
    p = Path(value)
    if not p.exists():
        raise ConfigError(f"{field} does not exist: {value}")
    return p


def read_corpus(path: Path) -> np.ndarray:
    """Corpus ids without the leading BOS (windows re-add it)."""
    return tokenize(path.read_text(encoding="utf-8"))[1:]


def make_prompts(corpus_text: str, count: int = 200, min_chars: int = 24,
                 max_chars: int = 64) -> list[str]:
    """Slice prompt fragments off a text, breaking at word boundaries."""
    words = corpus_text.split()
    prompts, cur = [], ""
    for w in words:
        cur = (cur + " " + w).strip()
        if len(cur) >= min_chars:
            prompts.append(cur[:max_chars])
            cur = ""
            if len(prompts) == count:
                break
    return prompts


def load_prompts(path: Path, max_seq_len: int, max_new: int,
                 max_prompts: int | None = None) -> tuple[list[np.ndarray], int]:
    """Tokenized prompts; over-long ones are skipped (count returned)."""
    prompts, skipped = [], 0
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        ids = tokenize(line)
        if len(ids) >= max_seq_len - 2:
            skipped += 1
            continue
        prompts.append(ids)
        if max_prompts and len(prompts) == max_prompts:
            break
    if not prompts:
        raise ConfigError("prompt file contains no usable prompts")
    return prompts, skipped


# ---------------------------------------------------------------------------
# bench core (shared by bench and sweep)
# ---------------------------------------------------------------------------

def run_vanilla_bench(target: TargetModel, prompts: list[np.ndarray],
                      config: EngineConfig, repeats: int = 3) -> dict:
    """Best-of-N vanilla decoding throughput over the prompt set."""
    raw = []
    for rep in range(max(1, repeats)):
        tokens = 0
        t0 = time.perf_counter_ns()
        for ids in prompts:
            out, _ = generate_vanilla(target, ids, config)
            tokens += len(out) - len(ids)
        seconds = (time.perf_counter_ns() - t0) / 1e9
        raw.append({"rep": rep, "tokens": tokens, "seconds": seconds,
                    "tokens_per_second": tokens / seconds})
    best = max(raw, key=lambda r: r["tokens_per_second"])
    return {"tokens_per_second": best["tokens_per_second"], "tokens": best["tokens"],
            "raw_runs": raw}


def run_method_bench(target: TargetModel, bank: SpecialistBank,
                     prompts: list[np.ndarray], config: EngineConfig,
                     repeats: int = 3,
                     vanilla_tps: float | None = None,
                     config_echo: dict | None = None) -> RunReport:
    """Run the speculative method over the prompt set, best-of-N timing.

    Identical seeds make every repeat produce the same tokens and rounds, so
    acceptance statistics come from the first repeat and only the wall time
    is taken best-of-N.
    """
    records = None
    raw = []
    for rep in range(max(1, repeats)):
        rep_records = []
        tokens = 0
        t0 = time.perf_counter_ns()
        for ids in prompts:
            out, recs, _ = generate(target, bank, ids, config)
            rep_records.extend(recs)
            tokens += len(out) - len(ids)
        seconds = (time.perf_counter_ns() - t0) / 1e9
        raw.append({"rep": rep, "tokens": tokens, "seconds": seconds,
                    "tokens_per_second": tokens / seconds})
        if records is None:
            records = rep_records
    best = max(raw, key=lambda r: r["tokens_per_second"])
    echo = dict(config_echo or {})
    echo.update(asdict(config))
    report = build_report(echo, records, int(best["seconds"] * 1e9),
                          best["tokens"], raw_runs=raw,
                          vanilla_tokens_per_second=vanilla_tps)
    return report


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_target(args, file_cfg: dict) -> int:
    corpus_path = _require_path(args.corpus or _section(file_cfg, "paths").get("corpus"),
                                "corpus")
    out = Path(args.out or "target.ckpt")
    model_kw = _section(file_cfg, "model")
    train_kw = _section(file_cfg, "train")
    cfg = ModelConfig(**model_kw)
    steps = args.steps or train_kw.get("target_steps") or 1000
    window = args.window or train_kw.get("window") or 128
    seed = args.seed if args.seed is not None else train_kw.get("seed", 0)
    ids = read_corpus(corpus_path)
    split = int(len(ids) * (1.0 - args.holdout))
    train_ids, held_ids = ids[:split], ids[split:]

    model = TargetModel.init(cfg, CounterRng(seed), np.float32)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".train.jsonl")
    with open(log_path, "w") as logf:
        log = jsonl_logger(logf)
        t0 = time.time()
        history = train_target(
            model, train_ids, window=window,
            batch_size=train_kw.get("batch_size", 8),
            steps=steps, learning_rate=train_kw.get("learning_rate", 1e-3),
            seed=seed, plateau_patience=args.plateau_patience,
            log_fn=lambda rec: (log(rec), None)[1])
    save_target(model, out)
    held = heldout_lm_loss(model, held_ids, window) if len(held_ids) > 256 else float("nan")
    uni = unigram_cross_entropy(train_ids, held_ids, cfg.vocab_size) \
        if len(held_ids) > 0 else float("nan")
    print(f"trained {len(history)} steps in {time.time() - t0:.1f}s; "
          f"final loss {history[-1]:.4f}; held-out {held:.4f} (unigram {uni:.4f})")
    print(f"checkpoint: {out} ({model.parameter_count()} parameters); log: {log_path}")
    return 0


def cmd_distill(args, file_cfg: dict) -> int:
    target_path = _require_path(args.target, "target")
    corpus_path = _require_path(args.corpus or _section(file_cfg, "paths").get("corpus"),
                                "corpus")
    out = Path(args.out or "distilled.ckpt")
    target = load_target(target_path)
    ids = read_corpus(corpus_path)
    if args.holdout > 0:
        ids = ids[:int(len(ids) * (1.0 - args.holdout))]
    examples = distill_corpus(target, ids, k_top=args.k, window=args.window)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_distilled(examples, target.cfg, args.k, out)
    positions = sum(len(ex.tokens) for ex in examples)
    print(f"distilled {len(examples)} examples, {positions} positions, K={args.k} -> {out}")
    return 0


def cmd_train_draft(args, file_cfg: dict) -> int:
    target_path = _require_path(args.target, "target")
    distilled_path = _require_path(args.distilled, "distilled")
    out = Path(args.out or f"bank_{args.method}.ckpt")
    target = load_target(target_path)
    examples, header = load_distilled(distilled_path)
    if header["model"] != asdict(target.cfg):
        raise ArtifactError("distilled dataset was built for a different model config")

    train_kw = _section(file_cfg, "train")
    seed = args.seed if args.seed is not None else train_kw.get("seed", 0)
    n = None if args.method in ("eagle", "hass") else _parse_n(args.n)
    config = TrainConfig(
        regime=args.method, n=n, unroll_depth=args.depth,
        w=train_kw.get("w", 0.1), k_top=header["k_top"],
        learning_rate=args.lr or train_kw.get("learning_rate", 1e-3),
        steps=args.steps or train_kw.get("steps", 500),
        batch_size=args.batch_size or train_kw.get("batch_size", 4),
        seed=seed,
        detach_between_steps=train_kw.get("detach_between_steps", True),
    )

    if args.method == "poss":
        if not args.init:
            raise ArtifactError(
                "poss training starts from a trained single-draft checkpoint; "
                "pass --init <eagle bank> (train one with --method eagle first)")
        init_bank = load_bank(_require_path(args.init, "init"), target,
                              requires_grad=True)
        if init_bank.m != 1:
            raise ArtifactError("--init must be a single-specialist bank")
        bank = SpecialistBank.from_single(init_bank.specialists[0], target, n,
                                          args.depth)
    else:
        if args.init:
            init_bank = load_bank(_require_path(args.init, "init"), target,
                                  requires_grad=True)
            bank = SpecialistBank(init_bank.specialists, None, args.depth, target)
        else:
            bank = SpecialistBank.init(target.cfg, target, None, args.depth,
                                       CounterRng(seed).child(3))

    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".train.jsonl")
    t0 = time.time()
    with open(log_path, "w") as logf:
        history = train_draft(bank, examples, config, log_fn=jsonl_logger(logf))
    save_bank(bank, out)
    counts = bank_parameter_count(bank)
    print(f"{args.method} bank: m={bank.m} n={bank.n} depth={bank.depth}; "
          f"{counts['per_specialist']} params/specialist, {counts['total']} total")
    print(f"trained {len(history)} steps in {time.time() - t0:.1f}s; "
          f"loss {history[0].l_total:.4f} -> {history[-1].l_total:.4f}; log: {log_path}")
    return 0


def _parse_n(value) -> int | None:
    if value in (None, "inf", "Inf", "INF"):
        return None
    return int(value)


def _build_engine_config(args, file_cfg: dict, method: str) -> EngineConfig:
    engine_kw = _section(file_cfg, "engine")
    def pick(flag, key, default):
        return flag if flag is not None else engine_kw.get(key, default)
    return EngineConfig(
        method=method,
        depth=pick(args.depth, "depth", 6),
        width=pick(args.width, "width", 4),
        total_tokens=pick(args.total_tokens, "total_tokens", 16),
        temperature=pick(args.temperature, "temperature", 0.0),
        max_new_tokens=pick(args.max_new, "max_new_tokens", 64),
        seed=args.seed if args.seed is not None else engine_kw.get("seed", 0),
    )


def cmd_bench(args, file_cfg: dict) -> int:
    target_path = _require_path(args.target, "target")
    bench_kw = _section(file_cfg, "bench")
    prompts_path = _require_path(args.prompts or bench_kw.get("prompts"), "prompts")
    out_dir = Path(args.out_dir or "bench_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _build_engine_config(args, file_cfg, args.method)

    target = load_target(target_path, dtype=np.float64)
    prompts, skipped = load_prompts(prompts_path, target.cfg.max_seq_len,
                                    config.max_new_tokens,
                                    args.max_prompts or bench_kw.get("max_prompts"))
    if skipped:
        print(f"warning: skipped {skipped} prompts longer than the context window",
              file=sys.stderr)
    repeats = args.repeats or bench_kw.get("repeats", 3)
    echo = {"target": str(target_path), "prompts": str(prompts_path),
            "skipped_prompts": skipped, "repeats": repeats}

    vanilla = run_vanilla_bench(target, prompts, config, repeats)
    if args.method == "vanilla":
        print(json.dumps({"method": "vanilla",
                          "tokens_per_second": vanilla["tokens_per_second"],
                          "raw_runs": vanilla["raw_runs"]}, indent=1))
        (out_dir / "vanilla.json").write_text(json.dumps(vanilla, indent=1))
        return 0

    bank_path = _require_path(args.bank, "bank")
    bank = load_bank(bank_path, target, dtype=np.float64)
    if args.method == "single-draft" and bank.m != 1:
        raise ArtifactError(f"single-draft expects a 1-specialist bank, got m={bank.m}")
    echo["bank"] = str(bank_path)
    echo["bank_n"] = bank.n
    echo["bank_m"] = bank.m

    report = run_method_bench(target, bank, prompts, config, repeats,
                              vanilla_tps=vanilla["tokens_per_second"],
                              config_echo=echo)
    stem = out_dir / f"report_{args.method}_d{config.depth}_w{config.width}"
    with open(stem.with_suffix(".json"), "w") as f:
        f.write(report.to_json())
    write_posacc_csv(report, f"{stem}.posacc.csv")
    write_timing_csv(report, f"{stem}.timing.csv")
    plots.plot_pos_acc([(args.method, report)], f"{stem}.posacc.png")
    plots.plot_timing([(args.method, report)], f"{stem}.timing.png")
    print(f"tau={report.tau:.3f} speedup={report.speedup:.3f} "
          f"tokens/s={report.throughput['tokens_per_second']:.1f} "
          f"rounds={report.rounds}")
    print(f"reports under {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_KEYS = {"depths", "widths", "total_tokens", "temperatures", "methods",
              "max_new_tokens", "repeats", "max_prompts"}


def load_sweep_spec(path: Path) -> dict:
    spec = json.loads(path.read_text())
    unknown = set(spec) - SWEEP_KEYS
    if unknown:
        raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
    for key in ("depths", "methods"):
        if not spec.get(key):
            raise ConfigError(f"sweep spec needs a non-empty {key!r} list")
    for m in spec["methods"]:
        if set(m) - {"label", "method", "bank"}:
            raise ConfigError(f"unknown method entry keys in {m}")
    return spec


def _sweep_cells(spec: dict) -> list[dict]:
    cells = []
    seen = set()
    for m in spec["methods"]:
        for depth in spec["depths"]:
            for width in spec.get("widths", [4]):
                for total in spec.get("total_tokens", [16]):
                    for temp in spec.get("temperatures", [0.0]):
                        key = (m["label"], depth, width, total, temp)
                        if key in seen:  # duplicate configs collapse
                            continue
                        seen.add(key)
                        cells.append({"label": m["label"], "method": m["method"],
                                      "bank": m.get("bank"), "depth": depth,
                                      "width": width, "total_tokens": total,
                                      "temperature": temp})
    return cells


def _run_sweep_cell(payload: dict) -> dict:
    """One isolated sweep cell; returns a result row (errors recorded, not raised)."""
    cell = payload["cell"]
    row = dict(cell)
    try:
        target = load_target(payload["target"], dtype=np.float64)
        config = EngineConfig(method=cell["method"], depth=cell["depth"],
                              width=cell["width"], total_tokens=cell["total_tokens"],
                              temperature=cell["temperature"],
                              max_new_tokens=payload["max_new_tokens"],
                              seed=payload["seed"])
        prompts, _ = load_prompts(Path(payload["prompts"]), target.cfg.max_seq_len,
                                  config.max_new_tokens, payload["max_prompts"])
        vanilla_tps = payload["vanilla_tps"]
        bank = load_bank(cell["bank"], target, dtype=np.float64)
        report = run_method_bench(target, bank, prompts, config,
                                  payload["repeats"], vanilla_tps=vanilla_tps)
        row.update({"tau": report.tau, "tokens_per_second":
                    report.throughput["tokens_per_second"],
                    "speedup": report.speedup, "rounds": report.rounds,
                    "error": ""})
    except Exception as exc:  # error rows keep the sweep going
        row.update({"tau": float("nan"), "tokens_per_second": float("nan"),
                    "speedup": float("nan"), "rounds": 0,
                    "error": f"{type(exc).__name__}: {exc}"})
    return row


def cmd_sweep(args, file_cfg: dict) -> int:
    spec = load_sweep_spec(_require_path(args.spec, "spec"))
    target_path = _require_path(args.target, "target")
    prompts_path = _require_path(args.prompts, "prompts")
    out_dir = Path(args.out_dir or "sweep_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    max_new = spec.get("max_new_tokens", 32)
    repeats = spec.get("repeats", 3)
    max_prompts = spec.get("max_prompts")

    target = load_target(target_path, dtype=np.float64)
    prompts, _ = load_prompts(prompts_path, target.cfg.max_seq_len, max_new, max_prompts)
    vanilla_cfg = EngineConfig(method="vanilla", depth=1, width=1, total_tokens=1,
                               temperature=0.0, max_new_tokens=max_new, seed=seed)
    vanilla = run_vanilla_bench(target, prompts, vanilla_cfg, repeats)

    cells = _sweep_cells(spec)
    payloads = [{"cell": c, "target": str(target_path), "prompts": str(prompts_path),
                 "max_new_tokens": max_new, "repeats": repeats, "seed": seed,
                 "max_prompts": max_prompts,
                 "vanilla_tps": vanilla["tokens_per_second"]} for c in cells]
    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_sweep_cell, payloads))
    else:
        rows = [_run_sweep_cell(p) for p in payloads]

    _flag_sweep_rows(rows)
    csv_path = out_dir / "sweep.csv"
    _write_sweep_csv(rows, csv_path)
    plots.plot_depth_sweep(rows, out_dir / "depth_sweep.png")
    print(f"{len(rows)} cells -> {csv_path}")
    return 0


def _flag_sweep_rows(rows: list[dict]) -> None:
    """Mark per-group maxima and tau-vs-depth trend violations."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row["error"]:
            row["best_tau"] = row["best_speedup"] = False
            row["tau_trend_ok"] = ""
            continue
        groups.setdefault((row["label"], row["temperature"]), []).append(row)
    for group in groups.values():
        best_tau = max(group, key=lambda r: r["tau"])
        best_sp = max(group, key=lambda r: r["speedup"])
        for row in group:
            row["best_tau"] = row is best_tau
            row["best_speedup"] = row is best_sp
        lines: dict[tuple, list[dict]] = {}
        for row in group:
            lines.setdefault((row["width"], row["total_tokens"]), []).append(row)
        for line in lines.values():
            line.sort(key=lambda r: r["depth"])
            ok = all(b["tau"] >= a["tau"] - 0.05 for a, b in zip(line, line[1:]))
            for row in line:
                row["tau_trend_ok"] = ok


def _write_sweep_csv(rows: list[dict], path) -> None:
    cols = ["label", "method", "depth", "width", "total_tokens", "temperature",
            "tau", "tokens_per_second", "speedup", "rounds",
            "best_tau", "best_speedup", "tau_trend_ok", "error"]
    with open(path, "w") as f:
        f.write(f"# schema: {SWEEP_SCHEMA}\n")
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(c, "")) for c in cols) + "\n")


def cmd_report(args, file_cfg: dict) -> int:
    out_dir = Path(args.out_dir or "report_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for item in args.inputs:
        path = _require_path(item, "report input")
        report = read_report(path)
        label = report.config.get("method", path.stem)
        runs.append((f"{label} ({path.stem})" if args.label_paths else label, report))
    for label, report in runs:
        stem = out_dir / Path(label.split()[0]).name
        write_posacc_csv(report, f"{stem}.posacc.csv")
        write_timing_csv(report, f"{stem}.timing.csv")
    plots.plot_pos_acc(runs, out_dir / "posacc.png")
    plots.plot_timing(runs, out_dir / "timing.png")
    print(f"rendered {len(runs)} reports into {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specdesk",
        description="Desk-scale speculative decoding lab")
    # global flags are accepted both before and after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    for host, default in ((parser, False), (common, True)):
        sup = argparse.SUPPRESS
        host.add_argument("--config", help="JSON config file",
                          default=sup if default else None)
        host.add_argument("--seed", type=int, default=sup if default else None)
        host.add_argument("--jobs", type=int, default=sup if default else 1)
        host.add_argument("--out-dir", dest="out_dir", default=sup if default else None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-target", help="pretrain the tiny target model",
                       parents=[common])
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--holdout", type=float, default=0.15)
    p.add_argument("--plateau-patience", type=int, default=0)

    p = sub.add_parser("distill", help="store teacher features and top-K targets", parents=[common])
    p.add_argument("--target", required=True)
    p.add_argument("--corpus")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--window", type=int, default=128)
    p.add_argument("--holdout", type=float, default=0.15)
    p.add_argument("--out")

    p = sub.add_parser("train-draft", help="train a draft layer or specialist bank", parents=[common])
    p.add_argument("--method", choices=("eagle", "hass", "poss"), required=True)
    p.add_argument("--n", default=1, help="positions per specialist (int or 'inf')")
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--target", required=True)
    p.add_argument("--distilled", required=True)
    p.add_argument("--init", help="single-draft checkpoint to start from")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out")

    p = sub.add_parser("bench", help="benchmark a method against vanilla decoding", parents=[common])
    p.add_argument("--method", choices=("vanilla", "single-draft", "poss"),
                   required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--bank")
    p.add_argument("--prompts")
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--total-tokens", dest="total_tokens", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-new", dest="max_new", type=int)
    p.add_argument("--max-prompts", dest="max_prompts", type=int)
    p.add_argument("--repeats", type=int)

    p = sub.add_parser("sweep", help="cross-product benchmark grid", parents=[common])
    p.add_argument("--spec", required=True, help="sweep spec JSON")
    p.add_argument("--target", required=True)
    p.add_argument("--prompts", required=True)

    p = sub.add_parser("report", help="render figures and CSVs from JSON reports", parents=[common])
    p.add_argument("inputs", nargs="+")
    p.add_argument("--label-paths", action="store_true")

    return parser


COMMANDS = {
    "train-target": cmd_train_target,
    "distill": cmd_distill,
    "train-draft": cmd_train_draft,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = load_config_file(args.config)
        code = COMMANDS[args.command](args, file_cfg)
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, MeasurementError, CapacityError, ContractError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 4
    return code


if __name__ == "__main__":
    sys.exit(main())
