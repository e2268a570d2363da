"""Experiment runner: budget sweeps, prefix-continuation studies,
termination comparisons, the re-prefill baseline, and the cost model.

Every experiment is a pure function of (config, seed): per-session seeds
are derived by hashing the experiment key, records carry the config hash,
and ``verify_experiment_dir`` re-runs an experiment from its stored
config and byte-compares the regenerated outputs.

Sessions are independent; ``run_indexed`` may fan them out over a thread
pool and merges results back in task order.
"""

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .costmodel import (
    load_profile,
    params_from_profile,
    predict_decode_time,
    predict_step_time,
)
from .engine import (
    ANSWER_STREAM,
    GenerationBudget,
    GenerationSession,
    SamplerConfig,
    Termination,
    draw_rng,
    canonical_json,
    majority_vote,
    run_reasoning,
    run_session,
    sample_token,
    session_record,
)
from .errors import DataError, LifecycleError
from .kvcache import PagedKVCache, SlotAddress
from .model import (
    FLAT,
    SUMMARIZATION,
    DecodeLayout,
    ModelConfig,
    forward_step,
    init_weights,
    load_weights,
)
from .positional import (
    ThoughtEmbeddingTable,
    init_thought_table,
    load_thought_table,
    zero_thought_table,
)
from .tokenizer import Vocab

DEFAULT_PREFIX_GRID = (0, 100, 200, 400, 800, 1600)

FLAT_SEGMENT = "seq"


@dataclass
class ModelBundle:
    weights: object
    table: ThoughtEmbeddingTable
    vocab: Vocab

    def with_zero_table(self) -> "ModelBundle":
        rows, n_layers, n_heads, d_k = self.table.vectors.shape
        return ModelBundle(
            weights=self.weights,
            table=zero_thought_table(rows - 1, n_layers, n_heads, d_k),
            vocab=self.vocab,
        )


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any JSON-serializable key."""
    digest = hashlib.sha256(canonical_json(list(parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def run_indexed(tasks, workers: int = 1) -> list:
    """Run zero-argument callables; results come back in task order."""
    if workers <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: t(), tasks))


# ---------------------------------------------------------------------------
# budget sweep
# ---------------------------------------------------------------------------

def run_budget_sweep(
    bundle: ModelBundle,
    prompts: list[list[int]],
    budgets: list[int],
    paths_list: list[int],
    sampler: SamplerConfig,
    strategy: Termination = Termination.FIRST_FINISH,
    allocation: str = "total-budget-split",
    max_answer_tokens: int = 8,
    seed: int = 0,
    workers: int = 1,
) -> tuple[list[dict], list[dict]]:
    """Parallel sessions plus majority baselines for each (budget, paths).

    Under the "total-budget-split" allocation the majority baseline gives
    each of its P independent samples B // P body tokens, so its total
    spend stays within the shared budget B; "per-path-budget" gives every
    sample the full B.
    """
    if allocation not in ("total-budget-split", "per-path-budget"):
        raise DataError(f"unknown allocation policy {allocation!r}")

    def one_cell(budget_tokens: int, num_paths: int, pi: int, prompt: list[int]):
        records: list[dict] = []
        transcripts: list[dict] = []
        sess_seed = derive_seed(seed, "sweep", budget_tokens, num_paths, pi)
        session = run_session(
            bundle.weights,
            bundle.table,
            bundle.vocab,
            prompt,
            num_paths,
            sampler,
            GenerationBudget(budget_tokens, max_answer_tokens),
            strategy,
            seed=sess_seed,
        )
        records.append(_sweep_record("parallel", budget_tokens, num_paths, pi, [session]))
        transcripts.append(
            {"key": ["sweep", "parallel", budget_tokens, num_paths, pi],
             "record": session_record(session)}
        )

        if allocation == "total-budget-split":
            if budget_tokens < num_paths:
                raise DataError(
                    f"budget {budget_tokens} cannot be split across {num_paths} samples"
                )
            per_sample = budget_tokens // num_paths
        else:
            per_sample = budget_tokens
        maj_sessions = []
        for s in range(num_paths):
            maj_seed = derive_seed(seed, "sweep-maj", budget_tokens, num_paths, pi, s)
            maj_sessions.append(
                run_session(
                    bundle.weights,
                    bundle.table,
                    bundle.vocab,
                    prompt,
                    1,
                    sampler,
                    GenerationBudget(per_sample, max_answer_tokens),
                    Termination.FIRST_FINISH,
                    seed=maj_seed,
                )
            )
        rec = _sweep_record("majority", budget_tokens, num_paths, pi, maj_sessions)
        rec["per_sample_budget"] = per_sample
        rec["majority_answer_len"] = len(
            majority_vote([tuple(s.answer_tokens) for s in maj_sessions])
        )
        records.append(rec)
        for s, ms in enumerate(maj_sessions):
            transcripts.append(
                {"key": ["sweep", "majority", budget_tokens, num_paths, pi, s],
                 "record": session_record(ms)}
            )
        return records, transcripts

    tasks = [
        (lambda b=b, p=p, pi=pi, pr=pr: one_cell(b, p, pi, pr))
        for b in budgets
        for p in paths_list
        for pi, pr in enumerate(prompts)
    ]
    records: list[dict] = []
    transcripts: list[dict] = []
    for cell_records, cell_transcripts in run_indexed(tasks, workers=workers):
        records.extend(cell_records)
        transcripts.extend(cell_transcripts)
    return records, transcripts


def _sweep_record(mode, budget_tokens, num_paths, prompt_index, sessions) -> dict:
    paths = [p for s in sessions for p in s.paths]
    truncated = sum(1 for p in paths if p.finish_cause == "budget")
    return {
        "mode": mode,
        "budget": budget_tokens,
        "paths": num_paths,
        "prompt_index": prompt_index,
        "L_r": max(s.reasoning_len for s in sessions),
        "total_path_tokens": sum(len(p.tokens) for p in paths),
        "body_tokens": sum(p.body_length() for p in paths),
        "truncation_rate": truncated / len(paths),
        "answer_tokens": sum(len(s.answer_tokens) for s in sessions),
    }


# ---------------------------------------------------------------------------
# erroneous-prefix continuation
# ---------------------------------------------------------------------------

def run_prefix_recovery(
    bundle: ModelBundle,
    traces: list[dict],
    budget: GenerationBudget,
    sampler: SamplerConfig,
    target_token: int,
    prefix_lengths=DEFAULT_PREFIX_GRID,
    samples: int = 16,
    seed: int = 0,
) -> tuple[list[dict], list[dict]]:
    """Continue single-path decoding from forced trace prefixes.

    Each trace is {"prompt": [...ids], "body": [...ids]} taken from a
    failed run.  For each prefix length n, the first n body tokens are
    injected as the path's leading tokens and decoding continues normally;
    a sample "recovers" when ``target_token`` shows up among the freshly
    sampled tokens.
    """
    records: list[dict] = []
    transcripts: list[dict] = []
    for ti, trace in enumerate(traces):
        prompt = trace["prompt"]
        body = trace["body"]
        for n in prefix_lengths:
            if n > len(body):
                raise DataError(
                    f"trace {ti} has {len(body)} tokens, cannot take prefix {n}"
                )
            if n >= budget.max_path_tokens:
                raise DataError(
                    f"prefix {n} leaves no budget (B={budget.max_path_tokens})"
                )
            successes = 0
            for s in range(samples):
                sess_seed = derive_seed(seed, "prefix", ti, n, s)
                session = GenerationSession(
                    bundle.weights,
                    bundle.table,
                    bundle.vocab,
                    prompt,
                    1,
                    think_labels=[1],
                    seed=sess_seed,
                )
                run_reasoning(
                    session,
                    sampler,
                    budget,
                    Termination.FIRST_FINISH,
                    forced={0: list(body[:n])},
                )
                continuation = session.paths[0].tokens[1 + n :]
                if target_token in continuation:
                    successes += 1
                transcripts.append(
                    {"key": ["prefix", ti, n, s], "record": session_record(session)}
                )
            records.append(
                {
                    "trace": ti,
                    "prefix_length": n,
                    "samples": samples,
                    "success_rate": successes / samples,
                }
            )
    return records, transcripts


# ---------------------------------------------------------------------------
# termination comparison
# ---------------------------------------------------------------------------

def run_termination_comparison(
    bundle: ModelBundle,
    prompts: list[list[int]],
    strategies,
    sampler: SamplerConfig,
    budget: GenerationBudget,
    num_paths: int = 4,
    seed: int = 0,
) -> tuple[list[dict], list[dict]]:
    """Identical seeds across strategies; records lengths and token totals."""
    records: list[dict] = []
    transcripts: list[dict] = []
    for pi, prompt in enumerate(prompts):
        sess_seed = derive_seed(seed, "terminate", pi)  # shared across strategies
        for strategy in strategies:
            strategy = Termination(strategy)
            session = run_session(
                bundle.weights,
                bundle.table,
                bundle.vocab,
                prompt,
                num_paths,
                sampler,
                budget,
                strategy,
                seed=sess_seed,
            )
            records.append(
                {
                    "strategy": strategy.value,
                    "prompt_index": pi,
                    "L_r": session.reasoning_len,
                    "total_path_tokens": sum(len(p.tokens) for p in session.paths),
                    "body_tokens": sum(p.body_length() for p in session.paths),
                    "answer_tokens": len(session.answer_tokens),
                }
            )
            transcripts.append(
                {"key": ["terminate", strategy.value, pi], "record": session_record(session)}
            )
    return records, transcripts


# ---------------------------------------------------------------------------
# re-prefill baseline
# ---------------------------------------------------------------------------

def _flat_feed(weights, table, cache, layout, tokens, start_index):
    logits = None
    for offset, token in enumerate(tokens):
        logits = forward_step(
            weights, table, cache, layout, int(token),
            SlotAddress(FLAT_SEGMENT, start_index + offset),
        )
    return logits


def run_reprefill_baseline(
    bundle: ModelBundle, session: GenerationSession, sampler: SamplerConfig
) -> dict:
    """Re-encode prompt + concatenated paths with flattened positions.

    The baseline runs without thought embeddings and with plain causal
    attention over the concatenation, mimicking feeding the full context
    back through a vanilla model.  Records the positions it needs, the
    prefill size the cached-KV pathway avoids, the per-step logit
    divergence against the session's answer, and its own answer.
    Position overflow is recorded as an outcome, not raised.
    """
    if session.stage != SUMMARIZATION or not session.answer_done:
        raise LifecycleError("re-prefill baseline needs a completed session")
    cfg = bundle.weights.config
    l_x = session.l_x
    l_max = session.budget.max_path_tokens + 2
    num_paths = session.num_paths

    flat_tokens: list[int] = list(session.prompt_tokens)
    flat_positions: list[int] = [t + 1 for t in range(l_x)]
    for i, path in enumerate(session.paths):
        for t0, token in enumerate(path.tokens):
            flat_tokens.append(token)
            flat_positions.append(l_x + i * l_max + t0 + 1)
    answer_base = l_x + (num_paths - 1) * l_max + session.reasoning_len
    answer_positions = [
        answer_base + t0 + 1 for t0 in range(len(session.answer_tokens))
    ]
    max_path_pos = max(flat_positions)
    max_pos_used = max([max_path_pos] + answer_positions)

    record = {
        "paths": num_paths,
        "prefill_tokens": len(flat_tokens),
        "max_path_position": max_path_pos,
        "max_position_used": max_pos_used,
        "overflow": max_pos_used > cfg.max_position,
        "logit_divergence": None,
        "own_answer": None,
    }
    if record["overflow"]:
        return record

    zero = bundle.with_zero_table().table

    # teacher-forced pass: same answer tokens, compare per-step logits
    if session.record_logits and session.answer_logits:
        cache = PagedKVCache(cfg.n_layers, cfg.n_heads, cfg.d_k)
        layout = DecodeLayout(
            stage=FLAT, flat_positions=tuple(flat_positions + answer_positions)
        )
        _flat_feed(bundle.weights, zero, cache, layout, flat_tokens, 0)
        divergence = 0.0
        base = len(flat_tokens)
        for k, token in enumerate(session.answer_tokens):
            logits = forward_step(
                bundle.weights, zero, cache, layout, int(token),
                SlotAddress(FLAT_SEGMENT, base + k),
            )
            divergence = max(
                divergence, float(np.max(np.abs(logits - session.answer_logits[k])))
            )
        record["logit_divergence"] = divergence

    # independent answer decode over a fresh flattened prefill
    cache = PagedKVCache(cfg.n_layers, cfg.n_heads, cfg.d_k)
    budget = session.budget
    own_positions = list(flat_positions) + [
        answer_base + t0 + 1 for t0 in range(budget.max_answer_tokens + 2)
    ]
    layout = DecodeLayout(stage=FLAT, flat_positions=tuple(own_positions))
    _flat_feed(bundle.weights, zero, cache, layout, flat_tokens, 0)
    vocab = bundle.vocab
    answer = [vocab.summary_open]
    logits = forward_step(
        bundle.weights, zero, cache, layout, vocab.summary_open,
        SlotAddress(FLAT_SEGMENT, len(flat_tokens)),
    )
    for step in range(1, budget.max_answer_tokens + 1):
        rng = draw_rng(session.seed, ANSWER_STREAM, step)
        token = sample_token(logits, sampler, rng)
        answer.append(token)
        logits = forward_step(
            bundle.weights, zero, cache, layout, token,
            SlotAddress(FLAT_SEGMENT, len(flat_tokens) + step),
        )
        if token in (vocab.summary_close, vocab.eos):
            break
    record["own_answer"] = answer
    return record


# ---------------------------------------------------------------------------
# cost model table
# ---------------------------------------------------------------------------

def run_cost_model(
    profile: dict, paths_list: list[int], lengths: list[int]
) -> list[dict]:
    records = []
    for length in lengths:
        base = params_from_profile(profile, 1, length)
        base_step = predict_step_time(base)
        for num_paths in paths_list:
            params = params_from_profile(profile, num_paths, length)
            step = predict_step_time(params)
            records.append(
                {
                    "paths": num_paths,
                    "tokens_per_path": length,
                    "step_time_s": step,
                    "decode_time_s": predict_decode_time(params),
                    "step_ratio_vs_p1": step / base_step,
                }
            )
    return records


# ---------------------------------------------------------------------------
# experiment persistence and verification
# ---------------------------------------------------------------------------

def bundle_from_config(config: dict) -> ModelBundle:
    vocab = Vocab(**config.get("vocab", {}))
    if config.get("weights_file"):
        weights = load_weights(config["weights_file"])
    else:
        weights = init_weights(
            ModelConfig(**config["model"]), config.get("model_seed", 0)
        )
    cfg = weights.config
    if config.get("thought_table_file"):
        table = load_thought_table(config["thought_table_file"])
    elif config.get("zero_thought_table"):
        table = zero_thought_table(vocab.p_max, cfg.n_layers, cfg.n_heads, cfg.d_k)
    else:
        table = init_thought_table(
            vocab.p_max, cfg.n_layers, cfg.n_heads, cfg.d_k,
            config.get("table_seed", 0),
        )
    return ModelBundle(weights=weights, table=table, vocab=vocab)


def run_experiment(name: str, config: dict) -> tuple[list[dict], list[dict]]:
    """Dispatch an experiment from a pure-JSON config (used by verify)."""
    sampler = SamplerConfig(**config.get("sampler", {}))
    seed = config.get("seed", 0)
    if name == "costmodel":
        profile = load_profile(config.get("profile_file"))
        records = run_cost_model(profile, config["paths"], config["lengths"])
        return records, []
    bundle = bundle_from_config(config)
    if name == "sweep":
        return run_budget_sweep(
            bundle,
            config["prompts"],
            config["budgets"],
            config["paths"],
            sampler,
            strategy=Termination(config.get("strategy", "first_finish")),
            allocation=config.get("allocation", "total-budget-split"),
            max_answer_tokens=config.get("max_answer_tokens", 8),
            seed=seed,
            workers=config.get("workers", 1),
        )
    if name == "prefix":
        return run_prefix_recovery(
            bundle,
            config["traces"],
            GenerationBudget(config["budget"], config.get("max_answer_tokens", 8)),
            sampler,
            config["target_token"],
            prefix_lengths=tuple(config.get("prefix_lengths", DEFAULT_PREFIX_GRID)),
            samples=config.get("samples", 16),
            seed=seed,
        )
    if name == "terminate":
        return run_termination_comparison(
            bundle,
            config["prompts"],
            config.get("strategies", [t.value for t in Termination]),
            sampler,
            GenerationBudget(config["budget"], config.get("max_answer_tokens", 8)),
            num_paths=config.get("paths", 4),
            seed=seed,
        )
    if name == "reprefill":
        session = run_session(
            bundle.weights,
            bundle.table,
            bundle.vocab,
            config["prompt"],
            config["paths"],
            sampler,
            GenerationBudget(config["budget"], config.get("max_answer_tokens", 8)),
            seed=seed,
            record_logits=True,
        )
        record = run_reprefill_baseline(bundle, session, sampler)
        return [record], [
            {"key": ["reprefill", config["paths"]], "record": session_record(session)}
        ]
    if name == "generate":
        session = run_session(
            bundle.weights,
            bundle.table,
            bundle.vocab,
            config["prompt"],
            config["paths"],
            sampler,
            GenerationBudget(config["budget"], config.get("max_answer_tokens", 32)),
            strategy=Termination(config.get("strategy", "first_finish")),
            seed=seed,
        )
        rec = {
            "paths": config["paths"],
            "L_r": session.reasoning_len,
            "answer_tokens": len(session.answer_tokens),
        }
        return [rec], [{"key": ["generate"], "record": session_record(session)}]
    raise DataError(f"unknown experiment {name!r}")


def records_csv_text(name: str, config: dict, records: list[dict]) -> str:
    chash = config_hash({"experiment": name, "config": config})
    columns = sorted({key for rec in records for key in rec})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["experiment", *columns, "config_hash"])
    for rec in records:
        row = [name]
        for c in columns:
            value = rec.get(c, "")
            row.append(canonical_json(value) if isinstance(value, (list, dict)) else value)
        row.append(chash)
        writer.writerow(row)
    return buf.getvalue()


def transcripts_text(transcripts: list[dict]) -> str:
    return "".join(canonical_json(t) + "\n" for t in transcripts)


def write_experiment(
    out_dir: str, name: str, config: dict, records: list[dict], transcripts: list[dict]
) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({"experiment": name, "config": config}, fh, sort_keys=True, indent=2)
    with open(os.path.join(out_dir, "records.csv"), "w", encoding="utf-8") as fh:
        fh.write(records_csv_text(name, config, records))
    with open(os.path.join(out_dir, "transcripts.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(transcripts_text(transcripts))


def verify_experiment_dir(out_dir: str) -> list[str]:
    """Re-run from the stored config; report any byte-level mismatch."""
    problems: list[str] = []
    with open(os.path.join(out_dir, "config.json"), encoding="utf-8") as fh:
        stored = json.load(fh)
    name, config = stored["experiment"], stored["config"]
    records, transcripts = run_experiment(name, config)

    with open(os.path.join(out_dir, "records.csv"), encoding="utf-8") as fh:
        stored_csv = fh.read()
    expected_csv = records_csv_text(name, config, records)
    if stored_csv != expected_csv:
        problems.append("records.csv does not match a fresh re-run")
    chash = config_hash({"experiment": name, "config": config})
    for line in stored_csv.splitlines()[1:]:
        if line and not line.endswith(chash):
            problems.append("records.csv carries a stale config hash")
            break

    with open(os.path.join(out_dir, "transcripts.jsonl"), encoding="utf-8") as fh:
        stored_tr = fh.read()
    if stored_tr != transcripts_text(transcripts):
        problems.append("transcripts.jsonl does not match a fresh re-run")
    return problems
