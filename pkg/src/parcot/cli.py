"""Command-line experiment runner.

Subcommands mirror the harness experiments (generate, sweep, prefix,
terminate, reprefill, costmodel, datagen, verify).  Each run writes
config.json, records.csv, and transcripts.jsonl under --out; verify
re-runs a directory from its stored config and exits nonzero on any
mismatch or invariant violation.
"""

import argparse
import json
import sys

from .costmodel import load_profile
from .datagen import (
    build_sample,
    read_problems,
    training_layout,
    training_record,
    write_training_records,
)
from .engine import canonical_json
from .errors import EngineError
from .harness import (
    DEFAULT_PREFIX_GRID,
    run_experiment,
    verify_experiment_dir,
    write_experiment,
)
from .tokenizer import Vocab, decode, encode

TOY_MODEL = {
    "n_layers": 2,
    "d_model": 64,
    "n_heads": 4,
    "d_k": 16,
    "d_ff": 256,
    "vocab_size": 292,
    "rope_base": 10000.0,
    "max_position": 4096,
}


TERMINATION_ALIASES = {
    "first": "first_finish",
    "half": "half_finish",
    "last": "last_finish",
    "first_finish": "first_finish",
    "half_finish": "half_finish",
    "last_finish": "last_finish",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--paths", type=int, default=4, help="parallel path count P")
    parser.add_argument("--budget", type=int, default=32, help="body tokens per path B")
    parser.add_argument("--max-answer", type=int, default=16, help="answer token cap")
    parser.add_argument(
        "--termination",
        choices=sorted(TERMINATION_ALIASES),
        default="first",
        help="first|half|last",
    )
    parser.add_argument("--temperature", type=float, default=0.7)
    parser.add_argument("--top-p", type=float, default=1.0)
    parser.add_argument("--greedy", action="store_true")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--model-seed", type=int, default=1)
    parser.add_argument("--table-seed", type=int, default=2)
    parser.add_argument("--weights", metavar="FILE", default=None)
    parser.add_argument("--thought-emb", metavar="FILE", default=None)
    parser.add_argument("--p-max", type=int, default=16)
    parser.add_argument("--out", metavar="DIR", default="out")


def _base_config(args) -> dict:
    return {
        "model": TOY_MODEL,
        "model_seed": args.model_seed,
        "table_seed": args.table_seed,
        "weights_file": args.weights,
        "thought_table_file": args.thought_emb,
        "vocab": {"base_size": 256, "p_max": args.p_max},
        "sampler": {
            "temperature": args.temperature,
            "top_p": args.top_p,
            "seed": args.seed,
            "greedy": args.greedy,
        },
        "seed": args.seed,
    }


def _encode_prompts(texts, vocab: Vocab) -> list[list[int]]:
    return [encode(text, vocab, markup=False) for text in texts]


def _run_and_write(name: str, config: dict, out_dir: str) -> None:
    records, transcripts = run_experiment(name, config)
    write_experiment(out_dir, name, config, records, transcripts)
    print(f"{name}: wrote {len(records)} records to {out_dir}")


def _measure_toy_engine(paths_list):
    """Wall-clock toy-engine decode times; desk-scale hardware only, never
    evidence for the analytic model and never written to records."""
    import time

    from .engine import GenerationBudget, SamplerConfig, run_session
    from .harness import bundle_from_config

    bundle = bundle_from_config(
        {"model": TOY_MODEL, "model_seed": 1, "table_seed": 2,
         "vocab": {"base_size": 256, "p_max": 16}}
    )
    prompt = encode("timing probe", bundle.vocab, markup=False)
    results = []
    for paths in paths_list:
        if paths > bundle.vocab.p_max:
            continue
        started = time.perf_counter()
        run_session(
            bundle.weights, bundle.table, bundle.vocab, prompt, paths,
            SamplerConfig(greedy=True), GenerationBudget(32, 0), seed=0,
        )
        results.append((paths, time.perf_counter() - started))
    return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="parcot")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="run one parallel-reasoning session")
    _add_common(p_gen)
    p_gen.add_argument("--prompt", required=True)

    p_sweep = sub.add_parser("sweep", help="budget sweep with majority baselines")
    _add_common(p_sweep)
    p_sweep.add_argument("--budgets", type=int, nargs="+", default=[8, 16, 32])
    p_sweep.add_argument("--paths-list", type=int, nargs="+", default=[1, 2, 4])
    p_sweep.add_argument(
        "--allocation",
        choices=["total-budget-split", "per-path-budget"],
        default="total-budget-split",
    )
    p_sweep.add_argument("--workers", type=int, default=1,
                         help="independent sessions in flight")
    p_sweep.add_argument("--prompt", action="append", dest="prompts", required=True)

    p_prefix = sub.add_parser("prefix", help="continue decoding from trace prefixes")
    _add_common(p_prefix)
    p_prefix.add_argument("--traces", required=True, help="JSONL of {prompt, body} id lists")
    p_prefix.add_argument("--prefix-lengths", type=int, nargs="+",
                          default=list(DEFAULT_PREFIX_GRID))
    p_prefix.add_argument("--samples", type=int, default=16)
    p_prefix.add_argument("--target-token", type=int, required=True)

    p_term = sub.add_parser("terminate", help="compare termination strategies")
    _add_common(p_term)
    p_term.add_argument("--strategies", nargs="+", choices=sorted(TERMINATION_ALIASES),
                        default=["first", "half", "last"])
    p_term.add_argument("--prompt", action="append", dest="prompts", required=True)

    p_re = sub.add_parser("reprefill", help="flattened re-prefill baseline")
    _add_common(p_re)
    p_re.add_argument("--prompt", required=True)

    p_cost = sub.add_parser("costmodel", help="roofline latency table")
    p_cost.add_argument("--profile", default=None, help="profile JSON (default packaged)")
    p_cost.add_argument("--paths-list", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    p_cost.add_argument("--lengths", type=int, nargs="+", default=[1024, 4096, 16384])
    p_cost.add_argument("--measure", action="store_true",
                        help="also time the toy engine (non-normative, not recorded)")
    p_cost.add_argument("--out", metavar="DIR", default="out")

    p_data = sub.add_parser("datagen", help="build SFT training records")
    p_data.add_argument("--input", required=True, help="problems JSONL")
    p_data.add_argument("--output", required=True, help="training records JSONL")
    p_data.add_argument("--p-hat", type=int, default=None)
    p_data.add_argument("--p-max", type=int, default=16)
    p_data.add_argument("--seed", type=int, default=0)
    p_data.add_argument("--verbatim-answer", action="store_true",
                        help="use the groundtruth answer without the summary template")

    p_verify = sub.add_parser("verify", help="re-run an experiment dir and compare")
    p_verify.add_argument("--dir", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "costmodel":
        profile = load_profile(args.profile)
        config = {
            "profile_file": args.profile,
            "paths": args.paths_list,
            "lengths": args.lengths,
        }
        records, transcripts = run_experiment("costmodel", config)
        write_experiment(args.out, "costmodel", config, records, transcripts)
        print(f"profile: {profile.get('name')}")
        for rec in records:
            print(
                f"P={rec['paths']:>3} L={rec['tokens_per_path']:>6} "
                f"step={rec['step_time_s'] * 1e3:8.3f} ms "
                f"ratio_vs_P1={rec['step_ratio_vs_p1']:5.2f}"
            )
        if args.measure:
            for paths, seconds in _measure_toy_engine(args.paths_list):
                print(
                    f"measured toy engine (non-normative): P={paths:>3} "
                    f"decode={seconds * 1e3:8.1f} ms"
                )
        return 0

    if args.command == "datagen":
        from .datagen import DEFAULT_ANSWER_TEMPLATE, dataset_manifest

        vocab = Vocab(p_max=args.p_max)
        problems = read_problems(args.input)
        template = None if args.verbatim_answer else DEFAULT_ANSWER_TEMPLATE
        records = []
        for idx, problem in enumerate(problems):
            sample = build_sample(
                problem, vocab, p_hat=args.p_hat, seed=args.seed + idx, template=template
            )
            records.append(training_record(sample, training_layout(sample, vocab)))
        write_training_records(records, args.output)
        manifest_path = args.output + ".manifest.json"
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(dataset_manifest(len(records), args.seed, vocab), fh,
                      sort_keys=True, indent=2)
        print(f"datagen: wrote {len(records)} samples to {args.output}")
        return 0

    if args.command == "verify":
        problems = verify_experiment_dir(args.dir)
        if problems:
            for problem in problems:
                print(f"verify: {problem}", file=sys.stderr)
            return 1
        print(f"verify: {args.dir} reproduces exactly")
        return 0

    # session-based experiments share the model/sampler config
    config = _base_config(args)
    vocab = Vocab(base_size=256, p_max=args.p_max)

    if args.command == "generate":
        config.update(
            {
                "prompt": encode(args.prompt, vocab, markup=False),
                "paths": args.paths,
                "budget": args.budget,
                "max_answer_tokens": args.max_answer,
                "strategy": TERMINATION_ALIASES[args.termination],
            }
        )
        records, transcripts = run_experiment("generate", config)
        write_experiment(args.out, "generate", config, records, transcripts)
        record = transcripts[0]["record"]
        print(canonical_json(records[0]))
        print("answer:", decode(record["answer"], vocab, errors="replace"))
        return 0

    if args.command == "sweep":
        config.update(
            {
                "prompts": _encode_prompts(args.prompts, vocab),
                "budgets": args.budgets,
                "paths": args.paths_list,
                "allocation": args.allocation,
                "strategy": TERMINATION_ALIASES[args.termination],
                "max_answer_tokens": args.max_answer,
                "workers": args.workers,
            }
        )
        _run_and_write("sweep", config, args.out)
        return 0

    if args.command == "prefix":
        traces = []
        with open(args.traces, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    traces.append(json.loads(line))
        config.update(
            {
                "traces": traces,
                "budget": args.budget,
                "max_answer_tokens": args.max_answer,
                "prefix_lengths": args.prefix_lengths,
                "samples": args.samples,
                "target_token": args.target_token,
            }
        )
        _run_and_write("prefix", config, args.out)
        return 0

    if args.command == "terminate":
        config.update(
            {
                "prompts": _encode_prompts(args.prompts, vocab),
                "strategies": [TERMINATION_ALIASES[s] for s in args.strategies],
                "budget": args.budget,
                "paths": args.paths,
                "max_answer_tokens": args.max_answer,
            }
        )
        _run_and_write("terminate", config, args.out)
        return 0

    if args.command == "reprefill":
        config.update(
            {
                "prompt": encode(args.prompt, vocab, markup=False),
                "paths": args.paths,
                "budget": args.budget,
                "max_answer_tokens": args.max_answer,
            }
        )
        _run_and_write("reprefill", config, args.out)
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
