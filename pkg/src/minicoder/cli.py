"""Command-line pipeline: vocabulary, data, training, decoding, scoring.

Every command writes its outputs into ``--out-dir`` together with a
``manifest.json`` recording the command, its resolved arguments, and the
files produced.  ``replay`` re-executes a manifest into a fresh directory;
because every stage is seeded and deterministic, the replayed outputs are
byte-identical to the originals.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shlex
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import corpus as corpus_mod
from . import evaluation as ev
from . import selection as sel
from .generation import PRESETS, DecodeConfig, build_prompt, generate
from .model import ModelConfig, init_parameters, load_checkpoint
from .objectives import OBJECTIVE_KINDS, ObjectiveSpec
from .tokenizer import load_vocabulary, save_vocabulary, train_vocabulary
from .trainer import STAGES, TrainConfig, run_training

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def write_manifest(out_dir: str, command: str, args: dict, status: str,
                   outputs: list[str]) -> None:
    payload = {
        "version": MANIFEST_VERSION,
        "command": command,
        "args": args,
        "status": status,
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version: {payload.get('version')}")
    return payload


def _recordable_args(args: argparse.Namespace) -> dict:
    skip = {"command", "out_dir", "func", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _write_jsonl(path: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _corpus_examples(corpus_dir: str, vocab):
    files = corpus_mod.ingest(corpus_dir)
    records = corpus_mod.extract_corpus(files)
    examples = [corpus_mod.format_example(r, vocab) for r in records]
    return records, examples


def cmd_train_vocab(args: argparse.Namespace) -> list[str]:
    files = corpus_mod.ingest(args.corpus)
    records = corpus_mod.extract_corpus(files)
    texts: list[str] = []
    for record in records:
        if record.docstring:
            texts.append(record.docstring)
        texts.append(corpus_mod.code_text(record))
    vocab = train_vocabulary(
        texts, args.size, separate_code_space=args.separate_code_space
    )
    save_vocabulary(vocab, os.path.join(args.out_dir, "vocab.txt"))
    log.info("trained vocabulary of %d tokens from %d records", vocab.size, len(records))
    return ["vocab.txt"]


def cmd_prepare_data(args: argparse.Namespace) -> list[str]:
    vocab = load_vocabulary(args.vocab)
    records, examples = _corpus_examples(args.corpus, vocab)
    corpus_mod.save_manifest(records, os.path.join(args.out_dir, "functions.jsonl"))
    if args.stage == "stage1":
        instances = corpus_mod.build_stage1(examples, args.n_cntx)
    else:
        instances = corpus_mod.build_stage2(
            examples,
            vocab,
            args.n_cntx,
            min_docstring_words=args.min_docstring_words,
            max_body_words=args.max_body_words,
            max_length_ratio=args.max_length_ratio,
        )
    corpus_mod.save_instances(
        instances,
        os.path.join(args.out_dir, "instances.bin"),
        n_cntx=args.n_cntx,
        embedding_size=vocab.embedding_size,
    )
    log.info("prepared %d %s instances", len(instances), args.stage)
    return ["functions.jsonl", "instances.bin"]


def cmd_train(args: argparse.Namespace) -> list[str]:
    vocab = load_vocabulary(args.vocab)
    instances, meta = corpus_mod.load_instances(args.instances)
    n_cntx = args.n_cntx or meta["n_cntx"]
    model_cfg = ModelConfig(
        n_layers=args.n_layers,
        d_model=args.d_model,
        d_ff=args.d_ff,
        n_heads=args.n_heads,
        n_cntx=n_cntx,
        n_vocab=meta["embedding_size"],
        seed=args.seed,
    )
    if args.init_from:
        params, model_cfg = load_checkpoint(args.init_from)
    else:
        params = init_parameters(model_cfg)
    objective = ObjectiveSpec(
        kind=args.objective, mask_rate=args.mask_rate, seed=args.seed
    )
    train_cfg = TrainConfig(
        objective=objective,
        stage=args.stage,
        batch_size=args.batch_size,
        max_steps=args.max_steps,
        epochs=args.epochs,
        lr_max=args.lr_max,
        lr_min=args.lr_min,
        schedule=args.schedule,
        warmup_fraction=args.warmup_fraction,
        clip_norm=args.clip_norm,
        val_fraction=args.val_fraction,
        eval_interval=args.eval_interval,
        log_interval=args.log_interval,
        seed=args.seed,
    )
    run_training(params, model_cfg, instances, train_cfg, vocab=vocab,
                 out_dir=args.out_dir)
    return ["model.ckpt", "train_state.bin", "train_log.csv", "val_log.csv"]


def _decode_config(args: argparse.Namespace) -> DecodeConfig:
    if args.preset:
        base = PRESETS[args.preset]
        return dataclasses.replace(
            base, max_new_tokens=args.max_new_tokens, seed=args.seed
        )
    return DecodeConfig(
        strategy=args.strategy,
        temperature=args.temperature,
        top_p=args.top_p,
        max_new_tokens=args.max_new_tokens,
        seed=args.seed,
    )


def cmd_generate(args: argparse.Namespace) -> list[str]:
    params, model_cfg = load_checkpoint(args.model)
    vocab = load_vocabulary(args.vocab)
    problems = ev.load_problems(args.problems)
    decode_cfg = _decode_config(args)
    tasks = [
        (pi, si) for pi in range(len(problems)) for si in range(args.n_samples)
    ]

    def run_one(task):
        pi, si = task
        problem = problems[pi]
        prompt = build_prompt(
            problem.docstring,
            problem.signature,
            vocab,
            strip_tests=args.strip_tests,
            strip_types=args.strip_types,
        )
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, pi, si]))
        result = generate(params, model_cfg, vocab, prompt, decode_cfg, rng=rng)
        return {
            "task_id": problem.task_id,
            "sample_index": si,
            "completion": result.completion,
            "stop_reason": result.stop_reason,
        }

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(run_one, tasks))
    else:
        rows = [run_one(task) for task in tasks]
    _write_jsonl(os.path.join(args.out_dir, "samples.jsonl"), rows)
    log.info("wrote %d samples for %d problems", len(rows), len(problems))
    return ["samples.jsonl"]


def _make_executor(args: argparse.Namespace):
    if args.executor == "static":
        return ev.StaticExecutor()
    if args.executor == "runner":
        command = shlex.split(args.runner_cmd) if args.runner_cmd else None
        return ev.SubprocessExecutor(command)
    raise ValueError(f"unknown executor: {args.executor}")


def cmd_evaluate(args: argparse.Namespace) -> list[str]:
    problems = ev.load_problems(args.problems)
    rows = _read_jsonl(args.samples)
    by_task: dict[str, list[tuple[int, str]]] = {}
    for row in rows:
        by_task.setdefault(row["task_id"], []).append(
            (row["sample_index"], row["completion"])
        )
    completions = {
        task: [c for _, c in sorted(pairs)] for task, pairs in by_task.items()
    }
    scored = [p for p in problems if p.task_id in completions]
    missing = len(problems) - len(scored)
    if missing:
        log.warning("no samples for %d problems; they are not scored", missing)
    executor = _make_executor(args)
    outputs = []
    try:
        records = [
            ev.evaluate_problem(
                p, completions[p.task_id], executor, timeout=args.timeout
            )
            for p in scored
        ]
        _write_jsonl(
            os.path.join(args.out_dir, "results.jsonl"),
            [json.loads(r.to_json()) for r in records],
        )
        summary = ev.summarize(records, ks=args.ks)
        _write_json(os.path.join(args.out_dir, "summary.json"), summary)
        outputs += ["results.jsonl", "summary.json"]
        if args.filters:
            report = ev.filter_report(
                scored,
                completions,
                executor,
                ks=args.ks,
                filter_names=args.filters,
                seed=args.seed,
                timeout=args.timeout,
            )
            _write_json(os.path.join(args.out_dir, "filter_report.json"), report)
            outputs.append("filter_report.json")
    finally:
        close = getattr(executor, "close", None)
        if close:
            close()
    return outputs


def cmd_select_data(args: argparse.Namespace) -> list[str]:
    vocab = load_vocabulary(args.vocab)
    instances, meta = corpus_mod.load_instances(args.instances)
    problems = ev.load_problems(args.problems)
    pool_ids = [inst.tokens.ids for inst in instances]
    target_ids = [
        build_prompt(p.docstring, p.signature, vocab).tokens.ids for p in problems
    ]
    if args.method == "model":
        if not args.model:
            raise ValueError("--model is required for the model embedding method")
        params, _ = load_checkpoint(args.model)
        result = sel.select_examples(
            pool_ids, target_ids, method="model", tok_emb=params["tok_emb"]
        )
    else:
        result = sel.select_examples(
            pool_ids, target_ids, method="tfidf", n_features=vocab.embedding_size
        )
    sizes = [s for s in args.sizes if s <= len(instances)]
    dropped = [s for s in args.sizes if s > len(instances)]
    if dropped:
        log.warning("pool has %d examples; skipping sizes %s", len(instances), dropped)
    subsets = sel.nested_subsets(result, sizes)
    payload = {
        "method": args.method,
        "order": list(result.order),
        "distances": list(result.distances),
        "subsets": {str(size): list(idx) for size, idx in subsets.items()},
    }
    _write_json(os.path.join(args.out_dir, "selection.json"), payload)
    outputs = ["selection.json"]
    for size, idx in subsets.items():
        name = f"selected_{size}.bin"
        corpus_mod.save_instances(
            [instances[i] for i in idx],
            os.path.join(args.out_dir, name),
            n_cntx=meta["n_cntx"],
            embedding_size=meta["embedding_size"],
        )
        outputs.append(name)
    return outputs


def cmd_replay(args: argparse.Namespace) -> list[str]:
    manifest = load_manifest(args.manifest)
    if manifest["status"] != "ok":
        raise ValueError(f"cannot replay a run with status {manifest['status']!r}")
    command = manifest["command"]
    if command == "replay":
        raise ValueError("refusing to replay a replay")
    handler, defaults = _HANDLERS[command]
    merged = dict(defaults)
    merged.update(manifest["args"])
    replay_args = argparse.Namespace(command=command, out_dir=args.out_dir, **merged)
    return _run_command(command, handler, replay_args)


def _run_command(command: str, handler, args: argparse.Namespace) -> list[str]:
    os.makedirs(args.out_dir, exist_ok=True)
    recorded = _recordable_args(args)
    recorded.pop("manifest", None)
    write_manifest(args.out_dir, command, recorded, status="running", outputs=[])
    outputs = handler(args)
    write_manifest(args.out_dir, command, recorded, status="ok", outputs=outputs)
    return outputs


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part]


def _str_list(text: str) -> list[str]:
    return [part for part in text.split(",") if part]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minicoder", description="Text-to-code model pipeline."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-vocab", help="learn a subword vocabulary from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--separate-code-space", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train_vocab)

    p = sub.add_parser("prepare-data", help="tokenize a corpus into instances")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--stage", choices=("stage1", "stage2"), default="stage2")
    p.add_argument("--n-cntx", type=int, required=True)
    p.add_argument("--min-docstring-words", type=int,
                   default=corpus_mod.MIN_DOCSTRING_WORDS)
    p.add_argument("--max-body-words", type=int, default=corpus_mod.MAX_BODY_WORDS)
    p.add_argument("--max-length-ratio", type=float,
                   default=corpus_mod.MAX_LENGTH_RATIO)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train or finetune a model")
    p.add_argument("--instances", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--init-from", default=None)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-cntx", type=int, default=None)
    p.add_argument("--objective", choices=OBJECTIVE_KINDS, default="code_clm")
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--stage", choices=STAGES, default="stage2")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-steps", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr-max", type=float, default=1e-3)
    p.add_argument("--lr-min", type=float, default=1e-4)
    p.add_argument("--schedule", choices=("cosine", "linear"), default="cosine")
    p.add_argument("--warmup-fraction", type=float, default=0.01)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--val-fraction", type=float, default=0.02)
    p.add_argument("--eval-interval", type=int, default=0)
    p.add_argument("--log-interval", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample completions for problems")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--problems", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--strategy", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--n-samples", type=int, default=1)
    p.add_argument("--max-new-tokens", type=int, default=256)
    p.add_argument("--strip-tests", action="store_true")
    p.add_argument("--strip-types", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score samples against hidden tests")
    p.add_argument("--problems", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--ks", type=_int_list, default=[1])
    p.add_argument("--executor", choices=("static", "runner"), default="static")
    p.add_argument("--runner-cmd", default=None)
    p.add_argument("--timeout", type=float, default=ev.DEFAULT_TEST_TIMEOUT)
    p.add_argument("--filters", type=_str_list, default=[])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("select-data", help="pick finetuning examples near a target set")
    p.add_argument("--instances", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--problems", required=True)
    p.add_argument("--method", choices=("model", "tfidf"), default="model")
    p.add_argument("--model", default=None)
    p.add_argument("--sizes", type=_int_list, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_select_data)

    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_replay)

    return parser


_COMMAND_FUNCS = {
    "train-vocab": cmd_train_vocab,
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "select-data": cmd_select_data,
}


def _collect_handlers() -> dict[str, tuple]:
    parser = build_parser()
    sub_action = next(
        a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
    )
    handlers = {}
    for name, func in _COMMAND_FUNCS.items():
        defaults = {
            a.dest: a.default
            for a in sub_action.choices[name]._actions
            if a.dest not in ("help", "out_dir", "func")
        }
        handlers[name] = (func, defaults)
    return handlers


_HANDLERS = _collect_handlers()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    command = args.command
    handler = args.func
    try:
        if command == "replay":
            handler(args)
        else:
            _run_command(command, handler, args)
    except Exception as exc:
        log.error("%s failed: %s", command, exc)
        try:
            if command != "replay" and getattr(args, "out_dir", None):
                write_manifest(
                    args.out_dir, command, _recordable_args(args),
                    status="error", outputs=[],
                )
        except OSError:
            pass
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
