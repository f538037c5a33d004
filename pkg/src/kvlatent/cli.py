"""Command-line interface.

Subcommands: pretrain, finetune, gen-data, eval, interp, passcount.
Exit codes: 0 success, 1 contract/config/validation failure, 2 I/O failure.
Training commands take an INI config plus --set section.key=value overrides;
all randomness derives from the configured seed, so rerunning a command
reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .engine import (InjectionMode, PassCounter, base_trainable,
                     generate_greedy, has_coprocessor, rollout_speedup,
                     sequential_rollout)
from .errors import ContractError, GenerationError, NumericError
from .interp import (collect_activations, cross_capture, emit_report,
                     mean_offdiag, save_dump, silhouette)
from .masks import AugmentationPlan
from .model import ModelConfig, ModelParams
from .tasks.corpus import ingest_text_corpus, synth_corpus
from .tasks.countdown import (format_countdown, gen_countdown,
                              parse_expression, extract_answer,
                              read_countdown_jsonl, score_countdown,
                              split_prompt, solve_countdown,
                              write_countdown_jsonl)
from .tasks.graphqa import (format_graph_qa, gen_graph_qa,
                            read_graph_qa_jsonl, score_graph_qa,
                            write_graph_qa_jsonl)
from .tasks.tokenizer import ByteTokenizer
from .training import (CurriculumConfig, LatentSystem, MetricsWriter,
                       OptimizerState, ScheduleConfig, SequenceItem,
                       build_finetune_item, curriculum_finetune,
                       evaluate_perplexity, flat_finetune, init_system,
                       pretrain, pretrain_items)

_TOK = ByteTokenizer()


def _make_opt(cfg: RunConfig) -> OptimizerState:
    o = cfg.optimizer
    return OptimizerState(beta1=o.beta1, beta2=o.beta2, eps=o.eps,
                          weight_decay=o.weight_decay)


def _ckpt_extra(cfg: RunConfig) -> dict:
    return {"task": cfg.task,
            "schedule": dataclasses.asdict(cfg.schedule),
            "out_dir": cfg.out_dir}


def _split_windows(windows: np.ndarray, val_path: str | None,
                   seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    if val_path:
        return windows, ingest_text_corpus(val_path, seq_len + 1)
    n_val = max(4, windows.shape[0] // 50)
    if windows.shape[0] <= n_val:
        raise ContractError(
            f"corpus: {windows.shape[0]} windows is too few to hold out "
            f"{n_val} for validation; provide data.val_path")
    return windows[:-n_val], windows[-n_val:]


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, args.set)
    if cfg.task != "corpus":
        raise ContractError("pretrain: task must be corpus (text windows); "
                            "task fine-tuning is the finetune command")
    if not cfg.data.train_path:
        raise ContractError("pretrain: data.train_path is required")
    os.makedirs(cfg.out_dir, exist_ok=True)
    windows = ingest_text_corpus(cfg.data.train_path, cfg.schedule.seq_len + 1)
    train_w, val_w = _split_windows(windows, cfg.data.val_path,
                                    cfg.schedule.seq_len)
    if cfg.train.max_eval_windows and val_w.shape[0] > cfg.train.max_eval_windows:
        val_w = val_w[: cfg.train.max_eval_windows]
    system = init_system(cfg.mode, cfg.model, cfg.schedule.n_latents, cfg.seed)
    opt = _make_opt(cfg)
    metrics = MetricsWriter(os.path.join(cfg.out_dir, "metrics.csv"),
                            fresh=True)
    counter = PassCounter()
    final_loss = pretrain(system, train_w, cfg.schedule, opt,
                          cfg.optimizer.lr, cfg.optimizer.warmup_steps,
                          cfg.train.batch_size, cfg.train.total_steps,
                          cfg.seed, metrics=metrics,
                          log_every=cfg.train.log_every, counter=counter)
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.bin")
    save_checkpoint(ckpt_path, system, opt, cfg.train.total_steps, cfg.seed,
                    extra=_ckpt_extra(cfg))
    val_ppl = evaluate_perplexity(system, val_w, cfg.schedule, cfg.seed,
                                  cfg.train.eval_batch)
    per_step = 2 if cfg.mode is InjectionMode.SOFT_EMBEDDING_UNIFIED else 3
    steps = max(cfg.train.total_steps, 1)
    print(f"mode={cfg.mode.value} steps={cfg.train.total_steps} "
          f"final_loss={final_loss:.6f} final_val_ppl={val_ppl:.6f} "
          f"passes_per_step={counter.full_passes / steps:.1f} "
          f"(expected {per_step})")
    print(f"checkpoint={ckpt_path}")
    return 0


def _countdown_items(instances, n_latents: int) -> list[SequenceItem]:
    items = []
    for inst in instances:
        prompt, answer = format_countdown(inst, _TOK, n_latents)
        q, n_lat = split_prompt(prompt, _TOK)
        items.append(build_finetune_item(q, answer, n_lat, _TOK.eos))
    return items


def _countdown_accuracy(system: LatentSystem, instances,
                        max_new: int = 48) -> tuple[float, int]:
    correct = 0
    parse_failures = 0
    for inst in instances:
        prompt, _ = format_countdown(inst, _TOK, system.bank.n_latents)
        q, n_lat = split_prompt(prompt, _TOK)
        out = generate_greedy(system.mode, system.base, system.coproc,
                              system.bank, q, n_lat,
                              forced_ids=[_TOK.answer_open],
                              max_new=max_new, stop_id=_TOK.answer_close)
        text = _TOK.decode_bytes_only(out)
        if parse_expression(extract_answer(text)) is None:
            parse_failures += 1
        elif score_countdown(text, inst):
            correct += 1
    return correct / max(len(instances), 1), parse_failures


def _graph_qa_accuracy(system: LatentSystem, instances,
                       max_new: int = 24) -> float:
    correct = 0
    for inst in instances:
        q, _, _ = format_graph_qa(inst, _TOK)
        out = generate_greedy(system.mode, system.base, system.coproc,
                              system.bank, q, system.bank.n_latents,
                              forced_ids=[_TOK.answer_open],
                              max_new=max_new, stop_id=_TOK.answer_close)
        if score_graph_qa(_TOK.decode_bytes_only(out), inst):
            correct += 1
    return correct / max(len(instances), 1)


def _load_resume(path, cfg: RunConfig) -> Checkpoint:
    ck = load_checkpoint(path)
    if ck.system.mode is not cfg.mode:
        raise ContractError(
            f"resume: checkpoint mode {ck.system.mode.value} differs from "
            f"configured {cfg.mode.value}")
    # max_positions is a runtime envelope, not architecture: adopting the
    # config's value lets fine-tuning use longer layouts than pretraining
    arch = dataclasses.replace(ck.system.base.config,
                               max_positions=cfg.model.max_positions)
    if arch != cfg.model:
        raise ContractError("resume: checkpoint model architecture differs "
                            "from the configured one")
    ck.system.base.config = arch
    if ck.system.coproc is not None:
        ck.system.coproc.config = arch
    if ck.system.bank.n_latents != cfg.schedule.n_latents:
        raise ContractError(
            f"resume: checkpoint bank has {ck.system.bank.n_latents} latent "
            f"slots, config wants {cfg.schedule.n_latents}")
    return ck


def cmd_finetune(args) -> int:
    cfg = load_config(args.config, args.set)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if not cfg.data.train_path:
        raise ContractError("finetune: data.train_path is required")
    if cfg.task == "corpus":
        raise ContractError("finetune: task must be countdown or graph_qa")
    if cfg.task == "countdown" and cfg.curriculum is not None \
            and not args.allow_curriculum:
        raise ContractError(
            "finetune: countdown trains without a curriculum; pass "
            "--allow-curriculum to override")

    if args.resume:
        ck = _load_resume(args.resume, cfg)
        system = ck.system
        opt = _make_opt(cfg)   # fresh moments for the new phase
    else:
        system = init_system(cfg.mode, cfg.model, cfg.schedule.n_latents,
                             cfg.seed)
        opt = _make_opt(cfg)

    metrics = MetricsWriter(os.path.join(cfg.out_dir, "metrics.csv"),
                            fresh=True)
    counter = PassCounter()
    tok = _TOK
    if cfg.task == "countdown":
        train_inst = read_countdown_jsonl(cfg.data.train_path)
        if not train_inst:
            raise ContractError("finetune: empty training dataset")
        items = _countdown_items(train_inst, cfg.schedule.n_latents)
        if cfg.curriculum is not None:
            examples = []
            for inst in train_inst:
                prompt, answer = format_countdown(inst, tok,
                                                  cfg.schedule.n_latents)
                q, _ = split_prompt(prompt, tok)
                examples.append((q, [], list(answer)))
            curriculum_finetune(system, examples, cfg.curriculum, opt,
                                cfg.optimizer.lr, cfg.optimizer.warmup_steps,
                                cfg.train.batch_size, cfg.seed, tok,
                                metrics=metrics, counter=counter)
            final_loss = float("nan")
        else:
            final_loss = flat_finetune(system, items, opt, cfg.optimizer.lr,
                                       cfg.optimizer.warmup_steps,
                                       cfg.train.batch_size,
                                       cfg.train.epochs, cfg.seed,
                                       metrics=metrics, counter=counter,
                                       log_every=cfg.train.log_every)
        val_inst = read_countdown_jsonl(cfg.data.val_path) \
            if cfg.data.val_path else train_inst[: cfg.train.max_eval_windows]
        acc, parse_fail = _countdown_accuracy(system, val_inst)
        print(f"mode={cfg.mode.value} task=countdown "
              f"final_loss={final_loss:.6f} accuracy={acc:.4f} "
              f"parse_failures={parse_fail} n_eval={len(val_inst)}")
    else:
        train_inst = read_graph_qa_jsonl(cfg.data.train_path)
        if not train_inst:
            raise ContractError("finetune: empty training dataset")
        examples = []
        for inst in train_inst:
            q, steps, answer = format_graph_qa(inst, tok)
            examples.append((q, steps, answer))
        if cfg.curriculum is None:
            raise ContractError("finetune: graph_qa uses the curriculum; "
                                "add a [curriculum] section")
        reports = curriculum_finetune(system, examples, cfg.curriculum, opt,
                                      cfg.optimizer.lr,
                                      cfg.optimizer.warmup_steps,
                                      cfg.train.batch_size, cfg.seed, tok,
                                      metrics=metrics, counter=counter)
        for r in reports:
            print(f"stage={r.stage} n_latents={r.n_latents} steps={r.steps} "
                  f"skipped={r.skipped} loss={r.final_loss:.6f}")
        final_loss = reports[-1].final_loss
        val_inst = read_graph_qa_jsonl(cfg.data.val_path) \
            if cfg.data.val_path else train_inst[: cfg.train.max_eval_windows]
        acc = _graph_qa_accuracy(system, val_inst)
        print(f"mode={cfg.mode.value} task=graph_qa "
              f"final_loss={final_loss:.6f} accuracy={acc:.4f} "
              f"n_eval={len(val_inst)}")

    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.bin")
    save_checkpoint(ckpt_path, system, opt, opt.step, cfg.seed,
                    extra=_ckpt_extra(cfg))
    print(f"checkpoint={ckpt_path}")
    return 0


def cmd_gen_data(args) -> int:
    rng = np.random.default_rng([args.seed, 0xDA7A])
    if args.task == "countdown":
        instances = []
        for _ in range(args.count):
            instances.append(gen_countdown(
                args.operands, rng,
                require_solvable=not args.emit_unsolvable))
        write_countdown_jsonl(args.out, instances)
        print(f"wrote {len(instances)} countdown instances "
              f"(operands={args.operands}) to {args.out}")
    elif args.task == "graph_qa":
        instances = [gen_graph_qa(args.depth, args.width, rng)
                     for _ in range(args.count)]
        write_graph_qa_jsonl(args.out, instances)
        print(f"wrote {len(instances)} graph-qa instances "
              f"(depth={args.depth}, width={args.width}) to {args.out}")
    else:
        text = synth_corpus(args.bytes, args.seed)
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
        print(f"wrote {len(text)} bytes of synthetic corpus to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    task = args.task or ck.extra.get("task")
    if task not in ("corpus", "countdown", "graph_qa"):
        raise ContractError(f"eval: unknown task {task!r}")
    system = ck.system
    if task == "countdown":
        instances = read_countdown_jsonl(args.data)
        if not instances:
            raise ContractError("eval: empty dataset")
        if args.limit:
            instances = instances[: args.limit]
        acc, parse_fail = _countdown_accuracy(system, instances)
        print(f"task=countdown n={len(instances)} accuracy={acc:.4f} "
              f"parse_failures={parse_fail}")
    elif task == "graph_qa":
        instances = read_graph_qa_jsonl(args.data)
        if not instances:
            raise ContractError("eval: empty dataset")
        if args.limit:
            instances = instances[: args.limit]
        acc = _graph_qa_accuracy(system, instances)
        print(f"task=graph_qa n={len(instances)} accuracy={acc:.4f}")
    else:
        sched = ScheduleConfig(**ck.extra["schedule"])
        windows = ingest_text_corpus(args.data, sched.seq_len + 1)
        if args.limit:
            windows = windows[: args.limit]
        ppl = evaluate_perplexity(system, windows, sched, ck.seed)
        print(f"task=corpus n_windows={windows.shape[0]} ppl={ppl:.6f}")
    return 0


def _interp_items(ck: Checkpoint, task: str, data_path: str,
                  limit: int) -> list[SequenceItem]:
    n_lat = ck.system.bank.n_latents
    if task == "countdown":
        instances = read_countdown_jsonl(data_path)
        if limit:
            instances = instances[:limit]
        return _countdown_items(instances, n_lat)
    if task == "graph_qa":
        instances = read_graph_qa_jsonl(data_path)
        if limit:
            instances = instances[:limit]
        items = []
        for inst in instances:
            q, _, answer = format_graph_qa(inst, _TOK)
            items.append(build_finetune_item(q, answer, n_lat, _TOK.eos))
        return items
    sched = ScheduleConfig(**ck.extra["schedule"])
    windows = ingest_text_corpus(data_path, sched.seq_len + 1)
    if limit:
        windows = windows[:limit]
    rng = np.random.default_rng([ck.seed, 0x1D])
    return pretrain_items(windows, sched, rng)


def cmd_interp(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    task = args.task or ck.extra.get("task")
    items = _interp_items(ck, task, args.data, args.limit)
    if not items:
        raise ContractError("interp: empty dataset")
    dump = collect_activations(ck.system, items, cap_per_latent=args.cap)
    if args.dump_out:
        save_dump(args.dump_out, dump)
    capture = cross_capture(dump, args.tau, center=not args.uncentered)
    sil = silhouette(dump)
    paths = emit_report(capture, sil, args.out)
    try:
        h_off = f"{mean_offdiag(capture):.6f}"
    except ContractError:
        h_off = "nan"
    diag = np.nanmean(np.diag(capture.h))
    print(f"tau={args.tau} H_diag_mean={diag:.6f} H_off_mean={h_off} "
          f"global_silhouette={sil.global_score:.6f}")
    print(f"report={paths['summary']}")
    return 0


def cmd_passcount(args) -> int:
    n_l = args.n_latents
    seq_len = args.seq_len
    cfg = ModelConfig(n_layers=2, d_model=32, n_heads=2, vocab_size=64,
                      max_positions=seq_len + 2 * n_l + 8)
    rng = np.random.default_rng([args.seed, 0xBEEF])
    params = ModelParams.init(cfg, "base", rng, trainable=False)
    tokens = rng.integers(0, cfg.vocab_size, size=seq_len)

    roll_counter = PassCounter()
    _, passes = sequential_rollout(params, tokens, n_l, roll_counter)
    if passes != roll_counter.full_passes:
        raise ContractError("passcount: rollout pass accounting mismatch")

    from .engine import base_prefix_pass, coprocessor_pass, decode_pass
    from .engine import SoftTokenBank
    three_counter = PassCounter()
    site = seq_len - 1
    plan = AugmentationPlan(seq_len=seq_len, sites=(site,), n_latents=n_l,
                            n_ahead=1)
    bank = SoftTokenBank.init(n_l, cfg.d_model, rng)
    coproc = params.clone(role="coprocessor", trainable=False)
    cache = base_prefix_pass(params, tokens, three_counter)
    blocks = coprocessor_pass(coproc, cache, bank, plan, three_counter)
    decode_pass(params, cache, blocks, plan, [tokens[site: site + 1]],
                InjectionMode.EMBEDDING_FROZEN_BASE, three_counter)

    ratio = rollout_speedup(n_l)
    print(f"n_latents={n_l} three_pass_passes={three_counter.full_passes} "
          f"sequential_passes={roll_counter.full_passes} "
          f"ratio={ratio:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="kvlatent",
        description="Dual-model latent reasoning over an augmented KV cache")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", required=True, help="INI run config")
        sp.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override a config value")

    sp = sub.add_parser("pretrain", help="pretrain on corpus windows")
    add_config(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune on a task dataset")
    add_config(sp)
    sp.add_argument("--resume", default="",
                    help="checkpoint to initialize from")
    sp.add_argument("--allow-curriculum", action="store_true",
                    help="permit curriculum fine-tuning on countdown")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("gen-data", help="generate a dataset file")
    sp.add_argument("--task", required=True,
                    choices=["countdown", "graph_qa", "corpus"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--operands", type=int, default=3)
    sp.add_argument("--emit-unsolvable", action="store_true",
                    help="countdown: draw operands and target independently")
    sp.add_argument("--depth", type=int, default=4)
    sp.add_argument("--width", type=int, default=2)
    sp.add_argument("--bytes", type=int, default=1_000_000)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--task", default="",
                    help="override the checkpoint's recorded task")
    sp.add_argument("--limit", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("interp", help="latent-specialization diagnostics")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="report directory")
    sp.add_argument("--task", default="")
    sp.add_argument("--tau", type=float, default=0.97)
    sp.add_argument("--cap", type=int, default=512)
    sp.add_argument("--limit", type=int, default=0)
    sp.add_argument("--uncentered", action="store_true",
                    help="measure raw (uncentered) energy capture")
    sp.add_argument("--dump-out", default="",
                    help="also write the raw activation dump here")
    sp.set_defaults(func=cmd_interp)

    sp = sub.add_parser("passcount",
                        help="compare pass counts: three-pass vs rollout")
    sp.add_argument("--n-latents", type=int, default=16)
    sp.add_argument("--seq-len", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_passcount)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, NumericError, GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
