"""Command-line entry point.

Commands: pretrain, finetune, merge, eval, gradcheck, ablate.
Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 state misuse.
Set VORA_LOG=debug for per-step logging (default: info).
"""

import argparse
import itertools
import json
import logging
import os
import sys
import time

from . import checkpoint, config, gradcheck, lora, trainer

log = logging.getLogger("vora")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_STATE = 4


class StateError(RuntimeError):
    pass


def _setup_logging():
    level = logging.DEBUG if os.environ.get("VORA_LOG", "info").lower() == "debug" else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)


def _write_run_dir(out_dir, run_cfg, metrics, pipe, meta):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as f:
        for rec in metrics:
            f.write(json.dumps(rec) + "\n")
    # the timestamp is the only run-to-run difference, confined to this line
    with open(os.path.join(out_dir, "config.resolved"), "w") as f:
        f.write(f"# written: {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        f.write(config.normalize(run_cfg))
    checkpoint.save(os.path.join(out_dir, "checkpoint.vora"),
                    pipe.cfg, trainer.collect_state(pipe), meta)


def _metrics_logger():
    def sink(rec):
        log.debug("step %d lr %.6f total %.4f lm %.4f", rec["step"], rec["lr"],
                  rec["total_loss"], rec["lm_loss"])
    return sink


def cmd_pretrain(args):
    run_cfg = config.parse_file(args.config)
    mcfg = run_cfg.model_config()
    dcfg = run_cfg.data_config()
    tcfg = run_cfg.train_config()
    if tcfg.mode == "finetune":
        raise config.ConfigFileError("mode=finetune: use the finetune command")
    pipe = trainer.build_pipeline(mcfg, seed=tcfg.seed, teacher_warm=tcfg.teacher_warm,
                                  teacher_warm_steps=tcfg.teacher_warm_steps)
    meta = {"stage": "pretrain", "merged": "false",
            "mask_mode": tcfg.mask_mode, "distill_mode": tcfg.distill_mode}
    if tcfg.mode == "full_llm_unstable":
        _, metrics, summary = trainer.full_llm_probe(pipe, tcfg, dcfg, metrics_sink=_metrics_logger())
        meta["stage"] = "full_llm_unstable"
        _write_run_dir(args.out_dir, run_cfg, metrics, pipe, meta)
        with open(os.path.join(args.out_dir, "summary.json"), "w") as f:
            json.dump(summary, f)
        log.info("full-model probe done: %s", summary)
    else:
        _, metrics = trainer.pretrain(pipe, tcfg, dcfg, metrics_sink=_metrics_logger())
        _write_run_dir(args.out_dir, run_cfg, metrics, pipe, meta)
        log.info("pretrain done: %d steps -> %s", tcfg.total_steps, args.out_dir)
    return EXIT_OK


def cmd_finetune(args):
    run_cfg = config.parse_file(args.config)
    cfg, tensors, meta = checkpoint.load(args.checkpoint)
    if meta.get("merged") == "true":
        raise StateError("checkpoint is already merged; fine-tuning needs unmerged adapters")
    if not any(n.startswith("lora.") for n in tensors):
        raise StateError("checkpoint carries no adapters to merge")
    pipe = trainer.pipeline_from_state(cfg, tensors, meta)
    tcfg = run_cfg.train_config(mode="finetune")
    dcfg = run_cfg.data_config()
    _, metrics = trainer.finetune(pipe, tcfg, dcfg, metrics_sink=_metrics_logger())
    out_meta = {"stage": "finetune", "merged": "true",
                "mask_mode": tcfg.mask_mode, "distill_mode": "none"}
    _write_run_dir(args.out_dir, run_cfg, metrics, pipe, out_meta)
    log.info("finetune done: %d steps -> %s", tcfg.total_steps, args.out_dir)
    return EXIT_OK


def cmd_merge(args):
    cfg, tensors, meta = checkpoint.load(args.checkpoint_in)
    if meta.get("merged") == "true":
        raise StateError("checkpoint is already merged")
    if not any(n.startswith("lora.") for n in tensors):
        raise StateError("checkpoint carries no adapters to merge")
    pipe = trainer.pipeline_from_state(cfg, tensors, meta)
    lora.merge_all(pipe.model, pipe.adapters)
    merged = {}
    merged.update(pipe.model.params)
    merged.update(pipe.vembed.params)
    merged.update(pipe.teacher.params)
    out_meta = dict(meta)
    out_meta.update(stage="merged", merged="true")
    checkpoint.save(args.checkpoint_out, cfg, merged, out_meta)
    log.info("merged %d adapters -> %s", len(pipe.adapters), args.checkpoint_out)
    return EXIT_OK


def cmd_eval(args):
    run_cfg = config.parse_file(args.config)
    cfg, tensors, meta = checkpoint.load(args.checkpoint)
    pipe = trainer.pipeline_from_state(cfg, tensors, meta)
    tcfg = run_cfg.train_config()
    dcfg = run_cfg.data_config()
    metrics = trainer.eval_metrics(pipe, dcfg, tcfg,
                                   n_caption=run_cfg["eval_captions"],
                                   n_text=run_cfg["eval_texts"],
                                   max_new=run_cfg["eval_max_new"])
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args):
    run_cfg = config.parse_file(args.config)
    _ = run_cfg  # seed and sizes are pinned by the suite itself
    ok = True
    for name, err, passed in gradcheck.op_suite(seed=run_cfg["seed"]):
        print(f"{'PASS' if passed else 'FAIL'} op {name}: max rel err {err:.2e}")
        ok &= passed
    results, e2e_ok = gradcheck.end_to_end_check(seed=run_cfg["seed"])
    worst = max(err for _, err, _ in results)
    print(f"{'PASS' if e2e_ok else 'FAIL'} end-to-end objective: worst rel err {worst:.2e}")
    ok &= e2e_ok
    return EXIT_OK if ok else 1


def cmd_ablate(args):
    run_cfg = config.parse_file(args.config)
    mcfg = run_cfg.model_config()
    dcfg = run_cfg.data_config()
    tcfg = run_cfg.train_config()
    grid = list(itertools.product(run_cfg["ablate_masks"], run_cfg["ablate_distills"],
                                  run_cfg["ablate_ranks"]))
    os.makedirs(args.out_dir, exist_ok=True)
    rows, curves = trainer.run_ablation(mcfg, tcfg, dcfg, grid, run_cfg["thresholds"],
                                        run_cfg["ablate_steps"],
                                        csv_path=os.path.join(args.out_dir, "report.csv"))
    with open(os.path.join(args.out_dir, "config.resolved"), "w") as f:
        f.write(f"# written: {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        f.write(config.normalize(run_cfg))
    for (mask, dist, rank), metrics in curves.items():
        tag = f"{mask}_{dist}_r{rank}"
        with open(os.path.join(args.out_dir, f"metrics_{tag}.jsonl"), "w") as f:
            for rec in metrics:
                f.write(json.dumps(rec) + "\n")
    log.info("ablation done: %d cells, %d rows -> %s", len(grid), len(rows), args.out_dir)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="vora", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="stage-1 training: frozen base, adapters learn vision")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage-2 training: merge adapters, train the full model")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("merge", help="fold adapters into the base weights")
    p.add_argument("checkpoint_in")
    p.add_argument("checkpoint_out")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("config")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="mask/distill/rank grid with fixed data order")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except config.ConfigFileError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except trainer.TrainAbort as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except (StateError, lora.MergeStateError, checkpoint.CheckpointError) as exc:
        log.error("state error: %s", exc)
        return EXIT_STATE


if __name__ == "__main__":
    sys.exit(main())
