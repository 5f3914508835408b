"""``taylorformer`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from . import attention as attn
from . import verify
from .backbone import ModelConfig, backbone_forward, count_params, init_params, load_model, save_model, \
    zero_residual_head
from .embedding import dcn_macs, dsdcn_macs
from .netpbm import NetpbmError, read_image, write_heatmap, write_image
from .tensor_core import _atomic_write, make_rng, save_checkpoint, save_raw
from .training import DEFAULT_LR, DEFAULT_STEPS, MicroTask, micro_train

log = logging.getLogger("taylorformer")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _load_config(path) -> ModelConfig:
    return ModelConfig.load(path) if path else ModelConfig.nano()


def cmd_verify(args) -> int:
    with contextlib.ExitStack() as stack:
        for fault in args.inject_fault or []:
            stack.enter_context(attn.inject_fault(fault))
        records = verify.run_suite(args.suite, args.seed)
    text = verify.report_lines(records)
    sys.stdout.write(text)
    if args.out_dir:
        _atomic_write(Path(args.out_dir) / f"verify_{args.suite}.jsonl", text.encode())
    return EXIT_OK if all(r["passed"] for r in records) else EXIT_FAIL


def cmd_bench(args) -> int:
    reports = []
    for op in args.op:
        sizes = args.sizes or {"tmsa_linear": [1024, 4096, 16384, 65536], "softmax": [256, 512, 1024, 2048],
                               "tmsa_quadratic": [256, 512, 1024, 2048], "noop": [1024, 4096, 16384, 65536]}[op]
        rep = analysis.bench_scaling(op, sizes, args.reps, args.dim, args.seed)
        reports.append(rep)
        flag = " (timer too coarse for smallest size)" if rep.coarse_timer and op != "noop" else ""
        print(f"{op}: slope {rep.slope:.3f} residual {rep.residual:.3f}{flag}")
    if args.threads > 1:
        cfg = _load_config(args.config)
        ratio = analysis.bench_branch_parallelism(cfg, init_params(cfg, args.seed),
                                                  make_rng(args.seed).random((3, 32, 32)), args.threads)
        print(f"branch-parallel speedup with {args.threads} threads: {ratio:.3f}x")
    if args.out_dir:
        out = Path(args.out_dir)
        analysis.write_csv(out / "scaling.csv", [row for rep in reports for row in rep.rows()])
        if args.format == "svg":
            analysis.write_loglog_svg(out / "scaling.svg", reports)
    return EXIT_OK


def _probe(name: str, seed: int):
    if name == "focus":
        return analysis.PROBE_QUERY, analysis.PROBE_KEYS
    if name == "uniform":
        q = np.ones((16, 4))
        return q, q
    if name.startswith("random"):
        n = int(name.partition(":")[2] or 64)
        if n > attn.MAX_DENSE_TOKENS:
            raise MemoryError(f"probe of {n} tokens exceeds the {attn.MAX_DENSE_TOKENS} guard")
        rng = make_rng(seed)
        return rng.standard_normal((n, 4)), rng.standard_normal((n, 4))
    raise ValueError(f"unknown probe {name!r}")


def cmd_attn_map(args) -> int:
    q, k = _probe(args.probe, args.seed)
    out = Path(args.out_dir or ".")
    for s in args.modulation:
        for p in args.p:
            cfg = attn.AttentionConfig(head_dim=q.shape[1], focused_factor=p, modulation=s)
            m = attn.dense_attention_map(q, k, cfg)
            stem = f"attn_{args.probe.replace(':', '')}_s{s:g}_p{p:g}"
            if args.format == "raw":
                save_raw(out / f"{stem}.ttnsr", m)
            else:
                write_heatmap(out / f"{stem}.pgm", m)
            print(f"{stem}: peak {m.max():.6f} entropy {analysis.row_entropy(m):.6f}")
    return EXIT_OK


def cmd_macs(args) -> int:
    h, w, d, k = args.height, args.width, args.dim, args.kernel
    print(f"softmax-attention  {analysis.attention_macs('softmax', h, w, d, k)}")
    print(f"tmsa++             {analysis.attention_macs('tmsa++', h, w, d, k)}")
    print(f"dcn                {dcn_macs(d, k, h, w)}")
    print(f"dsdcn              {dsdcn_macs(d, k, h, w)}")
    if args.config or args.variant:
        cfg = ModelConfig.variant(args.variant) if args.variant else _load_config(args.config)
        print(f"params             {count_params(cfg)}")
    print("note: published model MAC totals do not state an input resolution; values here are per layer at "
          f"{h}x{w}")
    return EXIT_OK


def _pad_to(img: np.ndarray, multiple: int = 8) -> tuple[np.ndarray, tuple[int, int]]:
    _, h, w = img.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return img, (h, w)


def cmd_restore(args) -> int:
    img = read_image(args.input)
    if args.checkpoint:
        cfg, params = load_model(args.checkpoint)
    else:
        cfg = _load_config(args.config)
        params = init_params(cfg, args.seed)
    if args.zero_residual:
        params = zero_residual_head(params)
    if img.shape[0] != cfg.in_channels:
        raise ValueError(f"image has {img.shape[0]} channels, model expects {cfg.in_channels}")
    padded, (h, w) = _pad_to(img)
    restored = backbone_forward(padded, cfg, params, threads=args.threads)[:, :h, :w]
    write_image(args.output, restored)
    return EXIT_OK


def cmd_micro_train(args) -> int:
    task = MicroTask(seed=args.seed)
    state = micro_train(task, args.steps, args.lr)
    print(f"loss {state.loss_history[0]:.6f} -> {state.loss_history[-1]:.6f}  s = {state.s:.6f}")
    if args.out_dir:
        out = Path(args.out_dir)
        analysis.write_csv(out / "loss_history.csv",
                           [{"step": i, "loss": v} for i, v in enumerate(state.loss_history)])
        save_checkpoint(out / "micro_block", state.params)
    return EXIT_OK


def cmd_ablate(args) -> int:
    rows = analysis.run_ablation(analysis.AblationSpec(), analysis.SyntheticTask.make(args.seed))
    text = analysis.rows_to_csv(rows)
    sys.stdout.write(text)
    if args.out_dir:
        _atomic_write(Path(args.out_dir) / "ablation.csv", text.encode())
    return EXIT_OK


def cmd_init_checkpoint(args) -> int:
    cfg = _load_config(args.config)
    params = init_params(cfg, args.seed)
    if args.zero_residual:
        params = zero_residual_head(params)
    save_model(args.out_dir or "checkpoint", cfg, params)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--config", help="model config file (key = value lines)")
    shared.add_argument("--out-dir")
    shared.add_argument("--format", choices=["csv", "svg", "pgm", "raw"])
    shared.add_argument("--threads", type=int, default=1)
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="taylorformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[shared], help="run property suites, JSON-lines report")
    p.add_argument("suite", nargs="?", default="all", choices=list(verify.SUITES) + ["all"])
    p.add_argument("--inject-fault", action="append", choices=["phi_sign"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", parents=[shared], help="runtime scaling of attention kernels")
    p.add_argument("--op", nargs="+", default=["tmsa_linear", "softmax"],
                   choices=["tmsa_linear", "softmax", "tmsa_quadratic", "noop"])
    p.add_argument("--sizes", nargs="+", type=int)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--dim", type=int, default=16)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attn-map", parents=[shared], help="render dense attention maps as PGM heat maps")
    p.add_argument("--probe", default="focus", help="focus, uniform or random[:n]")
    p.add_argument("--modulation", nargs="+", type=float, default=[0.0, 0.5])
    p.add_argument("--p", nargs="+", type=float, default=[3.0, 4.0, 8.0])
    p.set_defaults(func=cmd_attn_map)

    p = sub.add_parser("macs", parents=[shared], help="closed-form MAC counts")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--dim", type=int, default=24)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--variant", choices=["nano", "B", "L", "XL"])
    p.set_defaults(func=cmd_macs)

    p = sub.add_parser("restore", parents=[shared], help="run the network on a PPM image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--checkpoint")
    p.add_argument("--zero-residual", action="store_true")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("micro-train", parents=[shared], help="fit one attention block on synthetic denoising")
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.set_defaults(func=cmd_micro_train)

    p = sub.add_parser("ablate", parents=[shared], help="toggle sweep on a synthetic instance")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("init-checkpoint", parents=[shared], help="write a seeded checkpoint for --config")
    p.add_argument("--zero-residual", action="store_true")
    p.set_defaults(func=cmd_init_checkpoint)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, NetpbmError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ValueError, MemoryError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
