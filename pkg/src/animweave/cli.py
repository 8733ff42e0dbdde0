"""Command-line interface: generate, invert, eval, describe and bench.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig
from .errors import ConfigurationError

log = logging.getLogger("animweave")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _fail(exc: BaseException, stage: str) -> int:
    payload = {"error": type(exc).__name__, "stage": stage, "message": str(exc)}
    raw = getattr(exc, "raw_output", None)
    if raw:
        payload["raw_output"] = raw[:2000]
    print(json.dumps(payload), file=sys.stderr)
    return EXIT_RUNTIME


def _config(args, **flags) -> RunConfig:
    base = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = base.merged(flags)
    cfg.validate()
    return cfg


def _load_image(path, size: Optional[tuple[int, int]] = None) -> np.ndarray:
    from PIL import Image

    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size[1], size[0]):
        log.info("resizing %s from %s to %s", path, img.size, (size[1], size[0]))
        img = img.resize((size[1], size[0]), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32) / 255.0


# -- commands ---------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from .backbone import load_backbone
    from .controller import AnimationRequest, Transcript, make_backend, plan_animation
    from .generator import AnimationGenerator
    from .metrics import evaluate

    cfg = _config(args, backbone=args.backbone, weights=args.weights, llm_backend=args.llm, n_f=args.nf,
                  n_t=args.nt, strategy=args.strategy, output_dir=args.out, trace_cache=args.trace_cache,
                  seed=args.seed, jobs=args.jobs, steps=args.steps, w=args.w)
    run_dir = Path(cfg.output_dir)
    stage = "setup"
    try:
        backbone = load_backbone(cfg.backbone, cfg.weights)
        image = _load_image(args.image, backbone.descriptor.image_size) if args.image else None
        backend = make_backend(cfg.llm_backend, cfg.llm_model, cfg.llm_timeout, cfg.llm_max_retries)
        request = AnimationRequest(args.description, image, cfg.n_t, cfg.n_f, cfg.seed)
        transcript = Transcript()
        stage = "planning"
        try:
            plan = plan_animation(request, backend, cfg.n_t_cap, cfg.strategy, None, transcript)
        finally:
            transcript.dump(run_dir / "transcripts")
        stage = "generation"
        generator = AnimationGenerator(backbone, cfg)
        result = generator.generate_animation(request, plan, run_dir)
        stage = "metrics"
        report = evaluate(result.frames, result.initial_image, plan.prompts,
                          [(r["stage"], r["alpha"]) for r in result.records], result.timings.get("total"))
        report.write(run_dir / "metrics.json")
    except Exception as exc:
        return _fail(exc, stage)
    print(f"{result.n_frames} frames -> {run_dir}")
    for tr in plan.transitions:
        print(f"  stage {tr.index}: {plan.prompts[tr.index]!r} -> {plan.prompts[tr.index + 1]!r} "
              f"[{tr.strategy.value}, {tr.source}]")
    print(f"  PIC {report.pic:.3f}  LPIPS_T {report.lpips_total:.3f}  PPL {report.ppl:.3f}")
    return EXIT_OK


def cmd_invert(args) -> int:
    import torch

    from .backbone import load_backbone
    from .generator import AnimationGenerator, save_png

    cfg = _config(args, backbone=args.backbone, weights=args.weights, steps=args.steps,
                  trace_cache=args.trace_cache, output_dir=args.out)
    try:
        backbone = load_backbone(cfg.backbone, cfg.weights)
        image = _load_image(args.image, backbone.descriptor.image_size)
        gen = AnimationGenerator(backbone, cfg)
        emb = backbone.encode_prompt(args.prompt)
        z_T, _ = gen._invert(image, emb, [], "cli")
        recon, z0 = gen.reconstruct(image, args.prompt)
        source = backbone.encode_image(image).values
        rel = float(torch.linalg.vector_norm(z0 - source) / torch.linalg.vector_norm(source))
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.save(out / "z_T.npy", z_T.values.numpy())
        save_png(recon, out / "reconstruction.png")
        (out / "inversion.json").write_text(json.dumps(
            {"prompt": args.prompt, "steps": cfg.steps, "backbone": cfg.backbone, "latent_relative_error": rel},
            indent=2))
    except Exception as exc:
        return _fail(exc, "inversion")
    print(f"z_T -> {out / 'z_T.npy'}  (round-trip latent relative error {rel:.2e})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import Metrics, evaluate, load_frames

    try:
        frames = load_frames(args.frames)
        image = _load_image(args.image, frames[0].shape[:2])
        prompts, alphas = None, None
        manifest = Path(args.frames).parent / "manifest.json"
        if manifest.exists():
            data = json.loads(manifest.read_text())
            if len(data.get("frames", [])) == len(frames):
                prompts = data["plan"]["prompts"]
                alphas = [(r["stage"], r["alpha"]) for r in data["frames"]]
        report = evaluate(frames, image, prompts, alphas, None, Metrics(args.metrics_backend))
        out = Path(args.out) if args.out else Path(args.frames).parent / "metrics.json"
        report.write(out)
    except Exception as exc:
        return _fail(exc, "eval")
    print(json.dumps({k: v for k, v in report.to_json().items() if k != "meta"}, indent=2))
    return EXIT_OK


def cmd_describe(args) -> int:
    from .backbone import describe_descriptor, descriptor_for
    from .injection import Strategy

    try:
        d = descriptor_for(args.backbone)
    except KeyError as exc:
        return _fail(exc, "describe")
    cfg = _config(args, backbone=args.backbone)
    print(describe_descriptor(d))
    print("default schedules:")
    fai = cfg.schedule(Strategy.FAI, d.num_decoder_layers, d.attention_layers)
    kv = cfg.schedule(Strategy.KVAI, d.num_decoder_layers, d.attention_layers)
    print(f"  FAI: {fai.describe()}")
    print(f"  KVAI/DAI: {kv.describe()}")
    active = sorted(set(kv.decoder_layers) & set(d.attention_layers))
    print(f"  KVAI/DAI self-attention sites used: layers {', '.join(map(str, active)) or 'none'}")
    return EXIT_OK


def _resolve_set(name: str) -> Path:
    from .benchmark import bundled_set

    if name in ("sample", "smoke"):
        return bundled_set(name)
    return Path(name)


def cmd_bench_run(args) -> int:
    from .benchmark import AblationMode, emit_table, load_benchmark, run_benchmark

    cfg = _config(args, backbone=args.backbone, weights=args.weights, llm_backend=args.llm, jobs=args.jobs,
                  steps=args.steps)
    try:
        ablation = AblationMode.parse(args.ablation)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        bset = load_benchmark(_resolve_set(args.set))
        results = run_benchmark(bset, cfg, ablation, args.out, jobs=cfg.jobs, probe=args.runtime_probe)
        out = Path(args.out)
        emit_table(results, "markdown", out / "table.md")
        emit_table(results, "csv", out / "table.csv")
    except Exception as exc:
        return _fail(exc, "benchmark")
    print(emit_table(results, "markdown"))
    failed = [r.entry.id for r in results.entries if not r.ok]
    if failed:
        print(f"{len(failed)} entries failed: {', '.join(failed)}", file=sys.stderr)
    return EXIT_RUNTIME if len(failed) == len(results.entries) else EXIT_OK


def cmd_bench_expand(args) -> int:
    from .benchmark import expand_descriptions, write_benchmark
    from .controller import make_backend

    cfg = _config(args, llm_backend=args.llm)
    try:
        seeds = [json.loads(line) for line in Path(args.seeds).read_text().splitlines() if line.strip()]
        backend = make_backend(cfg.llm_backend, cfg.llm_model, cfg.llm_timeout, cfg.llm_max_retries)
        entries = expand_descriptions(seeds, backend, args.nf, cfg.n_t_cap)
        write_benchmark(entries, args.out)
    except Exception as exc:
        return _fail(exc, "expand")
    print(f"{len(entries)} entries -> {args.out}")
    return EXIT_OK


def cmd_bench_validate(args) -> int:
    from .benchmark import load_benchmark, validate_reference_split

    try:
        bset = load_benchmark(_resolve_set(args.set))
        counts = {c.value: n for c, n in bset.counts().items()}
        if args.reference:
            validate_reference_split(bset.counts())
    except Exception as exc:
        return _fail(exc, "validate")
    print(json.dumps(counts))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--backbone", help="tiny-test or sd15-like")
    p.add_argument("--weights", help="weights directory (or set ANIMWEAVE_WEIGHTS)")
    p.add_argument("--steps", type=int, help="DDIM steps (default 50)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="animweave", description="Text-conditioned image-to-animation.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="plan and render an animation")
    _common(g)
    g.add_argument("-d", "--description", required=True, help="animation description")
    g.add_argument("--image", help="input image; generated from the enhanced prompt when absent")
    g.add_argument("--llm", help="mock or openai-compatible")
    g.add_argument("--nf", type=int, help="frames per stage (default 12)")
    g.add_argument("--nt", type=int, help="number of stages (default: chosen by the planner)")
    g.add_argument("--strategy", choices=["FAI", "KVAI", "DAI", "None"], help="bypass the strategy classifier")
    g.add_argument("--w", type=float, help="decremental weight (default 0.8)")
    g.add_argument("--out", help="run directory")
    g.add_argument("--trace-cache", help="directory for cached inversion traces")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int)
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("invert", help="DDIM-invert an image and write z_T plus its reconstruction")
    _common(i)
    i.add_argument("--image", required=True)
    i.add_argument("--prompt", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--trace-cache")
    i.set_defaults(func=cmd_invert)

    e = sub.add_parser("eval", help="compute metrics for a directory of frames")
    e.add_argument("frames", help="directory of PNG frames")
    e.add_argument("--image", required=True, help="input image the animation starts from")
    e.add_argument("--out", help="metrics.json path (default: next to the frames directory)")
    e.add_argument("--metrics-backend", default="frozen", choices=["frozen", "pretrained"])
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("describe", help="print decoder layers, hook sites and default schedules")
    d.add_argument("--backbone", default="tiny-test")
    d.add_argument("--config")
    d.set_defaults(func=cmd_describe)

    b = sub.add_parser("bench", help="benchmark tools")
    bsub = b.add_subparsers(dest="bench_command", required=True)
    br = bsub.add_parser("run", help="run a benchmark set and emit results tables")
    _common(br)
    br.add_argument("--set", required=True, help="JSONL path, or 'sample' / 'smoke' for the bundled sets")
    br.add_argument("--ablation", default=None, help="e.g. w/o-ICA, w/o-FAI, or a comma list")
    br.add_argument("--out", required=True)
    br.add_argument("--llm")
    br.add_argument("--jobs", type=int)
    br.add_argument("--runtime-probe", action="store_true", help="time a 16-frame stage per strategy")
    br.set_defaults(func=cmd_bench_run)
    be = bsub.add_parser("expand", help="expand seed descriptions into entries with the planning agents")
    be.add_argument("--seeds", required=True, help="JSONL of {category, description[, id, n_t]}")
    be.add_argument("--out", required=True)
    be.add_argument("--llm")
    be.add_argument("--nf", type=int, default=12)
    be.add_argument("--config")
    be.set_defaults(func=cmd_bench_expand)
    bv = bsub.add_parser("validate", help="load a set and print its category counts")
    bv.add_argument("--set", required=True)
    bv.add_argument("--reference", action="store_true", help="require the 70/70/60 reference split")
    bv.set_defaults(func=cmd_bench_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        parser.print_usage(sys.stderr)
        print(f"animweave: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
