"""Command-line entry points.

Commands: gen-data, select-anchors, train, eval, sample, grad-check,
ablate. Each command is deterministic given its config file and flags;
the resolved configuration is echoed next to the outputs. Exit codes:
0 success, 2 config error, 3 I/O error, 4 numerical abort, 5 gradient
check failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import flowmatch as fm
from . import harness
from . import report
from . import synthdata as sd
from .config import ConfigError, load_config
from .corridor import A_DIM, CHUNK_DIM
from .geometry import as_polyline, minimax_objective, select_anchor_indices
from .util import splitmix64

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5


def _fail(code: int, message: str) -> int:
    print(message, file=sys.stderr)
    return code


def _echo_config(cfg, directory: Path, name: str = "resolved_config.json") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / name).write_text(cfg.to_json(), encoding="utf-8")


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["data"]["seed"]
    if seed is None:
        raise ConfigError("missing required field: data.seed (or pass --seed)")
    cfg.sections["data"]["seed"] = int(seed)
    records = sd.generate_dataset(cfg.dataset_config(), int(seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sd.write_dataset(out, records)
    _echo_config(cfg, out.parent, out.stem + ".config.json")
    print(len(records))
    return 0


def cmd_select_anchors(args) -> int:
    try:
        points = json.loads(Path(args.infile).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise sd.DatasetParseError(f"polyline file: {exc}") from exc
    poly = as_polyline(points)
    n = poly.shape[0]
    if args.k >= n - 1:
        raise ConfigError(f"k={args.k} infeasible for a polyline of {n} points")
    chosen = select_anchor_indices(poly, args.k, args.method)
    objective = minimax_objective(poly, chosen.indices)
    print("indices:", " ".join(str(i) for i in chosen.indices))
    print(f"objective: {objective:.9g}")
    return 0


def _load_records(cfg) -> list:
    path = cfg["data"]["path"]
    if path is None:
        raise ConfigError("missing required field: data.path")
    return sd.read_dataset(path, cfg["corridor"]["anchor_method"])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    settings = cfg.train_settings(args.seed)
    cfg.sections["train"]["seed"] = settings.seed
    records = _load_records(cfg)
    out_dir = Path(args.out_dir)
    _echo_config(cfg, out_dir)
    result = harness.train(settings, records)
    (out_dir / "metrics.jsonl").write_text(harness.metrics_to_jsonl(result.metrics),
                                           encoding="utf-8")
    result.save(out_dir / "checkpoint.json")
    report.render_training_curves(result.metrics, out_dir / "training_curves.png")
    if result.aborted:
        return _fail(EXIT_NUMERIC,
                     f"training aborted on non-finite {result.aborted}; "
                     f"last good checkpoint written to {out_dir / 'checkpoint.json'}")
    final = result.metrics[-1]
    print(json.dumps(final))
    return 0


def _model_and_data(args, cfg):
    model, _, meta = harness.load_model(args.checkpoint)
    records = _load_records(cfg)
    corridor_cfg = cfg.corridor_config()
    prepared = harness.prepare_dataset(records, corridor_cfg)
    return model, meta, prepared, corridor_cfg


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["eval"]["seed"]
    if seed is None:
        raise ConfigError("missing required field: eval.seed (or pass --seed)")
    model, _, prepared, corridor_cfg = _model_and_data(args, cfg)
    out_dir = Path(args.out_dir)
    _echo_config(cfg, out_dir)
    rep = harness.evaluate(model, prepared, np.arange(len(prepared)),
                           cfg["eval"]["sampler_steps"], int(seed),
                           corridor_cfg.target_mode,
                           max_records=cfg["eval"]["max_records"])
    payload = rep.to_dict()
    (out_dir / "eval_report.json").write_text(json.dumps(payload, indent=2) + "\n",
                                              encoding="utf-8")
    report.render_eval_families(payload, out_dir / "eval_families.png")
    print(json.dumps(payload))
    return 0


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["eval"]["seed"]
    if seed is None:
        raise ConfigError("missing required field: eval.seed (or pass --seed)")
    model, _, prepared, corridor_cfg = _model_and_data(args, cfg)
    records = _load_records(cfg)
    limit = cfg["eval"]["max_records"]
    n = len(records) if limit is None else min(limit, len(records))
    out_dir = Path(args.out_dir)
    _echo_config(cfg, out_dir)
    gen = fm.euler_sample(model, prepared.ctx[:n], cfg["eval"]["sampler_steps"],
                          np.random.default_rng(int(seed)))
    extended = model.spec.chunk_dim == CHUNK_DIM
    lines = []
    for i in range(n):
        chunk = gen[i]
        if not extended:
            full = np.zeros((chunk.shape[0], CHUNK_DIM))
            full[:, :A_DIM] = chunk
            chunk = full
        rec = sd.DatasetRecord(records[i].context, sd.quantize_sig9(chunk),
                               records[i].spec, records[i].seed)
        lines.append(sd.record_to_json(rec, extra={"generated": True}))
    out_path = out_dir / "samples.jsonl"
    out_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    cols = slice(A_DIM, A_DIM + 3) if extended else slice(0, 3)
    gt_paths = np.cumsum(
        np.stack([r.chunk[:, A_DIM : A_DIM + 3] for r in records[:n]]), axis=1
    )
    gen_paths = np.cumsum(gen[:, :, cols], axis=1)
    report.render_sample_paths(gt_paths, gen_paths, out_dir / "sample_paths.png")
    print(n)
    return 0


def cmd_grad_check(args) -> int:
    from .corridor import total_loss

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    if seed is None:
        raise ConfigError("missing required field: train.seed (or pass --seed)")
    seed = int(seed)
    corridor_cfg = cfg.corridor_config()
    data_cfg = cfg.dataset_config()
    probe_cfg = sd.DatasetConfig(
        families=data_cfg.families, chunks=max(4, args.batch),
        chunk_len=data_cfg.chunk_len, k=data_cfg.k,
        anchor_method=data_cfg.anchor_method, anchor_target=data_cfg.anchor_target,
        noise_std=data_cfg.noise_std, stride=data_cfg.stride, gen=data_cfg.gen,
    )
    records = sd.generate_dataset(probe_cfg, splitmix64(seed, 100))
    prepared = harness.prepare_dataset(records, corridor_cfg)
    settings = cfg.train_settings(seed)
    spec = fm.ModelSpec(
        chunk_len=prepared.chunk_len,
        chunk_dim=CHUNK_DIM if corridor_cfg.extra_a else A_DIM,
        context_dim=prepared.ctx.shape[1],
        k_anchors=corridor_cfg.k,
        hidden_width=settings.hidden_width,
        hidden_layers=settings.hidden_layers,
        embed_dim=settings.embed_dim,
        encoder_hidden=settings.encoder_hidden,
        head_hidden=settings.head_hidden,
    )
    model = fm.VelocityFieldModel.init(spec, np.random.default_rng(splitmix64(seed, 1)))
    model.set_normalization(prepared.x_for(corridor_cfg.extra_a))
    sel = np.arange(min(args.batch, len(prepared)))
    batch = prepared.batch(sel, corridor_cfg.extra_a)
    draw_rng = np.random.default_rng(splitmix64(seed, 2))
    t, xi = fm.fm_draws(int(draw_rng.integers(0, 2**63)), batch.x_raw, batch.ctx)

    def loss_and_grads():
        model.store.zero_grads()
        total, _, _ = total_loss(model, batch, corridor_cfg, None,
                                 frozen_draws=(t, xi))
        return total

    def value_only():
        total, _, _ = total_loss(model, batch, corridor_cfg, None,
                                 backward=False, frozen_draws=(t, xi))
        return total

    rep = dc.grad_check(loss_and_grads, model.store, h=args.h,
                        max_coords=args.coords, seed=splitmix64(seed, 3),
                        value_fn=value_only)
    print(json.dumps(rep.to_dict()))
    if rep.max_rel_err > args.tol:
        return _fail(EXIT_GRADCHECK,
                     f"gradient check failed: {rep.max_rel_err:.3e} > {args.tol:.3e}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    settings = cfg.train_settings(args.seed)
    cfg.sections["train"]["seed"] = settings.seed
    out_dir = Path(args.out_dir)
    _echo_config(cfg, out_dir)
    if cfg["data"]["path"] is not None:
        records = _load_records(cfg)
    else:
        data_seed = cfg["data"]["seed"]
        if data_seed is None:
            raise ConfigError("missing required field: data.seed (or data.path)")
        records = sd.generate_dataset(cfg.dataset_config(), int(data_seed))
    rows, results = harness.run_ablation_suite(settings, records)
    (out_dir / "ablation.csv").write_text(harness.ablation_rows_to_csv(rows),
                                          encoding="utf-8")
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n",
                                           encoding="utf-8")
    for name, result in results.items():
        if isinstance(result, str):
            continue
        slug = name.replace("+", "_")
        (out_dir / f"metrics_{slug}.jsonl").write_text(
            harness.metrics_to_jsonl(result.metrics), encoding="utf-8")
        result.save(out_dir / f"checkpoint_{slug}.json")
    report.render_ablation_chart(rows, out_dir / "ablation_metrics.png")
    failed = [r["variant"] for r in rows if "error" in r]
    print(harness.ablation_rows_to_csv(rows), end="")
    if failed:
        return _fail(EXIT_NUMERIC, f"failed variants: {', '.join(failed)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corridorflow",
        description="Corridor-regularized flow matching on synthetic manipulation chunks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a chunk dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("select-anchors", help="anchor indices for a polyline file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--method", choices=("rdp_dp", "uniform"), default="rdp_dp")
    p.set_defaults(fn=cmd_select_anchors)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="generate chunks from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("grad-check", help="finite-difference check of the objective")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--batch", type=int, default=8)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("ablate", help="run the ablation suite")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"config error: {exc}")
    except (sd.DatasetParseError, sd.DatasetSchemaError) as exc:
        return _fail(EXIT_IO, f"dataset error: {exc}")
    except OSError as exc:
        return _fail(EXIT_IO, f"i/o error: {exc}")
    except (dc.TrainingAbortError, dc.GradientAbortError, fm.SamplingError) as exc:
        return _fail(EXIT_NUMERIC, f"numerical abort: {exc}")
    except ValueError as exc:
        return _fail(EXIT_CONFIG, f"invalid arguments: {exc}")


if __name__ == "__main__":
    sys.exit(main())
