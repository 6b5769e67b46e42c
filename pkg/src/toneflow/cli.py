"""Command-line entry point: corpus generation, training, reconstruction,
editing, sweeps, and corpus evaluation.

Every subcommand accepts ``--config FILE`` with a JSON object whose keys are
the subcommand's option names (dashes as underscores); explicit flags win
over config values, and unknown keys are rejected. Outputs are CSV/JSON/
binary artifacts only; plotting stays out of process.

Exit codes: 0 success, 1 usage error, 2 data/file error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

# Single-threaded BLAS: the matrices here are small enough that thread
# synchronization costs more than it saves, and a fixed reduction order
# keeps reruns bitwise reproducible. Effective only if numpy is not loaded
# yet, which holds when the CLI is the entry point.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np

from . import latents, metrics, synth
from .editing import EditConfig, edit, invert_and_cache, sweep
from .errors import (
    CacheMissError,
    MetricUndefinedError,
    NumericsError,
    TrainingDivergedError,
    WavFormatError,
)
from .net import Conditioning, NetConfig, VelocityNet, load_checkpoint
from .solver import SolverConfig, reconstruct
from .synth import STYLES, TIMBRES, make_corpus, load_corpus, save_corpus
from .training import TrainConfig, dataset_from_corpus, smoothed_losses, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

METRIC_CSV_HEADER = [
    "clip_id",
    "source_class",
    "target_class",
    "strategy",
    "n",
    "m",
    "chroma_sim",
    "cqt_pcc",
    "align_source",
    "align_target",
    "fad",
]

SWEEP_CSV_HEADER = ["n", "m", "fidelity", "transferability", "clip_count"]


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _append_csv(path, header: list[str], rows: list[dict]) -> None:
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        if fresh:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _merge_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags, with strict key checking."""
    given = vars(args)
    merged = dict(defaults)
    config_path = given.pop("config", None)
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(loaded)
    merged.update(given)
    return merged


def _load_corpus(path) -> synth.Corpus:
    try:
        return load_corpus(path)
    except FileNotFoundError as exc:
        raise DataError(f"corpus not found at {path}: {exc}") from exc


def _load_net(path) -> VelocityNet:
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _find_clip(corpus: synth.Corpus, clip_id):
    if clip_id is None:
        return corpus.clips[0]
    for clip in corpus.clips:
        if clip.clip_id == clip_id:
            return clip
    raise DataError(f"clip {clip_id!r} not in corpus")


def _clip_conditioning(spec: synth.ClipSpec) -> Conditioning:
    return Conditioning.for_labels(TIMBRES.index(spec.timbre), STYLES.index(spec.style))


# --- subcommands ---------------------------------------------------------------


def cmd_gen_corpus(opts: dict) -> int:
    if opts["count_per_class"] < 1:
        raise UsageError("count-per-class must be >= 1")
    corpus = make_corpus(opts["count_per_class"], seed=opts["seed"], split=opts["split"])
    manifest = save_corpus(corpus, opts["out"])
    print(f"wrote {len(corpus.clips)} clips to {manifest}")
    return EXIT_OK


def cmd_train(opts: dict) -> int:
    corpus = _load_corpus(opts["corpus"])
    net_cfg = NetConfig(
        model_dim=opts["model_dim"],
        head_count=opts["head_count"],
        double_blocks=opts["double_blocks"],
        single_blocks=opts["single_blocks"],
        seed=opts["net_seed"],
    )
    train_cfg = TrainConfig(
        steps=opts["steps"],
        batch_size=opts["batch_size"],
        learning_rate=opts["learning_rate"],
        null_prob=opts["null_prob"],
        seed=opts["seed"],
    )
    result = train(dataset_from_corpus(corpus), net=VelocityNet(net_cfg), config=train_cfg)
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    result.net.save(out)
    smooth = smoothed_losses(result.losses)
    curve_path = out.with_suffix(out.suffix + ".losses.csv")
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "smoothed"])
        for i, (raw, sm) in enumerate(zip(result.losses, smooth)):
            writer.writerow([i, f"{raw:.8f}", f"{sm:.8f}"])
    print(f"checkpoint {out}  loss {result.initial_loss:.4f} -> {result.final_smoothed_loss:.4f}")
    if not result.final_smoothed_loss < result.initial_loss:
        print("training did not reduce the loss", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_reconstruct(opts: dict) -> int:
    net = _load_net(opts["checkpoint"])
    corpus = _load_corpus(opts["corpus"])
    clip = _find_clip(corpus, opts["clip"])
    cond = _clip_conditioning(clip.spec)
    tokens = latents.flow_tokens(clip.latent)
    field = lambda z, t, c: net.forward(z, t, cond)

    from .flow import TimeGrid

    grid = TimeGrid.uniform(opts["steps"], "reverse")
    for stepper in ("euler", "rf2"):
        report = reconstruct(field, tokens, grid, stepper, config=SolverConfig(delta_t=opts["delta_t"]))
        print(f"{clip.clip_id} N={opts['steps']} {stepper}: rel_error {report.error:.6f}")
    return EXIT_OK


def _metric_row(clip_id, source_class, target_class, strategy, n, m, source_latent, edited_latent, protos) -> dict:
    # latent-domain proxies: edited clips exist only as log-mel latents
    report = metrics.MetricReport(
        chroma_sim=metrics.latent_melody_similarity(source_latent, edited_latent),
        cqt_pcc=metrics.latent_band_pcc(source_latent, edited_latent),
        align_source=metrics.alignment(edited_latent, protos[source_class]),
        align_target=metrics.alignment(edited_latent, protos[target_class]),
    )
    return {
        "clip_id": clip_id,
        "source_class": source_class,
        "target_class": target_class,
        "strategy": strategy,
        "n": n,
        "m": m,
        "chroma_sim": f"{report.chroma_sim:.6f}",
        "cqt_pcc": f"{report.cqt_pcc:.6f}",
        "align_source": f"{report.align_source:.6f}",
        "align_target": f"{report.align_target:.6f}",
        "fad": "",
    }


def cmd_edit(opts: dict) -> int:
    net = _load_net(opts["checkpoint"])
    corpus = _load_corpus(opts["corpus"])
    clip = _find_clip(corpus, opts["clip"])
    if opts["target_timbre"] is None and opts["target_style"] is None:
        raise UsageError("need --target-timbre and/or --target-style")
    target_timbre = opts["target_timbre"] or clip.spec.timbre
    target_style = opts["target_style"] or clip.spec.style
    if target_timbre not in TIMBRES:
        raise UsageError(f"unknown timbre {target_timbre!r}, choose from {TIMBRES}")
    if target_style not in STYLES:
        raise UsageError(f"unknown style {target_style!r}, choose from {STYLES}")

    config = EditConfig(
        step_count=opts["steps"],
        source_cfg=opts["source_cfg"],
        target_cfg=opts["target_cfg"],
        strategy=opts["strategy"],
        injection_steps=opts["injection_steps"],
        injection_block_start=opts["injection_block"],
        solver=opts["solver"],
        delta_t=opts["delta_t"],
    )
    config.validate_for(net)

    source_cond = _clip_conditioning(clip.spec)
    target_cond = Conditioning.for_labels(TIMBRES.index(target_timbre), STYLES.index(target_style))

    tokens = latents.flow_tokens(clip.latent)
    noise, cache, _ = invert_and_cache(net, tokens, source_cond, config)
    result = edit(net, noise, cache if config.injecting else None, target_cond, config)
    edited_latent = result.edited_latents()

    out_latent = Path(opts["out_latent"])
    out_latent.parent.mkdir(parents=True, exist_ok=True)
    latents.save_latent(out_latent, edited_latent)

    proto_corpus = _load_corpus(opts["prototype_corpus"]) if opts["prototype_corpus"] else corpus
    protos = metrics.class_prototypes((c.spec.timbre, c.latent) for c in proto_corpus.clips)
    row = _metric_row(
        clip.clip_id,
        clip.spec.timbre,
        target_timbre,
        config.strategy,
        config.injection_steps,
        config.injection_block_start,
        clip.latent,
        edited_latent,
        protos,
    )
    if opts["metrics_csv"]:
        _append_csv(opts["metrics_csv"], METRIC_CSV_HEADER, [row])
    print(f"edited {clip.clip_id} -> {out_latent}  chroma_sim {row['chroma_sim']} align_target {row['align_target']}")
    return EXIT_OK


def cmd_sweep(opts: dict) -> int:
    net = _load_net(opts["checkpoint"])
    corpus = _load_corpus(opts["corpus"])
    clips = corpus.clips[: opts["clip_limit"]] if opts["clip_limit"] else corpus.clips
    try:
        n_values = [int(v) for v in opts["n_grid"].split(",")]
        m_values = [int(v) for v in opts["m_grid"].split(",")]
    except ValueError as exc:
        raise UsageError(f"bad grid: {exc}") from exc

    proto_corpus = _load_corpus(opts["prototype_corpus"]) if opts["prototype_corpus"] else corpus
    protos = metrics.class_prototypes((c.spec.timbre, c.latent) for c in proto_corpus.clips)
    config = EditConfig(
        step_count=opts["steps"],
        source_cfg=opts["source_cfg"],
        target_cfg=opts["target_cfg"],
        solver=opts["solver"],
        delta_t=opts["delta_t"],
    )
    rows = sweep(net, clips, protos, n_values, m_values, strategy=opts["strategy"], config=config)
    out_rows = [
        {
            "n": r.injection_steps,
            "m": r.block_start,
            "fidelity": f"{r.fidelity:.6f}",
            "transferability": f"{r.transferability:.6f}",
            "clip_count": r.clip_count,
        }
        for r in rows
    ]
    _append_csv(opts["out"], SWEEP_CSV_HEADER, out_rows)
    print(f"wrote {len(out_rows)} sweep rows to {opts['out']}")
    return EXIT_OK


def cmd_eval(opts: dict) -> int:
    corpus_a = _load_corpus(opts["corpus_a"])
    corpus_b = _load_corpus(opts["corpus_b"])
    if len(corpus_a.clips) != len(corpus_b.clips):
        raise DataError(
            f"corpora differ in size: {len(corpus_a.clips)} vs {len(corpus_b.clips)} clips"
        )
    protos = metrics.class_prototypes((c.spec.timbre, c.latent) for c in corpus_a.clips)
    rows = []
    for a, b in zip(corpus_a.clips, corpus_b.clips):
        try:
            report = metrics.MetricReport(
                chroma_sim=metrics.chroma_similarity(a.signal, b.signal),
                cqt_pcc=metrics.cqt_pcc(a.signal, b.signal),
                align_source=metrics.alignment(b.latent, protos[a.spec.timbre]),
                align_target=metrics.alignment(b.latent, protos[b.spec.timbre]),
            )
        except MetricUndefinedError as exc:
            raise DataError(f"metric undefined for {a.clip_id}: {exc}") from exc
        rows.append(
            {
                "clip_id": a.clip_id,
                "source_class": a.spec.timbre,
                "target_class": b.spec.timbre,
                "strategy": "",
                "n": "",
                "m": "",
                "chroma_sim": f"{report.chroma_sim:.6f}",
                "cqt_pcc": f"{report.cqt_pcc:.6f}",
                "align_source": f"{report.align_source:.6f}",
                "align_target": f"{report.align_target:.6f}",
                "fad": "",
            }
        )
    emb_a = np.stack([metrics.embed_latent(c.latent) for c in corpus_a.clips])
    emb_b = np.stack([metrics.embed_latent(c.latent) for c in corpus_b.clips])
    summary = {key: "" for key in METRIC_CSV_HEADER}
    summary["clip_id"] = "__corpus__"
    if len(corpus_a.clips) >= emb_a.shape[1] + 1:
        fad = metrics.frechet_distance(metrics.gaussian_stats(emb_a), metrics.gaussian_stats(emb_b))
        summary["fad"] = f"{fad:.6f}"
        print(f"corpus FAD {fad:.6f}")
    else:
        print("corpus FAD omitted: fewer samples than embedding dimension + 1")
    rows.append(summary)
    _append_csv(opts["out"], METRIC_CSV_HEADER, rows)
    print(f"wrote {len(rows)} rows to {opts['out']}")
    return EXIT_OK


# --- argument wiring -----------------------------------------------------------


def _add_config_arg(sub):
    sub.add_argument("--config", default=None, help="JSON file with defaults for this subcommand")


def build_parser() -> tuple[_Parser, dict[str, dict]]:
    parser = _Parser(prog="toneflow", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    defaults: dict[str, dict] = {}

    sub = subs.add_parser("gen-corpus", help="render a synthetic corpus and manifest")
    defaults["gen-corpus"] = {"out": None, "count_per_class": 10, "seed": 0, "split": "train"}
    sub.add_argument("--out", required=True)
    sub.add_argument("--count-per-class", dest="count_per_class", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--split", choices=("train", "eval"), default=argparse.SUPPRESS)
    _add_config_arg(sub)

    sub = subs.add_parser("train", help="train the toy velocity field on a corpus")
    defaults["train"] = {
        "corpus": None,
        "out": None,
        "steps": 2000,
        "batch_size": 16,
        "learning_rate": 3e-4,
        "null_prob": 0.1,
        "seed": 0,
        "net_seed": 0,
        "model_dim": 64,
        "head_count": 4,
        "double_blocks": 2,
        "single_blocks": 4,
    }
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--steps", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--batch-size", dest="batch_size", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--learning-rate", dest="learning_rate", type=float, default=argparse.SUPPRESS)
    sub.add_argument("--null-prob", dest="null_prob", type=float, default=argparse.SUPPRESS)
    sub.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--net-seed", dest="net_seed", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--model-dim", dest="model_dim", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--head-count", dest="head_count", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--double-blocks", dest="double_blocks", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--single-blocks", dest="single_blocks", type=int, default=argparse.SUPPRESS)
    _add_config_arg(sub)

    sub = subs.add_parser("reconstruct", help="inversion round-trip errors for both steppers")
    defaults["reconstruct"] = {"checkpoint": None, "corpus": None, "clip": None, "steps": 25, "delta_t": 0.01}
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--clip", default=argparse.SUPPRESS)
    sub.add_argument("--steps", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--delta-t", dest="delta_t", type=float, default=argparse.SUPPRESS)
    _add_config_arg(sub)

    sub = subs.add_parser("edit", help="invert a clip and denoise it toward a target class")
    defaults["edit"] = {
        "checkpoint": None,
        "corpus": None,
        "clip": None,
        "target_timbre": None,
        "target_style": None,
        "strategy": "KV",
        "injection_steps": 5,
        "injection_block": 1,
        "steps": 25,
        "source_cfg": 1.0,
        "target_cfg": 20.0,
        "solver": "rf2",
        "delta_t": 0.01,
        "out_latent": None,
        "metrics_csv": None,
        "prototype_corpus": None,
    }
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--clip", default=argparse.SUPPRESS)
    sub.add_argument("--target-timbre", dest="target_timbre", default=argparse.SUPPRESS)
    sub.add_argument("--target-style", dest="target_style", default=argparse.SUPPRESS)
    sub.add_argument("--strategy", choices=("V", "K", "KV", "none"), default=argparse.SUPPRESS)
    sub.add_argument("--injection-steps", dest="injection_steps", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--injection-block", dest="injection_block", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--steps", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--source-cfg", dest="source_cfg", type=float, default=argparse.SUPPRESS)
    sub.add_argument("--target-cfg", dest="target_cfg", type=float, default=argparse.SUPPRESS)
    sub.add_argument("--solver", choices=("euler", "rf2"), default=argparse.SUPPRESS)
    sub.add_argument("--delta-t", dest="delta_t", type=float, default=argparse.SUPPRESS)
    sub.add_argument("--out-latent", dest="out_latent", required=True)
    sub.add_argument("--metrics-csv", dest="metrics_csv", default=argparse.SUPPRESS)
    sub.add_argument("--prototype-corpus", dest="prototype_corpus", default=argparse.SUPPRESS)
    _add_config_arg(sub)

    sub = subs.add_parser("sweep", help="injection-steps x block-start trade-off grid")
    defaults["sweep"] = {
        "checkpoint": None,
        "corpus": None,
        "n_grid": "0,2,5,10",
        "m_grid": "1,2,3,4",
        "strategy": "V",
        "steps": 25,
        "source_cfg": 1.0,
        "target_cfg": 20.0,
        "solver": "rf2",
        "delta_t": 0.01,
        "clip_limit": 0,
        "out": None,
        "prototype_corpus": None,
    }
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--n-grid", dest="n_grid", default=argparse.SUPPRESS)
    sub.add_argument("--m-grid", dest="m_grid", default=argparse.SUPPRESS)
    sub.add_argument("--strategy", choices=("V", "K", "KV", "none"), default=argparse.SUPPRESS)
    sub.add_argument("--steps", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--source-cfg", dest="source_cfg", type=float, default=argparse.SUPPRESS)
    sub.add_argument("--target-cfg", dest="target_cfg", type=float, default=argparse.SUPPRESS)
    sub.add_argument("--solver", choices=("euler", "rf2"), default=argparse.SUPPRESS)
    sub.add_argument("--delta-t", dest="delta_t", type=float, default=argparse.SUPPRESS)
    sub.add_argument("--clip-limit", dest="clip_limit", type=int, default=argparse.SUPPRESS)
    sub.add_argument("--out", required=True)
    sub.add_argument("--prototype-corpus", dest="prototype_corpus", default=argparse.SUPPRESS)
    _add_config_arg(sub)

    sub = subs.add_parser("eval", help="aligned corpus-vs-corpus metric table with FAD summary")
    defaults["eval"] = {"corpus_a": None, "corpus_b": None, "out": None}
    sub.add_argument("--corpus-a", dest="corpus_a", required=True)
    sub.add_argument("--corpus-b", dest="corpus_b", required=True)
    sub.add_argument("--out", required=True)
    _add_config_arg(sub)

    return parser, defaults


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "edit": cmd_edit,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser, defaults = build_parser()
    try:
        args = parser.parse_args(argv)
        command = args.command
        opts = vars(args)
        opts.pop("command")
        merged = _merge_config(defaults[command], argparse.Namespace(**opts))
        return COMMANDS[command](merged)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, WavFormatError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericsError, TrainingDivergedError, CacheMissError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
