"""Command-line entry point ``lac``.

Every subcommand accepts ``--config``, ``--seed`` and ``--out`` (also accepted
before the subcommand). Subcommand flags override the matching config keys,
and the fully resolved config is written next to the outputs as
``config.yaml``. If a command fails, the files it created are removed.
"""
from __future__ import annotations

import contextlib
import csv
import functools
import json
import os
import shutil
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import torch

from .config import ConfigError, RunConfig, dump_config, load_config
from .skeleton import DatasetManifest, read_manifest, read_sequence, write_sequence

KINDS = ("retarget", "trimmed", "untrimmed")
METRICS = ("frame-map", "event-map", "retarget-mse")


def _set_threads() -> None:
    n = os.environ.get("LAC_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise click.UsageError(f"LAC_THREADS must be an integer, got {n!r}") from None


@contextlib.contextmanager
def _cleanup_on_failure(*paths: Path):
    """Remove files and directories created under ``paths`` if the body raises."""
    before = {}
    for p in paths:
        before[p] = set(p.rglob("*")) | {p} if p.exists() else set()
    try:
        yield
    except BaseException:
        for p in paths:
            if not p.exists():
                continue
            created = ({p} | set(p.rglob("*")) if p.is_dir() else {p}) - before[p]
            for q in sorted(created, key=lambda q: len(q.parts), reverse=True):
                if q.is_dir():
                    shutil.rmtree(q, ignore_errors=True)
                elif q.exists():
                    q.unlink()
        raise


def _settings(ctx: click.Context, config: str | None, seed: int | None, out: str | None) -> tuple[RunConfig, Path]:
    obj = ctx.find_root().obj or {}
    config = config or obj.get("config")
    seed = seed if seed is not None else obj.get("seed")
    out = out or obj.get("out")
    try:
        cfg = load_config(config)
    except (ConfigError, OSError) as exc:
        raise click.UsageError(str(exc)) from None
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = out
    return cfg.resolved(), Path(cfg.out_dir)


def _common(fn):
    """Shared ``--config/--seed/--out`` options; the wrapped command receives (cfg, out, ...)."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="YAML run config (strict keys).")
    @click.option("--seed", type=int, default=None, help="Run seed; overrides every stage seed.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
    @click.pass_context
    @functools.wraps(fn)
    def wrapper(ctx, config_path, seed, out_dir, **kwargs):
        _set_threads()
        cfg, out = _settings(ctx, config_path, seed, out_dir)
        try:
            return fn(cfg, out, **kwargs)
        except (ConfigError, ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _override(obj, **values):
    """dataclasses.replace with None meaning "keep the config value"."""
    return replace(obj, **{k: v for k, v in values.items() if v is not None})


def _manifest(path: str) -> DatasetManifest:
    return read_manifest(path)


def _echo_json(doc: dict) -> None:
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(dir_okay=False), default=None, help="YAML run config (strict keys).")
@click.option("--seed", type=int, default=None, help="Run seed; overrides every stage seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.pass_context
def main(ctx, config, seed, out):
    """Skeleton motion retargeting, contrastive pretraining and temporal action segmentation."""
    ctx.obj = {"config": config, "seed": seed, "out": out}


# ---------------------------------------------------------------- data

@main.command("gen-data")
@click.option("--kind", type=click.Choice(KINDS), required=True)
@_common
def gen_data(cfg: RunConfig, out: Path, kind: str):
    """Generate a synthetic dataset and its manifest."""
    from .synth import build_retarget_dataset, build_trimmed_dataset, build_untrimmed_dataset

    builders = {"retarget": (build_retarget_dataset, cfg.data.retarget),
                "trimmed": (build_trimmed_dataset, cfg.data.trimmed),
                "untrimmed": (build_untrimmed_dataset, cfg.data.untrimmed)}
    build, data_cfg = builders[kind]
    with _cleanup_on_failure(out):
        manifest = build(data_cfg, out)
        dump_config(cfg, out / "config.yaml")
    click.echo(f"wrote {len(manifest.entries)} sequences and {out / 'manifest.jsonl'}")


# ---------------------------------------------------------------- generator

@main.command("train-retarget")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Retarget manifest.jsonl.")
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--J", "J", type=int, default=None, help="Motion directions in the dictionary.")
@click.option("--K", "K", type=int, default=None, help="Static directions in the dictionary.")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
@_common
def train_retarget_cmd(cfg, out, data_path, steps, batch_size, learning_rate, J, K, resume):
    """Train the generator by cross-character retargeting."""
    from .retarget import RetargetData, evaluate_retarget, train_retarget

    cfg.generator.train = _override(cfg.generator.train, steps=steps, batch_size=batch_size,
                                    learning_rate=learning_rate)
    cfg.generator.model = _override(cfg.generator.model, J=J, K=K)
    manifest = _manifest(data_path)
    with _cleanup_on_failure(out):
        data = RetargetData(manifest)
        ckpt, history = train_retarget(manifest, cfg.generator.train, out, cfg.generator.model,
                                       resume_from=resume, data=data)
        dump_config(cfg, out / "config.yaml")
        report = {}
        if len(data.indices("test")):
            from .generator import load_generator

            model, _ = load_generator(ckpt)
            model.eval()
            report = evaluate_retarget(data, model, max_pairs=cfg.eval.max_pairs, seed=cfg.seed)
            (out / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    click.echo(f"wrote {ckpt}")
    if history:
        click.echo(f"final L_total {history[-1]['L_total']:.6g}")
    if report:
        click.echo(f"test retarget MSE {report['mse']:.6g} (copy-source baseline {report['baseline_mse']:.6g})")


@main.command("compose")
@click.option("--a", "seq_a", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--b", "seq_b", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--static", "static", type=click.Choice(["a", "b"]), default="a", show_default=True)
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_file", type=click.Path(dir_okay=False), required=True, help="Output sequence JSON.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
def compose_cmd(ctx, seq_a, seq_b, static, ckpt, out_file, config_path, seed):
    """Put the mean motion of A and B on the static of A or B."""
    from .generator import compose, load_generator

    _set_threads()
    _settings(ctx, config_path, seed, None)
    out = Path(out_file)
    try:
        model, _ = load_generator(ckpt)
        model.eval()
        a, b = read_sequence(seq_a), read_sequence(seq_b)
        model.check_length(a.T)
        result = compose([a, b], 0 if static == "a" else 1, model)
        with _cleanup_on_failure(out):
            write_sequence(result, out)
    except (ValueError, RuntimeError, IndexError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"wrote {out}")


# ---------------------------------------------------------------- visual encoder

@main.command("pretrain")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Trimmed manifest.jsonl (equal-length clips).")
@click.option("--generator", "generator_ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--sample-rate", type=int, default=None)
@click.option("--motions", "num_motions", type=int, default=None)
@click.option("--frame-level/--sequence-only", default=None)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
@_common
def pretrain_cmd(cfg, out, data_path, generator_ckpt, steps, sample_rate, num_motions, frame_level, resume):
    """Contrastive pretraining of the visual encoder."""
    from .contrastive import pretrain

    cfg.contrastive = _override(cfg.contrastive, steps=steps, sample_rate=sample_rate,
                                num_motions=num_motions, frame_level=frame_level)
    with _cleanup_on_failure(out):
        ckpt, history = pretrain(_manifest(data_path), generator_ckpt, cfg.contrastive, out, cfg.encoder,
                                 resume_from=resume)
        dump_config(cfg, out / "config.yaml")
    click.echo(f"wrote {ckpt}")
    if history:
        click.echo(f"final L_total {history[-1]['L_total']:.6g}")


@main.command("finetune")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Untrimmed manifest.jsonl.")
@click.option("--init", "init_ckpt", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Encoder checkpoint; random initialization when omitted.")
@click.option("--steps", type=int, default=None)
@click.option("--label-fraction", type=float, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
@_common
def finetune_cmd(cfg, out, data_path, init_ckpt, steps, label_fraction, learning_rate, resume):
    """Fine-tune the encoder end to end on sliding windows; writes test predictions."""
    from .encoder import load_encoder
    from .segmentation import evaluate_segmentation, finetune

    cfg.segmentation.finetune = _override(cfg.segmentation.finetune, steps=steps, label_fraction=label_fraction,
                                          learning_rate=learning_rate)
    manifest = _manifest(data_path)
    with _cleanup_on_failure(out):
        ckpt, _ = finetune(manifest, init_ckpt, cfg.segmentation.window, cfg.segmentation.finetune, out,
                           cfg.encoder, resume_from=resume)
        dump_config(cfg, out / "config.yaml")
        report = None
        if manifest.split("test"):
            model, _ = load_encoder(ckpt)
            model.eval()
            report = evaluate_segmentation(manifest, model, cfg.segmentation.window,
                                           predictions_path=out / "predictions.json")
            (out / "eval_report.json").write_text(json.dumps(
                {"frame_mAP": report["mAP"], "per_class": report["per_class"], "skipped": report["skipped"]},
                indent=2, sort_keys=True))
    click.echo(f"wrote {ckpt}")
    if report is not None:
        click.echo(f"test frame mAP {report['mAP']:.4f}")


@main.command("predict")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True)
@_common
def predict_cmd(cfg, out, data_path, ckpt, split):
    """Sliding-window predictions for every video of a split."""
    from .encoder import load_encoder
    from .segmentation import predict_untrimmed

    manifest = _manifest(data_path)
    model, _ = load_encoder(ckpt)
    model.eval()
    path = out / "predictions.json"
    with _cleanup_on_failure(out):
        out.mkdir(parents=True, exist_ok=True)
        dump = [predict_untrimmed(manifest.load(e), model, cfg.segmentation.window)
                .to_dict(e.extra.get("video_id", e.sequence_path)) for e in manifest.split(split)]
        path.write_text(json.dumps(dump))
        dump_config(cfg, out / "config.yaml")
    click.echo(f"wrote {path}")


@main.command("probe")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Frozen encoder checkpoint; a random encoder when omitted.")
@click.option("--steps", type=int, default=None)
@click.option("--label-fraction", type=float, default=None)
@_common
def probe_cmd(cfg, out, data_path, ckpt, steps, label_fraction):
    """Linear evaluation: train only a classifier on frozen features."""
    from .segmentation import linear_probe

    cfg.segmentation.probe = _override(cfg.segmentation.probe, steps=steps, label_fraction=label_fraction)
    with _cleanup_on_failure(out):
        result = linear_probe(_manifest(data_path), ckpt, cfg.segmentation.probe, cfg.encoder)
        report = {k: v for k, v in result.items() if k != "classifier"}
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        dump_config(cfg, out / "config.yaml")
    _echo_json(report)


# ---------------------------------------------------------------- evaluation

def _load_json(path: str):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None


def _as_list(doc):
    return doc if isinstance(doc, list) else [doc]


def _segment_pairs(pred_path: str, gt_path: str) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair prediction score matrices with label matrices.

    ``gt`` is a labels JSON (or a list of them, in prediction order) or an untrimmed
    manifest, in which case videos are matched by ``video_id``.
    """
    from .synth import load_annotation

    preds = _as_list(_load_json(pred_path))
    if gt_path.endswith(".jsonl"):
        manifest = read_manifest(gt_path)
        by_id = {e.extra.get("video_id"): e for e in manifest.entries}
        missing = [p.get("video_id") for p in preds if p.get("video_id") not in by_id]
        if missing:
            raise ValueError(f"no ground truth for video {missing[0]!r}")
        labels = [load_annotation(manifest, by_id[p["video_id"]]).labels for p in preds]
    else:
        gts = _as_list(_load_json(gt_path))
        if len(gts) != len(preds):
            raise ValueError(f"{len(preds)} predictions but {len(gts)} ground-truth entries")
        labels = [np.asarray(g["labels"] if isinstance(g, dict) else g) for g in gts]
    pairs = []
    for p, y in zip(preds, labels):
        s = np.asarray(p["scores"] if isinstance(p, dict) else p, dtype=np.float64)
        if s.shape != y.shape:
            raise ValueError(f"prediction shape {s.shape} does not match labels {y.shape}")
        pairs.append((s, y))
    return pairs


def _shift(events, offset):
    from .metrics import EventSegment

    return [EventSegment(e.class_id, e.start_frame + offset, e.end_frame + offset, e.score) for e in events]


@main.command("eval")
@click.option("--pred", "pred_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--gt", "gt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--metric", type=click.Choice(METRICS), default=None)
@click.option("--iou", "iou", type=float, multiple=True, help="IoU threshold(s) for event-map.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the evaluation report JSON here.")
@_common
def eval_cmd(cfg, out, pred_path, gt_path, metric, iou, report_path):
    """Score predictions: frame mAP, event mAP at IoU thresholds, or retarget MSE."""
    from .metrics import event_map, extract_events, frame_map, retarget_mse

    metric = metric or cfg.eval.metric
    if metric not in METRICS:
        raise click.UsageError(f"unknown metric {metric!r}")
    report: dict = {"metric": metric, "pred": pred_path, "gt": gt_path}
    if metric == "retarget-mse":
        report["mse"] = retarget_mse(read_sequence(pred_path), read_sequence(gt_path))
        click.echo(f"retarget MSE {report['mse']:.6g}")
    else:
        pairs = _segment_pairs(pred_path, gt_path)
        if metric == "frame-map":
            r = frame_map(np.concatenate([s for s, _ in pairs]), np.concatenate([y for _, y in pairs]))
            report.update(mAP=r["mAP"], per_class=r["per_class"], skipped=r["skipped"])
            click.echo(f"frame mAP {r['mAP']:.4f}")
        else:
            thresholds = list(iou) or list(cfg.eval.iou_thresholds)
            pred_ev, gt_ev, offset = [], [], 0
            for s, y in pairs:
                pred_ev += _shift(extract_events(s, cfg.eval.event_threshold), offset)
                gt_ev += _shift(extract_events(y.astype(np.float64), 0.5), offset)
                offset += len(s)
            report["event_threshold"] = cfg.eval.event_threshold
            report["results"] = {}
            for th in thresholds:
                r = event_map(pred_ev, gt_ev, th)
                report["results"][str(th)] = {"mAP": r["mAP"], "per_class": r["per_class"]}
                click.echo(f"event mAP@{th:g} {r['mAP']:.4f}")
    report["config"] = {"eval": {"metric": metric, "iou_thresholds": list(iou) or cfg.eval.iou_thresholds,
                                 "event_threshold": cfg.eval.event_threshold}}
    if report_path is not None:
        path = Path(report_path)
        with _cleanup_on_failure(path):
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(report, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------- ablations

ABLATIONS = ("jk", "motions", "sample-rate")


@main.command("ablate")
@click.option("--sweep", type=click.Choice(ABLATIONS), required=True)
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Retarget manifest for jk; trimmed manifest for motions and sample-rate.")
@click.option("--untrimmed", "untrimmed_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Untrimmed manifest for the downstream score of motions and sample-rate sweeps.")
@click.option("--generator", "generator_ckpt", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--values", default=None, help="Comma-separated values; J:K pairs for jk (e.g. 128:32,96:64).")
@_common
def ablate_cmd(cfg, out, sweep, data_path, untrimmed_path, generator_ckpt, values):
    """Parameter sweeps written as ablation.csv (configuration, value, metric, score)."""
    rows = []
    with _cleanup_on_failure(out):
        out.mkdir(parents=True, exist_ok=True)
        if sweep == "jk":
            from .generator import load_generator
            from .retarget import RetargetData, evaluate_retarget, train_retarget

            c_out = cfg.generator.model.c_out
            pairs = ([tuple(int(x) for x in v.split(":")) for v in values.split(",")] if values
                     else [(c_out - k, k) for k in (16, 32, 64)])
            manifest = _manifest(data_path)
            data = RetargetData(manifest)
            for J, K in pairs:
                gcfg = replace(cfg.generator.model, J=J, K=K)
                ckpt, _ = train_retarget(manifest, cfg.generator.train, out / f"J{J}_K{K}", gcfg, data=data)
                model, _ = load_generator(ckpt)
                model.eval()
                r = evaluate_retarget(data, model, max_pairs=cfg.eval.max_pairs, seed=cfg.seed)
                rows.append({"configuration": "J:K", "value": f"{J}:{K}", "metric": "retarget_mse",
                             "score": r["mse"]})
        else:
            from .contrastive import pretrain
            from .encoder import load_encoder
            from .segmentation import evaluate_segmentation, finetune

            if generator_ckpt is None or untrimmed_path is None:
                raise click.UsageError(f"--sweep {sweep} needs --generator and --untrimmed")
            key = "num_motions" if sweep == "motions" else "sample_rate"
            vals = [int(v) for v in values.split(",")] if values else ([2, 3] if sweep == "motions" else [2, 4, 8])
            trimmed, untrimmed = _manifest(data_path), _manifest(untrimmed_path)
            for v in vals:
                run = out / f"{key}_{v}"
                enc, _ = pretrain(trimmed, generator_ckpt, replace(cfg.contrastive, **{key: v}), run / "pretrain",
                                  cfg.encoder)
                ft, _ = finetune(untrimmed, enc, cfg.segmentation.window, cfg.segmentation.finetune,
                                 run / "finetune", cfg.encoder)
                model, _ = load_encoder(ft)
                model.eval()
                r = evaluate_segmentation(untrimmed, model, cfg.segmentation.window)
                rows.append({"configuration": key, "value": v, "metric": "frame_mAP", "score": r["mAP"]})
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["configuration", "value", "metric", "score"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        dump_config(cfg, out / "config.yaml")
    for r in rows:
        click.echo(f"{r['configuration']}={r['value']}  {r['metric']} {r['score']:.6g}")


# ---------------------------------------------------------------- rendering

@main.command("render")
@click.option("--seq", "seq_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="Directory for --format png, file path for --format gif.")
@click.option("--format", "fmt", type=click.Choice(["png", "gif"]), default="gif", show_default=True)
@click.option("--size", type=int, default=256, show_default=True)
def render_cmd(seq_path, out_path, fmt, size):
    """Draw a sequence as stick figures."""
    from .render import render_sequence

    out = Path(out_path)
    try:
        seq = read_sequence(seq_path)
        with _cleanup_on_failure(out):
            paths = render_sequence(seq, out, mode=fmt, size=size)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"wrote {len(paths)} file(s) to {out}")


if __name__ == "__main__":
    main()
