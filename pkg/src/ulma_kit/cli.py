"""Batch command-line front end.

Subcommands cover the full pipeline: per-clip analysis, MFCC feature
dumps, two-stage unit clustering, masked pretraining, classification and
detection fine-tuning, reward-model training, harf curve synthesis,
embedding export, and envelope plots.  Every stochastic subcommand
requires --seed, and identical invocations produce byte-identical
artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, segmentation
from .artifacts import (
    ARTIFACT_VERSION,
    load_checkpoint,
    load_codebook,
    load_features,
    save_checkpoint,
    save_codebook,
    save_features,
    save_head,
    save_reward_head,
)
from .errors import (
    EmptyMaskError,
    MalformedLineError,
    MissingPathError,
    NoIsmFoundError,
    UlmaKitError,
)
from .harf_synth import Anchor, chord_length, fit_sag, parabola_through, render_harf
from .model import (
    FRAME_RATE,
    EncoderConfig,
    conv_output_length,
    export_embeddings,
    finetune_classify_step,
    finetune_detect_step,
    classify_loss,
    detect_loss,
    init_head,
    init_model,
    pooled_forward,
    pretrain_step,
)
from .plotting import write_csv, write_curve_svg, write_envelope_svg
from .reward import PreferencePair, init_reward_model, train_reward
from .signal import AudioClip, FeatureConfig, envelope, load_wav, mfcc39
from .units import assign, kmeans_fit, refit_from_hidden

log = logging.getLogger("ulma")

KNOWN_FIELDS = {"path", "label", "events", "context", "prefer_over"}
CONTEXT_VALUES = {"positive", "negative", "neutral"}


@dataclass
class ManifestEvent:
    onset_s: float
    offset_s: float
    tags: list[str] = field(default_factory=list)


@dataclass
class ManifestEntry:
    path: str
    label: str | None = None
    events: list[ManifestEvent] = field(default_factory=list)
    context: str | None = None
    prefer_over: str | None = None


def parse_manifest(path) -> list[ManifestEntry]:
    """Parse a JSON Lines manifest, one entry per line, order preserved.

    Unknown fields are ignored with a warning; a line that is not a JSON
    object or has inconsistent events raises MalformedLineError with its
    line number, and a line without "path" raises MissingPathError.
    """
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(line_no, str(exc)) from exc
            if not isinstance(obj, dict):
                raise MalformedLineError(line_no, "not a JSON object")
            unknown = set(obj) - KNOWN_FIELDS
            if unknown:
                log.warning("manifest line %d: ignoring fields %s",
                            line_no, sorted(unknown))
            if "path" not in obj or not obj["path"]:
                raise MissingPathError(line_no)
            events = []
            for ev in obj.get("events") or []:
                try:
                    event = ManifestEvent(
                        onset_s=float(ev["onset_s"]),
                        offset_s=float(ev["offset_s"]),
                        tags=[str(t) for t in ev.get("tags", [])],
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise MalformedLineError(line_no, f"bad event: {exc}") from exc
                if not event.onset_s < event.offset_s:
                    raise MalformedLineError(
                        line_no, "event onset must precede offset"
                    )
                events.append(event)
            context = obj.get("context")
            if context is not None and context not in CONTEXT_VALUES:
                raise MalformedLineError(line_no, f"bad context {context!r}")
            entries.append(ManifestEntry(
                path=str(obj["path"]),
                label=obj.get("label"),
                events=events,
                context=context,
                prefer_over=obj.get("prefer_over"),
            ))
    return entries


def _clip_stem(index: int, path: str) -> str:
    return f"{index:03d}_{Path(path).stem}"


def _write_jsonl(path, records) -> None:
    lines = [json.dumps(rec, sort_keys=True) for rec in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_clips(entries) -> list[AudioClip]:
    return [load_wav(e.path) for e in entries]


def _common_rate(clips) -> int:
    rates = {c.sample_rate for c in clips}
    if len(rates) != 1:
        raise UlmaKitError(f"mixed sample rates in corpus: {sorted(rates)}")
    return rates.pop()


# --- analyze ---

def cmd_analyze(args) -> int:
    entries = parse_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ulm_cfg = segmentation.UlmConfig()

    records = [{"version": ARTIFACT_VERSION, "kind": "analysis-report"}]
    ratio_context_pairs = []
    for i, entry in enumerate(entries):
        record = {"path": entry.path}
        if entry.context is not None:
            record["context"] = entry.context
        try:
            clip = load_wav(entry.path)
            env = envelope(clip)
            stem = _clip_stem(i, entry.path)
            write_csv(out_dir / f"env_{stem}.csv", ["t_s", "rms"],
                      [(j * env.hop_s, v) for j, v in enumerate(env.values)])
            if args.svg:
                write_envelope_svg(out_dir / f"env_{stem}.svg", env,
                                   segmentation.detect_bursts(env))
            pattern = segmentation.decompose(clip)
            reaction = segmentation.classify_reaction(
                pattern.height_ratio, hi=args.hi, lo=args.lo
            )
            score = segmentation.ulm_score(pattern, ulm_cfg, clip.duration_s)
            record.update({
                "ism": dataclasses.asdict(pattern.ism),
                "fil": dataclasses.asdict(pattern.fil) if pattern.fil else None,
                "chirps_s": pattern.chirps_s,
                "harf_level": pattern.harf_level,
                "height_ratio": pattern.height_ratio,
                "reaction": reaction.value,
                "ulm_score": score,
            })
            if entry.context in ("positive", "negative") and \
                    pattern.height_ratio is not None:
                ratio_context_pairs.append(
                    (pattern.height_ratio, entry.context)
                )
        except UlmaKitError as exc:
            log.info("clip %s failed: %s", entry.path, exc)
            record["error"] = {"type": type(exc).__name__, "message": str(exc)}
        records.append(record)

    labels = {label for _, label in ratio_context_pairs}
    if labels == {"positive", "negative"}:
        report = segmentation.correlate_height_reactions(ratio_context_pairs)
        records.append({"correlation": dataclasses.asdict(report)})
    else:
        records.append({"correlation": "skipped"})
    _write_jsonl(out_dir / "report.jsonl", records)
    return 0


# --- pipeline subcommands ---

def cmd_features(args) -> int:
    entries = parse_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in entries:
        clip = load_wav(entry.path)
        cfg = FeatureConfig.for_rate(clip.sample_rate)
        rows.append((clip.source_id, mfcc39(clip, cfg)))
    save_features(out_dir / "features.json", rows)
    return 0


def cmd_cluster(args) -> int:
    entries = load_features(args.features)
    stacked = np.vstack([fm.values for _, fm in entries])
    cb = kmeans_fit(stacked, k=args.k, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_codebook(out_dir / "codebook.json", cb)
    return 0


def _aligned_unit_labels(clip, codebook, n_frames) -> np.ndarray:
    """Frame labels for the conv output: assign MFCC frames to units,
    then map each conv frame to the nearest MFCC frame by start time."""
    cfg = FeatureConfig.for_rate(clip.sample_rate)
    feats = mfcc39(clip, cfg)
    labels = assign(codebook, feats.values)
    idx = np.minimum(
        np.round((np.arange(n_frames) / FRAME_RATE) / feats.hop_s).astype(int),
        labels.size - 1,
    )
    return labels[idx]


MAX_EMPTY_MASK_RETRIES = 1000


def cmd_pretrain(args) -> int:
    entries = parse_manifest(args.manifest)
    clips = _load_clips(entries)
    if not clips:
        raise UlmaKitError("manifest has no clips")
    rate = _common_rate(clips)
    codebook = load_codebook(args.codebook)

    if args.init_checkpoint:
        model = load_checkpoint(args.init_checkpoint)
        if model.config.sample_rate != rate:
            raise UlmaKitError("checkpoint rate differs from corpus rate")
    else:
        cfg = EncoderConfig(sample_rate=rate, k_units=codebook.k)
        model = init_model(cfg, seed=args.seed)
    if model.config.k_units != codebook.k:
        raise UlmaKitError(
            f"codebook k={codebook.k} != model k_units={model.config.k_units}"
        )

    if codebook.stage == 2:
        # Second-iteration targets: assign each clip's hidden features
        # (same frame rate as the conv output, so no realignment) using
        # the model that produced them.
        if not args.init_checkpoint:
            raise UlmaKitError("a stage-2 codebook requires --init-checkpoint")
        from .model import hidden_states

        labels = [
            assign(codebook, hidden_states(model, c)[args.layer])
            for c in clips
        ]
    else:
        labels = [
            _aligned_unit_labels(
                c, codebook, conv_output_length(model.config, c.samples.size)
            )
            for c in clips
        ]

    rng = np.random.default_rng(args.seed)
    losses = []
    retries = 0
    while len(losses) < args.steps:
        i = len(losses) % len(clips)
        try:
            loss = pretrain_step(model, clips[i], labels[i], rng,
                                 args.step_size)
        except EmptyMaskError:
            retries += 1
            if retries > MAX_EMPTY_MASK_RETRIES:
                raise UlmaKitError("mask sampling kept selecting nothing")
            continue
        retries = 0
        losses.append(loss)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.json", model)
    _write_jsonl(out_dir / "pretrain_report.jsonl", [
        {"version": ARTIFACT_VERSION, "kind": "pretrain-report"},
        {
            "steps": len(losses),
            "initial_loss": float(np.mean(losses[:10])),
            "final_loss": float(np.mean(losses[-10:])),
            "losses": losses,
        },
    ])
    return 0


def cmd_refit_units(args) -> int:
    entries = parse_manifest(args.manifest)
    clips = _load_clips(entries)
    model = load_checkpoint(args.checkpoint)
    cb = refit_from_hidden(model, clips, layer=args.layer, k=args.k,
                           seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_codebook(out_dir / "codebook.json", cb)
    return 0


def cmd_finetune_classify(args) -> int:
    entries = parse_manifest(args.manifest)
    if any(e.label is None for e in entries):
        raise UlmaKitError("every manifest entry needs a label")
    clips = _load_clips(entries)
    classes = sorted({e.label for e in entries})
    class_index = {label: i for i, label in enumerate(classes)}
    targets = [class_index[e.label] for e in entries]

    model = load_checkpoint(args.checkpoint)
    head = init_head("classify", model.config.d_model, len(classes),
                     seed=args.seed)
    for _ in range(args.epochs):
        for clip, target in zip(clips, targets):
            finetune_classify_step(model, head, clip, target, args.step_size)

    correct = 0
    final_losses = []
    for clip, target in zip(clips, targets):
        loss, _, _ = classify_loss(model, head, clip, target)
        final_losses.append(loss)
        pooled, _ = pooled_forward(model, clip)
        correct += int(np.argmax(pooled @ head.weights + head.bias) == target)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint_finetuned.json", model)
    save_head(out_dir / "head.json", head, classes)
    _write_jsonl(out_dir / "finetune_report.jsonl", [
        {"version": ARTIFACT_VERSION, "kind": "finetune-classify-report"},
        {
            "classes": classes,
            "epochs": args.epochs,
            "final_loss": float(np.mean(final_losses)),
            "train_accuracy": correct / len(clips),
        },
    ])
    return 0


def cmd_finetune_detect(args) -> int:
    entries = parse_manifest(args.manifest)
    clips = _load_clips(entries)
    tags = sorted({t for e in entries for ev in e.events for t in ev.tags})
    if not tags:
        raise UlmaKitError("no event tags anywhere in the manifest")
    tag_index = {t: i for i, t in enumerate(tags)}
    targets = []
    for entry in entries:
        vec = np.zeros(len(tags))
        for ev in entry.events:
            for t in ev.tags:
                vec[tag_index[t]] = 1.0
        targets.append(vec)

    model = load_checkpoint(args.checkpoint)
    head = init_head("detect", model.config.d_model, len(tags), seed=args.seed)
    for _ in range(args.epochs):
        for clip, target in zip(clips, targets):
            finetune_detect_step(model, head, clip, target, args.step_size)

    final_losses = [detect_loss(model, head, c, t)[0]
                    for c, t in zip(clips, targets)]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint_finetuned.json", model)
    save_head(out_dir / "head.json", head, tags)
    _write_jsonl(out_dir / "detect_report.jsonl", [
        {"version": ARTIFACT_VERSION, "kind": "finetune-detect-report"},
        {
            "tags": tags,
            "epochs": args.epochs,
            "final_mean_bce": float(np.mean(final_losses)),
        },
    ])
    return 0


def cmd_reward_train(args) -> int:
    entries = parse_manifest(args.manifest)
    cache: dict[str, AudioClip] = {}

    def clip_for(path):
        if path not in cache:
            cache[path] = load_wav(path)
        return cache[path]

    pairs = [
        PreferencePair(chosen=clip_for(e.path), rejected=clip_for(e.prefer_over))
        for e in entries if e.prefer_over
    ]
    if not pairs:
        raise UlmaKitError("no prefer_over pairs in the manifest")

    model = load_checkpoint(args.checkpoint)
    rm = init_reward_model(model, seed=args.seed)
    report = train_reward(rm, pairs, epochs=args.epochs,
                          step_size=args.step_size, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_reward_head(out_dir / "reward.json", rm.weights, rm.bias, {
        "final_loss": report.final_loss,
        "pairwise_accuracy": report.pairwise_accuracy,
        "epochs": args.epochs,
    })
    return 0


def cmd_synth_harf(args) -> int:
    entries = parse_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [{"version": ARTIFACT_VERSION, "kind": "harf-report"}]
    for i, entry in enumerate(entries):
        record = {"path": entry.path}
        try:
            clip = load_wav(entry.path)
            pattern = segmentation.decompose(clip)
            if pattern.fil is None:
                raise NoIsmFoundError(
                    f"{entry.path}: no fil burst to anchor the harf"
                )
            a1 = Anchor(pattern.ism.offset_s, pattern.ism.peak)
            a2 = Anchor(pattern.fil.onset_s, pattern.fil.peak)
            target = args.length_factor * chord_length(a1, a2)
            fit = fit_sag(a1, a2, target)
            parabola = parabola_through(a1, a2, fit.sag)
            points = render_harf(parabola, args.samples)
            stem = _clip_stem(i, entry.path)
            write_csv(out_dir / f"harf_{stem}.csv", ["t_s", "height"], points)
            if args.svg:
                write_curve_svg(out_dir / f"harf_{stem}.svg", points)
            record.update({
                "sag": fit.sag,
                "iterations": fit.iterations,
                "residual": fit.residual,
                "target_length": target,
            })
        except UlmaKitError as exc:
            record["error"] = {"type": type(exc).__name__, "message": str(exc)}
        records.append(record)
    _write_jsonl(out_dir / "harf_report.jsonl", records)
    return 0


def cmd_export_embeddings(args) -> int:
    entries = parse_manifest(args.manifest)
    clips = _load_clips(entries)
    model = load_checkpoint(args.checkpoint)
    rows = export_embeddings(model, clips, layer=args.layer)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dim = model.config.d_model
    header = ["clip_id", "frame"] + [f"h{j}" for j in range(dim)]
    write_csv(out_dir / "embeddings.csv", header,
              [(clip_id, float(frame), *vec)
               for clip_id, frame, *vec in rows])
    return 0


def cmd_plot(args) -> int:
    entries = parse_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, entry in enumerate(entries):
        clip = load_wav(entry.path)
        env = envelope(clip)
        bursts = segmentation.detect_bursts(env)
        stem = _clip_stem(i, entry.path)
        write_csv(out_dir / f"env_{stem}.csv", ["t_s", "rms"],
                  [(j * env.hop_s, v) for j, v in enumerate(env.values)])
        if args.svg:
            write_envelope_svg(out_dir / f"env_{stem}.svg", env, bursts)
    return 0


# --- argument parsing ---

def _add_common(sub, *, manifest=True, out=True, seed=False):
    if manifest:
        sub.add_argument("--manifest", required=True, help="JSON Lines manifest")
    if out:
        sub.add_argument("--out", required=True, help="output directory")
    if seed:
        sub.add_argument("--seed", type=int, required=True,
                         help="RNG seed (mandatory for stochastic commands)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ulma",
        description="Bioacoustic analysis toolkit: vocal-pattern "
                    "decomposition, unit discovery, masked pretraining, "
                    "fine-tuning, and reward modelling.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="decompose clips and correlate "
                                       "height ratios with context labels")
    _add_common(p)
    p.add_argument("--hi", type=float, default=segmentation.DEFAULT_REACTION_HI)
    p.add_argument("--lo", type=float, default=segmentation.DEFAULT_REACTION_LO)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("features", help="dump 39-dim MFCC features")
    _add_common(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("cluster", help="fit a stage-1 codebook on MFCC frames")
    _add_common(p, manifest=False, seed=True)
    p.add_argument("--features", required=True, help="features.json path")
    p.add_argument("--k", type=int, default=16)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("pretrain", help="masked-prediction pretraining")
    _add_common(p, seed=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--step-size", type=float, default=0.5)
    p.add_argument("--init-checkpoint", default=None,
                   help="continue from an existing checkpoint (stage 2)")
    p.add_argument("--layer", type=int, default=1,
                   help="hidden layer for stage-2 label assignment")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("refit-units", help="stage-2 codebook from hidden "
                                           "features")
    _add_common(p, seed=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--k", type=int, default=16)
    p.set_defaults(func=cmd_refit_units)

    p = sub.add_parser("finetune-classify", help="clip classification head")
    _add_common(p, seed=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--step-size", type=float, default=0.05)
    p.set_defaults(func=cmd_finetune_classify)

    p = sub.add_parser("finetune-detect", help="multi-label detection head")
    _add_common(p, seed=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--step-size", type=float, default=0.3)
    p.set_defaults(func=cmd_finetune_detect)

    p = sub.add_parser("reward-train", help="pairwise-preference reward head")
    _add_common(p, seed=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--step-size", type=float, default=1.0)
    p.set_defaults(func=cmd_reward_train)

    p = sub.add_parser("synth-harf", help="render harf curves between ism "
                                          "and fil anchors")
    _add_common(p)
    p.add_argument("--length-factor", type=float, default=1.2,
                   help="target cable length as a multiple of the chord")
    p.add_argument("--samples", type=int, default=101)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_synth_harf)

    p = sub.add_parser("export-embeddings", help="hidden representations "
                                                 "as CSV rows")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=1)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("plot", help="envelope CSV (and SVG) per clip")
    _add_common(p)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_plot)

    return parser


def _configure_logging() -> None:
    level = os.environ.get("ULMA_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    logging.basicConfig(
        stream=sys.stderr,
        level=levels.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UlmaKitError, OSError) as exc:
        print(f"ulma: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
