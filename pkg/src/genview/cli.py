"""Command-line entrypoint: every pipeline stage as a subcommand.

Exit codes: 0 success, 1 domain error, 2 usage error. All outputs are
deterministic for a fixed --seed. With --json, stdout carries only JSON.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import container
from .exceptions import GenViewError
from .generation import (
    BlobStore,
    MockEchoBackend,
    SampleInput,
    ToyDiffusionBackend,
    batch_generate,
    plan_generation,
)
from .losses import FD_TOLERANCE, run_gradient_suite
from .policy import (
    HeuristicComplexityScorer,
    NoiseSchedule,
    guidance_scale,
    load_lexicon,
    noise_level,
    perturb_embedding,
    score_caption_complexity,
)
from .quality import normalize_weights, score_image_pairs, score_image_text_pairs
from .saliency import (
    ForegroundDirection,
    ForegroundSaliency,
    activation_map,
    foreground_proportion,
)
from .core_math import min_max_normalize
from .trainer import (
    DatasetConfig,
    ProbeConfig,
    ToyEncoder,
    TrainConfig,
    linear_probe,
    make_synthetic_dataset,
    train,
)

DEFAULT_BLOB_DIR = ".genview-blobs"


def _emit(args, payload: dict, human: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human if human is not None else json.dumps(payload, sort_keys=True))


def _feature_paths(specs) -> list[Path]:
    paths = []
    for spec in specs:
        p = Path(spec)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.gvfm")))
        else:
            paths.append(p)
    if not paths:
        raise GenViewError(f"no feature containers found in {specs}")
    return paths


def _load_direction(path) -> ForegroundDirection:
    return ForegroundDirection.load(path)


def _direction_alpha(path, override) -> float:
    if override is not None:
        return override
    obj = json.loads(Path(path).read_text())
    return float(obj.get("alpha", 0.5))


# -- saliency ----------------------------------------------------------------


def cmd_saliency(args) -> int:
    if args.action == "fit":
        maps = [container.read_file(p) for p in _feature_paths(args.features)]
        est = ForegroundSaliency(
            max_tokens=args.max_tokens,
            target_fg_fraction=args.target_fg,
            random_state=args.seed,
        ).fit(maps)
        obj = json.loads(est.direction_.to_json())
        obj["alpha"] = est.alpha_  # calibrated threshold, frozen with the fit
        Path(args.out).write_text(json.dumps(obj))
        _emit(
            args,
            {"k": est.direction_.dim, "alpha": est.alpha_,
             "sample_count": est.direction_.source_sample_count, "out": str(args.out)},
            f"fitted direction (k={est.direction_.dim}, "
            f"alpha={est.alpha_:.4f}) -> {args.out}",
        )
        return 0

    direction = _load_direction(args.direction)
    alpha = _direction_alpha(args.direction, args.alpha)
    rows = []
    for path in _feature_paths(args.features):
        fmap = container.read_file(path)
        norm = min_max_normalize(activation_map(fmap, direction))
        p = foreground_proportion(norm, alpha)
        rows.append({"sample": path.name, "p": p, "noise_level": noise_level(p)})
        if args.out_activation:
            out_dir = Path(args.out_activation)
            out_dir.mkdir(parents=True, exist_ok=True)
            container.write_file(out_dir / path.name, norm)
    if args.json:
        print(json.dumps(rows, sort_keys=True))
    else:
        for r in rows:
            print(f"{r['sample']}\tp={r['p']:.4f}\tnoise_level={r['noise_level']}")
    return 0


# -- plan ----------------------------------------------------------------------


def cmd_plan(args) -> int:
    scorer = HeuristicComplexityScorer(
        load_lexicon(args.lexicon) if args.lexicon else None
    )
    out: dict = {}

    if args.p is not None:
        out["p"] = args.p
        out["noise_level"] = noise_level(args.p)
    if args.score is not None:
        out["score"] = args.score
        out["guidance_scale"] = guidance_scale(args.score)
    if args.caption is not None and args.features is None:
        score = score_caption_complexity(args.caption, scorer)
        out["score"] = score.value
        out["guidance_scale"] = guidance_scale(score)
    if args.embedding is not None:
        if args.noise_level is None:
            raise GenViewError("--embedding requires --noise-level")
        vec = container.read_vector(args.embedding)
        schedule = NoiseSchedule()
        perturbed = perturb_embedding(
            vec, args.noise_level, schedule, np.random.default_rng(args.seed)
        )
        out["alpha_bar"] = schedule.alpha_bar_at(args.noise_level)
        if args.out:
            container.write_file(args.out, perturbed)
            out["out"] = str(args.out)
        else:
            out["perturbed"] = perturbed.tolist()
    if args.features is not None:
        if args.direction is None:
            raise GenViewError("--features planning requires --direction")
        sample = SampleInput(
            sample_id=args.sample_id,
            features=container.read_file(args.features),
            caption=args.caption,
        )
        req = plan_generation(
            sample,
            args.mode.upper(),
            direction=_load_direction(args.direction),
            schedule=NoiseSchedule(),
            scorer=scorer,
            alpha=_direction_alpha(args.direction, args.alpha),
            base_seed=args.seed,
        )
        out["params"] = req.params.to_dict()
        out["cache_key"] = req.cache_key
    if not out:
        raise GenViewError(
            "nothing to plan: pass --p, --score, --caption, --embedding, or --features"
        )
    _emit(args, out)
    return 0


# -- generate --------------------------------------------------------------------


def _read_inputs(path) -> list[SampleInput]:
    base = Path(path).parent
    samples = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        features = None
        if obj.get("features"):
            fpath = Path(obj["features"])
            if not fpath.is_absolute():
                fpath = base / fpath
            features = container.read_file(fpath)
        samples.append(
            SampleInput(
                sample_id=obj["sample_id"],
                features=features,
                caption=obj.get("caption"),
            )
        )
    return samples


def cmd_generate(args) -> int:
    backend = {"mock": MockEchoBackend, "toy": ToyDiffusionBackend}[args.backend]()
    blob_dir = args.blob_dir or os.environ.get("GENVIEW_BLOB_DIR", DEFAULT_BLOB_DIR)
    direction = _load_direction(args.direction) if args.direction else None
    alpha = _direction_alpha(args.direction, args.alpha) if args.direction else 0.5
    result = batch_generate(
        args.manifest,
        _read_inputs(args.inputs),
        backend,
        max_in_flight=args.max_in_flight,
        blob_store=BlobStore(blob_dir),
        direction=direction,
        schedule=NoiseSchedule(),
        scorer=HeuristicComplexityScorer(),
        modes=tuple(m.strip().upper() for m in args.modes.split(",")),
        alpha=alpha,
        base_seed=args.seed,
    )
    payload = {
        "new_done": result.new_done,
        "new_failed": result.new_failed,
        "new_skipped": result.new_skipped,
        "already_done": result.already_done,
        "backend_calls": result.backend_calls,
    }
    new = result.new_done + result.new_failed + result.new_skipped
    _emit(
        args,
        payload,
        f"{new} new ({result.new_done} done, {result.new_failed} failed, "
        f"{result.new_skipped} skipped), {result.already_done} already done, "
        f"{result.backend_calls} backend calls",
    )
    return 1 if result.new_failed else 0


# -- score -----------------------------------------------------------------------


def cmd_score(args) -> int:
    if args.raw_scores is not None:
        qs = [float(x) for x in args.raw_scores.split(",") if x.strip()]
        weights = normalize_weights(qs)
        _emit(args, {"weights": weights.tolist()},
              " ".join(f"{w!r}" for w in weights.tolist()))
        return 0
    if not (args.pairs and args.features_dir and args.direction and args.out):
        raise GenViewError(
            "score needs --pairs/--features-dir/--direction/--out "
            "(or --raw-scores for bare weight normalization)"
        )
    direction = _load_direction(args.direction)
    base = Path(args.features_dir)

    def load(name):
        return container.read_file(base / name)

    image_pairs, text_pairs, order = [], [], []
    for line in Path(args.pairs).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "a" in obj:
            order.append((obj["pair_id"], "image_image"))
            image_pairs.append((obj["pair_id"], load(obj["a"]), load(obj["b"])))
        else:
            order.append((obj["pair_id"], "image_text"))
            text = container.read_vector(base / obj["text"])
            text_pairs.append((obj["pair_id"], load(obj["raw"]), load(obj["view"]), text))
    if image_pairs and text_pairs:
        raise GenViewError("mixing image-image and image-text pairs in one batch")

    if image_pairs:
        batch = score_image_pairs(image_pairs, direction, args.per_map_pca)
    else:
        batch = score_image_text_pairs(text_pairs, direction, args.per_map_pca)

    records = []
    for entry in batch.entries:
        q = entry.quality
        records.append(
            {
                "pair_id": entry.pair_id,
                "s_primary": None if q is None else q.s_primary,
                "s_background": None if q is None else q.s_background,
                "q": None if q is None else q.q,
                "weight": entry.weight,
            }
        )
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _emit(
        args,
        {"pairs": len(records), "out": str(args.out)},
        f"scored {len(records)} pairs -> {args.out}",
    )
    return 0


# -- loss-check --------------------------------------------------------------------


def cmd_loss_check(args) -> int:
    worst = run_gradient_suite(instances=args.instances, seed=args.seed)
    ok = all(err < FD_TOLERANCE for err in worst.values())
    if args.json:
        print(json.dumps({"errors": worst, "tolerance": FD_TOLERANCE, "pass": ok}))
    else:
        for name, err in sorted(worst.items()):
            status = "PASS" if err < FD_TOLERANCE else "FAIL"
            print(f"{name:8s} max_rel_err={err:.3e}  {status}")
    return 0 if ok else 1


# -- train / probe / report -----------------------------------------------------------


def _config_from(obj: dict, cls):
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in obj.items() if k in names}
    unknown = set(obj) - names
    if unknown:
        raise GenViewError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    for key in ("grid", "view_sources"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def _save_encoder(path, encoder: ToyEncoder) -> None:
    obj = {
        "hidden": encoder.hidden,
        "w1": encoder.w1.tolist(),
        "w2": None if encoder.w2 is None else encoder.w2.tolist(),
    }
    Path(path).write_text(json.dumps(obj))


def _load_encoder(path) -> ToyEncoder:
    obj = json.loads(Path(path).read_text())
    w1 = np.asarray(obj["w1"])
    enc = ToyEncoder(w1.shape[1], w1.shape[0], hidden=obj["hidden"])
    enc.w1 = w1
    enc.w2 = None if obj["w2"] is None else np.asarray(obj["w2"])
    return enc


def cmd_train(args) -> int:
    spec = json.loads(Path(args.config).read_text()) if args.config else {}
    data_cfg = _config_from(spec.get("dataset", {}), DatasetConfig)
    train_cfg = _config_from(spec.get("train", {}), TrainConfig)
    probe_cfg = _config_from(spec.get("probe", {}), ProbeConfig)
    if args.seed is not None and "seed" not in spec.get("train", {}):
        train_cfg = _config_from({**spec.get("train", {}), "seed": args.seed}, TrainConfig)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = make_synthetic_dataset(data_cfg)
    result = train(dataset, train_cfg)

    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    x = np.stack([np.asarray(s.dense_map).mean(axis=(0, 1)) for s in dataset.samples])
    embeddings = result.encoder.encode(x)
    container.write_file(out_dir / "embeddings.gvfm", embeddings[:, None, :])
    _save_encoder(out_dir / "encoder.json", result.encoder)
    (out_dir / "dataset.json").write_text(json.dumps(asdict(data_cfg)))

    accuracy = linear_probe(result.encoder, dataset, probe_cfg)
    clean_w, corr_w = result.final_weight_stats()
    summary = {
        "probe_accuracy": accuracy,
        "mean_clean_weight": clean_w,
        "mean_corrupted_weight": corr_w,
        "final_loss": result.metrics[-1]["loss"],
        "epochs": train_cfg.epochs,
        "loss_kind": train_cfg.loss,
        "use_quality_weights": train_cfg.use_quality_weights,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True))
    _emit(args, summary, f"probe_accuracy={accuracy:.4f} -> {out_dir}/summary.json")
    return 0


def cmd_probe(args) -> int:
    run_dir = Path(args.run)
    encoder = _load_encoder(run_dir / "encoder.json")
    data_cfg = _config_from(json.loads((run_dir / "dataset.json").read_text()),
                            DatasetConfig)
    dataset = make_synthetic_dataset(data_cfg)
    probe_cfg = ProbeConfig(seed=args.seed or 0, shuffle_labels=args.shuffle_labels)
    accuracy = linear_probe(encoder, dataset, probe_cfg)
    _emit(args, {"probe_accuracy": accuracy}, f"probe_accuracy={accuracy:.4f}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    summary = json.loads((run_dir / "summary.json").read_text())
    if args.csv:
        metrics = [
            json.loads(line)
            for line in (run_dir / "metrics.jsonl").read_text().splitlines()
            if line.strip()
        ]
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(metrics[0].keys()))
            writer.writeheader()
            writer.writerows(metrics)
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        width = max(len(k) for k in summary)
        for key in sorted(summary):
            print(f"{key:<{width}}  {summary[key]}")
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genview",
        description="Adaptive view-generation policies and quality-driven reweighting.",
    )
    parser.add_argument("--seed", type=int, default=0, help="global RNG seed")
    parser.add_argument("--json", action="store_true", help="machine-readable stdout")
    parser.add_argument("--config", default=None, help="JSON config file (flags win)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("saliency", help="fit or apply the foreground direction")
    p.add_argument("action", choices=["fit", "score"])
    p.add_argument("--features", nargs="+", required=True,
                   help="feature containers or directories of them")
    p.add_argument("--out", help="output path for the fitted direction")
    p.add_argument("--direction", help="fitted direction JSON (for score)")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--max-tokens", type=int, default=100_000)
    p.add_argument("--target-fg", type=float, default=0.4)
    p.add_argument("--out-activation", default=None,
                   help="directory for normalized activation containers")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("plan", help="map inputs to generation parameters")
    p.add_argument("--p", type=float, default=None, help="foreground proportion")
    p.add_argument("--score", type=int, default=None, help="complexity score 1-4")
    p.add_argument("--caption", default=None)
    p.add_argument("--lexicon", default=None, help="override the bundled lexicon")
    p.add_argument("--embedding", default=None, help="embedding container to perturb")
    p.add_argument("--noise-level", type=int, default=None)
    p.add_argument("--out", default=None, help="output container for --embedding")
    p.add_argument("--features", default=None, help="feature container for full planning")
    p.add_argument("--direction", default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--mode", default="ic", choices=["ic", "tc", "itc", "IC", "TC", "ITC"])
    p.add_argument("--sample-id", default="sample")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("generate", help="run offline view generation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--inputs", required=True, help="JSONL of sample inputs")
    p.add_argument("--backend", choices=["mock", "toy"], default="toy")
    p.add_argument("--modes", default="ic,tc,itc")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--direction", default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--blob-dir", default=None,
                   help=f"blob store (default $GENVIEW_BLOB_DIR or {DEFAULT_BLOB_DIR})")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", help="score and weight positive pairs")
    p.add_argument("--pairs", help="JSONL pair records")
    p.add_argument("--features-dir")
    p.add_argument("--direction")
    p.add_argument("--out")
    p.add_argument("--per-map-pca", action="store_true")
    p.add_argument("--raw-scores", default=None,
                   help="comma-separated q values; prints softmax weights")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("loss-check", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(func=cmd_loss_check)

    p = sub.add_parser("train", help="train the toy harness")
    p.add_argument("--config", dest="config", default=None,
                   help="JSON with dataset/train/probe sections")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="linear probe a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--shuffle-labels", action="store_true")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="summarize a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--csv", default=None, help="write per-epoch metrics CSV")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config and args.command != "train":
        # Config file supplies defaults for flags left unset; flags win.
        defaults = json.loads(Path(args.config).read_text())
        for key, value in defaults.items():
            attr = key.replace("-", "_")
            if hasattr(args, attr) and getattr(args, attr) in (None, False):
                setattr(args, attr, value)
    try:
        return args.func(args)
    except GenViewError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
