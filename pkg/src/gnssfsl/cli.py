"""Command-line pipeline: corpus generation, training, mining, adaptation, eval.

Stages share a run directory. Each stage appends a hash-chained entry to
run_manifest.json naming its inputs and artifacts, so a finished run documents
how to reproduce itself. All stage outputs are deterministic functions of the
config and master seed; only the recorded wall-clock timings vary.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fsl, metrics, nncore, siggen, spectro, uncertainty
from .fsl import SimilarityMap, TrainConfig

# Field-study class frequencies used to shape synthetic corpora.
CLASS_COUNTS_FULL = {
    0: 9980,
    1: 132974,
    2: 54620,
    3: 13,
    4: 28,
    5: 59,
    6: 9,
    7: 39,
    8: 79,
    9: 10,
    10: 16,
}
MIN_CLASS_COUNT = 8

PROFILES = {
    "desk": {
        "duration_ms": 2.0,
        "sample_rate_hz": 1_000_000.0,
        "window": 256,
        "hop": 64,
        "image_size": 32,
        "total": 2000,
    },
    "paper": {
        "duration_ms": 20.0,
        "sample_rate_hz": 62_500_000.0,
        "window": 1024,
        "hop": 512,
        "image_size": 128,
        "total": None,  # full class counts
    },
}

BACKGROUND_OF_CLASS = {
    0: siggen.BackgroundLevel.LOW,
    1: siggen.BackgroundLevel.MEDIUM,
    2: siggen.BackgroundLevel.HIGH,
}


class StageError(RuntimeError):
    """Pipeline-level failure with a machine-readable payload."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


def _jammer_spec(label: int, rng: np.random.Generator, fs: float, duration_ms: float, seed: int):
    """Class archetype parameters, jittered per record; frequencies are
    fractions of the sample rate, periods fractions of the duration."""
    kind = None
    kwargs = {}
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if label == 3:
        # Periods long enough that the off gaps span whole STFT frames.
        kind = siggen.JammerKind.PULSED
        kwargs = {
            "pulse_period_ms": duration_ms * rng.uniform(0.25, 0.35),
            "duty_cycle": rng.uniform(0.2, 0.35),
        }
    elif label == 4:
        kind = siggen.JammerKind.PULSED
        kwargs = {
            "pulse_period_ms": duration_ms * rng.uniform(0.08, 0.12),
            "duty_cycle": rng.uniform(0.55, 0.75),
        }
    elif label == 5:
        # Out-of-band energy reaches the ADC through the filter skirts, so the
        # effective JNR sits well below the in-band tone class.
        kind = siggen.JammerKind.OUT_OF_BAND_TONE
        kwargs = {"tone_freq_hz": sign * rng.uniform(0.30, 0.45) * fs}
    elif label == 6:
        kind = siggen.JammerKind.NOISE
        bf = rng.uniform(0.35, 0.6)
        center_max = max(0.02, 0.5 - bf / 2.0 - 0.02)
        kwargs = {
            "band_fraction": bf,
            "band_center_hz": rng.uniform(-center_max, center_max) * fs,
        }
    elif label == 7:
        kind = siggen.JammerKind.TONE
        kwargs = {"tone_freq_hz": sign * rng.uniform(0.05, 0.22) * fs}
    elif label == 8:
        kind = siggen.JammerKind.CHIRP
        kwargs = {
            "chirp_f0_hz": -rng.uniform(0.25, 0.35) * fs,
            "chirp_f1_hz": rng.uniform(0.25, 0.35) * fs,
            "chirp_period_ms": duration_ms * rng.uniform(0.15, 0.3),
        }
    elif label == 9:
        kind = siggen.JammerKind.TWO_CHIRPS
        kwargs = {
            "chirp_f0_hz": -rng.uniform(0.25, 0.35) * fs,
            "chirp_f1_hz": rng.uniform(0.25, 0.35) * fs,
            "chirp_period_ms": duration_ms * rng.uniform(0.15, 0.3),
            "chirp2_f0_hz": rng.uniform(0.15, 0.25) * fs,
            "chirp2_f1_hz": -rng.uniform(0.15, 0.25) * fs,
            "chirp2_period_ms": duration_ms * rng.uniform(0.3, 0.5),
        }
    elif label == 10:
        # One slow full-band sweep per snapshot, against class 8's fast
        # repeating sawtooth.
        kind = siggen.JammerKind.CHIRP
        kwargs = {
            "chirp_f0_hz": -rng.uniform(0.35, 0.45) * fs,
            "chirp_f1_hz": rng.uniform(0.35, 0.45) * fs,
            "chirp_period_ms": duration_ms * rng.uniform(0.9, 1.1),
        }
    else:
        raise ValueError(f"class {label} is not a jammer class")
    if label == 5:
        jnr_db = rng.uniform(0.0, 6.0)
    elif label == 6:
        jnr_db = rng.uniform(5.0, 15.0)
    else:
        jnr_db = rng.uniform(8.0, 20.0)
    return siggen.JammerSpec(kind=kind, jnr_db=jnr_db, seed=seed, **kwargs)


def class_counts(profile: str, total: int | None = None) -> dict:
    """Scale the field-study class frequencies to the requested corpus size."""
    if profile == "paper" and total is None:
        return dict(CLASS_COUNTS_FULL)
    total = total if total is not None else PROFILES[profile]["total"]
    grand = sum(CLASS_COUNTS_FULL.values())
    return {
        c: max(MIN_CLASS_COUNT, round(total * n / grand))
        for c, n in CLASS_COUNTS_FULL.items()
    }


def synthesize_record(
    label: int,
    record_seed: int,
    duration_ms: float,
    sample_rate_hz: float,
    window: int,
    hop: int,
    image_size: int,
) -> tuple[spectro.SpectrogramImage, dict]:
    """Generate one labeled spectrogram image plus its parameter snapshot."""
    rng = np.random.default_rng(record_seed)
    bg_seed = siggen.derive_seed(record_seed, 0)
    jam_seed = siggen.derive_seed(record_seed, 1)

    if label in BACKGROUND_OF_CLASS:
        level = BACKGROUND_OF_CLASS[label]
        params = {"background": level.value}
        bg = siggen.gen_background(
            siggen.BackgroundSpec(level, seed=bg_seed), duration_ms, sample_rate_hz
        )
        snapshot = bg
    else:
        levels = list(siggen.BackgroundLevel)
        level = levels[rng.integers(len(levels))]
        spec = _jammer_spec(label, rng, sample_rate_hz, duration_ms, jam_seed)
        bg = siggen.gen_background(
            siggen.BackgroundSpec(level, seed=bg_seed), duration_ms, sample_rate_hz
        )
        jam = siggen.gen_jammer(spec, duration_ms, sample_rate_hz)
        snapshot = siggen.mix(bg, jam, spec.jnr_db)
        params = {
            "background": level.value,
            "kind": spec.kind.value,
            "jnr_db": round(spec.jnr_db, 6),
        }

    db = spectro.stft_magnitude(snapshot, window, hop)
    img = spectro.quantize(db, label)
    img = spectro.resize(img, image_size, image_size)
    return img, params


def generate_corpus(
    out_dir: str | Path,
    profile: str = "desk",
    seed: int = 42,
    total: int | None = None,
    image_size: int | None = None,
    counts: dict | None = None,
    fractions=fsl.DEFAULT_SPLIT_FRACTIONS,
) -> spectro.LabeledCorpus:
    """Write a GNSSIMG1 corpus + manifest.json; deterministic per seed."""
    if profile not in PROFILES:
        raise StageError(f"unknown profile {profile!r}", profile=profile)
    prof = PROFILES[profile]
    image_size = image_size or prof["image_size"]
    counts = counts or class_counts(profile, total)
    bad = [c for c, n in counts.items() if n < MIN_CLASS_COUNT]
    if bad:
        raise StageError(
            f"class counts below the per-class minimum {MIN_CLASS_COUNT}: {sorted(bad)}",
            classes=sorted(bad),
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    record_index = 0
    for label in sorted(counts):
        for i in range(counts[label]):
            record_seed = siggen.derive_seed(seed, record_index)
            img, params = synthesize_record(
                label,
                record_seed,
                prof["duration_ms"],
                prof["sample_rate_hz"],
                prof["window"],
                prof["hop"],
                image_size,
            )
            fname = f"cls{label:02d}_{i:05d}.img"
            spectro.write_image(img, out_dir / fname)
            rec = spectro.CorpusRecord(
                file=fname,
                label=label,
                split="",
                seed=record_seed,
                jammer_params=params,
                image=img,
            )
            records.append(rec)
            record_index += 1

    corpus = spectro.LabeledCorpus(records, out_dir)
    corpus = fsl.split_corpus(corpus, fractions, seed=seed)
    spectro.save_manifest(corpus, out_dir / "manifest.json")
    return corpus


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _hash_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def identity_hash(config: TrainConfig) -> str:
    """Hash of the artifact-compatibility subset of a training config."""
    subset = {
        "height": config.height,
        "width": config.width,
        "conv_channels": list(config.conv_channels),
        "embed_dim": config.embed_dim,
        "dtype": config.dtype,
        "adaptation_classes": list(config.adaptation_classes),
        "k_shot": config.k_shot,
        "seed": config.seed,
    }
    return _hash_text(_canonical(subset))


def _manifest_path(run_dir: Path) -> Path:
    return run_dir / "run_manifest.json"


def _load_manifest(run_dir: Path) -> dict:
    path = _manifest_path(run_dir)
    if path.exists():
        return json.loads(path.read_text())
    return {"stages": []}


def _append_stage(run_dir: Path, entry: dict) -> None:
    manifest = _load_manifest(run_dir)
    prev = manifest["stages"][-1]["hash"] if manifest["stages"] else None
    entry["prev_hash"] = prev
    entry["hash"] = _hash_text(_canonical({k: v for k, v in entry.items() if k != "hash"}))
    manifest["stages"].append(entry)
    _manifest_path(run_dir).write_text(json.dumps(manifest, indent=1) + "\n")


def _find_stage(run_dir: Path, stage: str) -> dict | None:
    for entry in reversed(_load_manifest(run_dir)["stages"]):
        if entry["stage"] == stage:
            return entry
    return None


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError(f"missing upstream artifact: {what}", file=str(path))
    return path


def _corpus_hash(out_dir: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(out_dir.glob("*.img")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    h.update((out_dir / "manifest.json").read_bytes())
    return h.hexdigest()


def _load_run_corpus(run_dir: Path) -> spectro.LabeledCorpus:
    manifest = _require(run_dir / "corpus" / "manifest.json", "corpus manifest")
    return spectro.load_corpus(manifest)


def _load_config(args) -> TrainConfig:
    if args.config:
        return TrainConfig.from_json(_require(Path(args.config), "config file").read_text())
    return TrainConfig()


def _check_identity(run_dir: Path, checkpoint_name: str, config: TrainConfig, force: bool):
    for entry in reversed(_load_manifest(run_dir)["stages"]):
        if entry.get("artifacts", {}).get("checkpoint", "").endswith(f"{checkpoint_name}.gnssnet"):
            recorded = entry.get("identity_hash")
            if recorded and recorded != identity_hash(config) and not force:
                raise StageError(
                    f"config hash mismatch for checkpoint {checkpoint_name!r}; "
                    "pass --force to override",
                    expected=recorded,
                    got=identity_hash(config),
                )
            return


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    run_dir = Path(args.out)
    t0 = time.perf_counter()
    counts = json.loads(args.counts) if args.counts else None
    if counts:
        counts = {int(k): int(v) for k, v in counts.items()}
    generate_corpus(
        run_dir / "corpus",
        profile=args.profile,
        seed=args.seed,
        total=args.total,
        image_size=args.image_size,
        counts=counts,
    )
    _append_stage(
        run_dir,
        {
            "stage": "gen-data",
            "master_seed": args.seed,
            "profile": args.profile,
            "artifacts": {"corpus": "corpus/manifest.json"},
            "corpus_hash": _corpus_hash(run_dir / "corpus"),
            "elapsed_s": round(time.perf_counter() - t0, 3),
        },
    )
    print(f"corpus written to {run_dir / 'corpus'}")


def _train_one(run_dir: Path, config: TrainConfig, name: str, sim_map) -> Path:
    corpus = _load_run_corpus(run_dir)
    result = fsl.train(corpus, config, sim_map=sim_map)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt = ckpt_dir / f"{name}.gnssnet"
    nncore.save_checkpoint(result.network, ckpt)
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    with open(reports / f"train_{name}.csv", "w", newline="") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(result.epoch_losses):
            fh.write(f"{i},{loss:.9f}\n")
    return ckpt


def _resolve_sim_map(run_dir: Path, config: TrainConfig) -> SimilarityMap | None:
    if config.loss != "quadruplet":
        return None
    if config.similarity_map == "paper_fixture":
        return fsl.load_fixture_map()
    path = _require(run_dir / "similarity_map.json", "similarity map (run mine first)")
    return SimilarityMap.load(path)


def cmd_train(args) -> None:
    run_dir = Path(args.run)
    config = _load_config(args)
    name = args.name or config.loss
    t0 = time.perf_counter()
    sim_map = _resolve_sim_map(run_dir, config)
    try:
        ckpt = _train_one(run_dir, config, name, sim_map)
    except fsl.TrainingDiverged as exc:
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        rescue = ckpt_dir / f"{name}_diverged.gnssnet"
        nncore.save_checkpoint(exc.network, rescue)
        raise StageError(
            f"training diverged at epoch {exc.epoch}; checkpoint retained",
            checkpoint=str(rescue),
        ) from exc
    _append_stage(
        run_dir,
        {
            "stage": f"train:{name}",
            "master_seed": config.seed,
            "config": json.loads(config.to_json()),
            "identity_hash": identity_hash(config),
            "artifacts": {
                "checkpoint": str(ckpt.relative_to(run_dir)),
                "log": f"reports/train_{name}.csv",
            },
            "elapsed_s": round(time.perf_counter() - t0, 3),
        },
    )
    print(f"checkpoint written to {ckpt}")


def cmd_ensemble(args) -> None:
    run_dir = Path(args.run)
    config = _load_config(args)
    t0 = time.perf_counter()
    corpus = _load_run_corpus(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(args.members):
        member_cfg = replace(config, seed=config.seed + i, pretrain="ce", loss="ce")
        result = fsl.train(corpus, member_cfg)
        path = ckpt_dir / f"ensemble_{i:02d}.gnssnet"
        nncore.save_checkpoint(result.network, path)
        paths.append(str(path.relative_to(run_dir)))
    _append_stage(
        run_dir,
        {
            "stage": "ensemble",
            "master_seed": config.seed,
            "members": args.members,
            "config": json.loads(config.to_json()),
            "identity_hash": identity_hash(config),
            "artifacts": {f"member_{i:02d}": p for i, p in enumerate(paths)},
            "elapsed_s": round(time.perf_counter() - t0, 3),
        },
    )
    print(f"{args.members} ensemble members written to {ckpt_dir}")


def _load_ensemble(run_dir: Path) -> uncertainty.Ensemble:
    entry = _find_stage(run_dir, "ensemble")
    if entry is None:
        raise StageError("missing upstream artifact: ensemble checkpoints (run ensemble first)",
                         file=str(run_dir / "checkpoints"))
    members = []
    for key in sorted(entry["artifacts"]):
        path = _require(run_dir / entry["artifacts"][key], f"ensemble member {key}")
        members.append(nncore.load_checkpoint(path))
    return uncertainty.Ensemble(members)


def cmd_mine(args) -> None:
    run_dir = Path(args.run)
    t0 = time.perf_counter()
    corpus = _load_run_corpus(run_dir)
    ensemble = _load_ensemble(run_dir)
    entry = _find_stage(run_dir, "ensemble")
    train_classes = sorted(
        set(corpus.classes()) - set(entry["config"]["adaptation_classes"])
    )
    val = corpus.subset(split="val", classes=set(train_classes))
    remap = {c: i for i, c in enumerate(train_classes)}
    pairs = [(r.image.pixels, remap[r.label]) for r in val.records]
    sim_map = fsl.build_similarity_map(ensemble, pairs, quantile=args.quantile)
    # Map head-index classes back to corpus labels.
    inverse = {i: c for c, i in remap.items()}
    sim_map = SimilarityMap(
        {inverse[c]: [inverse[x] for x in v] for c, v in sim_map.ranked.items()}
    )
    (run_dir / "similarity_map.json").write_text(sim_map.to_json() + "\n")

    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    images = [r.image.pixels for r in val.records]
    reps = uncertainty.ensemble_reports(ensemble, images)
    member_probs = np.stack([uncertainty.predict_member(m, images) for m in ensemble.members])
    mean_probs = member_probs.mean(axis=0)
    predicted = [inverse[int(np.argmax(p))] for p in mean_probs]
    uncertainty.write_uncertainty_csv(
        reports / "uncertainty.csv",
        [r.file for r in val.records],
        [r.label for r in val.records],
        predicted,
        reps,
    )
    _append_stage(
        run_dir,
        {
            "stage": "mine",
            "quantile": args.quantile,
            "artifacts": {
                "similarity_map": "similarity_map.json",
                "uncertainty": "reports/uncertainty.csv",
            },
            "elapsed_s": round(time.perf_counter() - t0, 3),
        },
    )
    print(f"similarity map written to {run_dir / 'similarity_map.json'}")


def adaptation_report(
    net,
    corpus: spectro.LabeledCorpus,
    adaptation_classes,
    k: int,
    per_class_base: int = 20,
    query_splits=("val", "test"),
):
    """Few-shot scoring of the held-out classes: adapt, classify, summarize.

    Returns (macro accuracy, macro F2, confusion matrix) over queries drawn
    from the given splits of the adaptation classes.
    """
    adaptation_classes = sorted(adaptation_classes)
    base_classes = sorted(set(corpus.classes()) - set(adaptation_classes))
    base = fsl.compute_prototypes(
        net, fsl.base_support(corpus, base_classes, per_class=per_class_base)
    )
    support = fsl.adaptation_support(corpus, adaptation_classes, k)
    classifier = fsl.adapt(net, support, k, base=base)
    queries, truth = [], []
    for split in query_splits:
        sub = corpus.subset(split=split, classes=set(adaptation_classes))
        queries += [r.image.pixels for r in sub.records]
        truth += [r.label for r in sub.records]
    predicted = fsl.classify_batch(classifier, queries)
    cm = metrics.confusion(truth, predicted, metrics.NUM_CLASSES)
    return (
        metrics.macro_recall(cm, adaptation_classes),
        metrics.macro_f_beta(cm, 2.0, adaptation_classes),
        cm,
    )


def _build_classifier(run_dir: Path, config: TrainConfig, name: str) -> fsl.PrototypeClassifier:
    corpus = _load_run_corpus(run_dir)
    ckpt = _require(run_dir / "checkpoints" / f"{name}.gnssnet", f"checkpoint {name!r}")
    net = nncore.load_checkpoint(ckpt)
    base_classes = sorted(set(corpus.classes()) - set(config.adaptation_classes))
    base = fsl.compute_prototypes(net, fsl.base_support(corpus, base_classes))
    support = fsl.adaptation_support(corpus, config.adaptation_classes, config.k_shot)
    return fsl.adapt(net, support, config.k_shot, base=base)


def _save_prototypes(classifier: fsl.PrototypeClassifier, path: Path) -> None:
    payload = {
        str(c): [float(x) for x in v] for c, v in sorted(classifier.prototypes.items())
    }
    path.write_text(json.dumps(payload, indent=1) + "\n")


def cmd_adapt(args) -> None:
    run_dir = Path(args.run)
    config = _load_config(args)
    name = args.name or "ce"
    _check_identity(run_dir, name, config, args.force)
    t0 = time.perf_counter()
    classifier = _build_classifier(run_dir, config, name)
    out = run_dir / "checkpoints" / f"{name}_prototypes.json"
    _save_prototypes(classifier, out)
    _append_stage(
        run_dir,
        {
            "stage": f"adapt:{name}",
            "identity_hash": identity_hash(config),
            "artifacts": {"prototypes": str(out.relative_to(run_dir))},
            "elapsed_s": round(time.perf_counter() - t0, 3),
        },
    )
    print(f"prototypes written to {out}")


def cmd_eval(args) -> None:
    run_dir = Path(args.run)
    config = _load_config(args)
    name = args.name or "ce"
    _check_identity(run_dir, name, config, args.force)
    t0 = time.perf_counter()
    corpus = _load_run_corpus(run_dir)
    classifier = _build_classifier(run_dir, config, name)

    test = corpus.subset(split="test")
    predicted = fsl.classify_batch(classifier, [r.image.pixels for r in test.records])
    truth = test.labels()
    cm = metrics.confusion(truth, predicted, metrics.NUM_CLASSES)
    report = metrics.binary_detection_metrics(cm)

    adapt_classes = sorted(config.adaptation_classes)
    extras = {
        "adaptation_macro_accuracy": metrics.macro_recall(cm, adapt_classes),
        "adaptation_macro_f2": metrics.macro_f_beta(cm, 2.0, adapt_classes),
    }
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(reports / f"metrics_{name}.csv", report, extras)
    with open(reports / f"confusion_{name}.csv", "w", newline="") as fh:
        for row in cm.counts:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
    _append_stage(
        run_dir,
        {
            "stage": f"eval:{name}",
            "identity_hash": identity_hash(config),
            "artifacts": {
                "metrics": f"reports/metrics_{name}.csv",
                "confusion": f"reports/confusion_{name}.csv",
            },
            "elapsed_s": round(time.perf_counter() - t0, 3),
        },
    )
    print(f"reports written to {reports}")


def cmd_embed(args) -> None:
    run_dir = Path(args.run)
    config = _load_config(args)
    name = args.name or "ce"
    _check_identity(run_dir, name, config, args.force)
    t0 = time.perf_counter()
    corpus = _load_run_corpus(run_dir)
    ckpt = _require(run_dir / "checkpoints" / f"{name}.gnssnet", f"checkpoint {name!r}")
    net = nncore.load_checkpoint(ckpt)
    test = corpus.subset(split="test")
    images = [r.image.pixels for r in test.records]
    emb = net.infer(images)
    perplexity = min(args.perplexity, (len(images) - 1) / 3.0 - 1e-9)
    points = metrics.tsne(emb, perplexity=perplexity, iters=args.iters, seed=config.seed)
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    out = reports / f"tsne_{name}.csv"
    metrics.write_points_csv(out, points, test.labels())
    _append_stage(
        run_dir,
        {
            "stage": f"embed:{name}",
            "identity_hash": identity_hash(config),
            "artifacts": {"tsne": str(out.relative_to(run_dir))},
            "elapsed_s": round(time.perf_counter() - t0, 3),
        },
    )
    print(f"projection written to {out}")


def cmd_sweep(args) -> None:
    """Margin grid search, one desk-scale training per setting."""
    run_dir = Path(args.run)
    config = _load_config(args)
    t0 = time.perf_counter()
    corpus = _load_run_corpus(run_dir)
    rows = []
    settings = []
    if args.grid in ("triplet", "both"):
        settings += [("triplet", a, None) for a in (2, 3, 5, 7, 10, 50, 100)]
    if args.grid in ("quadruplet", "both"):
        settings += [
            ("quadruplet", a1, a2)
            for a1, a2 in ((2, 5), (5, 6), (5, 10), (10, 50), (50, 60), (50, 100))
        ]
    for loss, m1, m2 in settings:
        if loss == "triplet":
            cfg = replace(config, loss=loss, alpha=float(m1))
        else:
            cfg = replace(config, loss=loss, alpha1=float(m1), alpha2=float(m2))
        sim_map = fsl.load_fixture_map() if loss == "quadruplet" else None
        result = fsl.train(corpus, cfg, sim_map=sim_map)
        base_classes = sorted(set(corpus.classes()) - set(cfg.adaptation_classes))
        base = fsl.compute_prototypes(result.network, fsl.base_support(corpus, base_classes))
        support = fsl.adaptation_support(corpus, cfg.adaptation_classes, cfg.k_shot)
        classifier = fsl.adapt(result.network, support, cfg.k_shot, base=base)
        test = corpus.subset(split="test")
        predicted = fsl.classify_batch(classifier, [r.image.pixels for r in test.records])
        cm = metrics.confusion(test.labels(), predicted, metrics.NUM_CLASSES)
        rows.append(
            (
                loss,
                m1,
                m2 if m2 is not None else "",
                metrics.macro_f_beta(cm, 2.0, sorted(cfg.adaptation_classes)),
                metrics.macro_f_beta(cm, 1.0, sorted(cfg.adaptation_classes)),
            )
        )
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    out = reports / "margin_sweep.csv"
    with open(out, "w", newline="") as fh:
        fh.write("loss,alpha1,alpha2,adaptation_macro_f2,adaptation_macro_f1\n")
        for loss, m1, m2, f2, f1 in rows:
            fh.write(f"{loss},{m1},{m2},{f2:.9f},{f1:.9f}\n")
    _append_stage(
        run_dir,
        {
            "stage": "sweep",
            "grid": args.grid,
            "artifacts": {"sweep": "reports/margin_sweep.csv"},
            "elapsed_s": round(time.perf_counter() - t0, 3),
        },
    )
    print(f"sweep written to {out}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(p, config=True):
    p.add_argument("--run", required=True, help="run directory")
    if config:
        p.add_argument("--config", help="TrainConfig JSON file")
        p.add_argument("--name", help="checkpoint name (default: the loss kind)")
        p.add_argument("--force", action="store_true", help="ignore config hash mismatches")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gnssfsl", description="few-shot jammer classification pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize the labeled spectrogram corpus")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--total", type=int, help="approximate corpus size (desk profile)")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--counts", help="JSON object {class: count} overriding the profile")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a backbone (baseline or pairwise)")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ensemble", help="train M independently seeded classifiers")
    _add_common(p)
    p.add_argument("--members", type=int, default=10)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("mine", help="build the similar-class map from ensemble uncertainty")
    _add_common(p, config=False)
    p.add_argument("--quantile", type=float, default=0.75)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("adapt", help="build prototypes for the held-out classes")
    _add_common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="score the test split and emit reports")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="t-SNE projection of test embeddings")
    _add_common(p)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=500)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("sweep", help="margin grid search")
    _add_common(p)
    p.add_argument("--grid", choices=("triplet", "quadruplet", "both"), default="both")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        payload = {"error": "stage_error", "message": str(exc), **exc.details}
        print(json.dumps(payload), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
