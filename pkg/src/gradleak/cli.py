"""Command-line pipeline: pretrain-at, spab-train, fed-round, extract,
reconstruct, preimage, detect, evaluate, demo.

Every stage reads an ExperimentConfig, derives its seed from the master seed,
and drops its artifacts plus a stamp file into the output directory.  A stage
whose stamp matches the current config hash is a no-op, so pipelines resume
for free.  Set GRADLEAK_LOG=debug for verbose progress on stderr.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import detection, federation, leakage, metrics, reconstruction, training
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .data import Dataset, synth_dataset
from .models import (FeatureExtractor, LinearHead, SpabHead,
                     default_extractor_spec, read_checkpoint)

log = logging.getLogger("gradleak")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BAD_CONFIG = 2
EXIT_ANOMALOUS = 3  # detect: scan found a planted primitive


def _setup_logging() -> None:
    level = os.environ.get("GRADLEAK_LOG", "warning").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _error_record(out: Path, kind: str, message: str) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "error.json", {"error": kind, "message": message})
    except OSError:
        pass
    log.error("%s: %s", kind, message)


class Stage:
    """Stamped, resumable unit of work inside the output directory."""

    def __init__(self, name: str, cfg: ExperimentConfig, out: Path):
        self.name = name
        self.cfg = cfg
        self.out = out
        self.stamp = out / "stamps" / f"{name}.json"

    def done(self) -> bool:
        if not self.stamp.exists():
            return False
        try:
            doc = json.loads(self.stamp.read_text())
        except (json.JSONDecodeError, OSError):
            return False
        if doc.get("hash") != self.cfg.content_hash():
            return False
        return all((self.out / f).exists() for f in doc.get("outputs", []))

    def finish(self, outputs: list[str]) -> None:
        self.stamp.parent.mkdir(parents=True, exist_ok=True)
        _write_json(self.stamp, {"stage": self.name,
                                 "hash": self.cfg.content_hash(),
                                 "outputs": sorted(outputs)})


def _load_effective_config(config_path, seed, out_dir) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=seed)
    if out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(out_dir))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    return cfg, out


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="Experiment config JSON.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the master seed.")(fn)
    fn = click.option("--jobs", type=int, default=1, show_default=True,
                      help="Worker processes for per-IR stages.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=None,
                      help="Override the output directory.")(fn)
    return fn


def _train_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    return synth_dataset(cfg.stage_seed("data"), d.count, d.classes,
                         size=d.size, family=d.family)


def _private_dataset(cfg: ExperimentConfig, family: str | None = None) -> Dataset:
    d = cfg.dataset
    return synth_dataset(cfg.stage_seed("data") + 1, max(d.count // 2, 64),
                         d.classes, size=d.size, family=family or d.family,
                         split="private")


# ---------------------------------------------------------------------------
# stage implementations (shared between their subcommands and `demo`)


def _run_pretrain(cfg: ExperimentConfig, out: Path) -> None:
    stage = Stage("pretrain", cfg, out)
    if stage.done():
        log.info("pretrain: up to date")
        return
    ds = _train_dataset(cfg)
    spec = default_extractor_spec(cfg.dataset.size, cfg.model.in_channels,
                                  cfg.model.ir_dim)
    seed = cfg.stage_seed("pretrain")
    natural_budget = training.PgdBudget(0.0, 1e-12, 1)
    histories = {}
    for tag, budget in (("natural", natural_budget),
                        ("robust", cfg.pretrain.budget())):
        rng = np.random.default_rng(seed)
        fe = FeatureExtractor(spec, rng=rng)
        head = LinearHead(cfg.model.ir_dim, cfg.dataset.classes, rng=rng)
        hist = training.adversarial_train(fe, head, ds, budget,
                                          epochs=cfg.pretrain.epochs,
                                          lr=cfg.pretrain.lr,
                                          batch_size=cfg.pretrain.batch_size,
                                          seed=seed)
        fe.save(out / f"fe_{tag}.ckpt")
        head.save(out / f"linear_{tag}.ckpt")
        histories[tag] = hist.epochs
        log.info("pretrain %s: natural_acc=%.3f robust_acc=%.3f", tag,
                 hist.epochs[-1]["natural_acc"], hist.epochs[-1]["robust_acc"])
    _write_json(out / "pretrain.json", histories)
    stage.finish(["fe_natural.ckpt", "fe_robust.ckpt", "linear_natural.ckpt",
                  "linear_robust.ckpt", "pretrain.json"])


def _run_spab(cfg: ExperimentConfig, out: Path) -> None:
    stage = Stage("spab", cfg, out)
    if stage.done():
        log.info("spab-train: up to date")
        return
    ds = _train_dataset(cfg)
    fe = FeatureExtractor.load(out / "fe_robust.ckpt")
    head = SpabHead(cfg.model.ir_dim, cfg.model.ir_dim, cfg.dataset.classes,
                    rng=np.random.default_rng(cfg.stage_seed("spab")))
    hist = training.spab_train(fe, head, ds, cfg.spab, seed=cfg.stage_seed("spab"))
    head.save(out / "head.ckpt")
    _write_json(out / "spab.json", hist.epochs)
    log.info("spab-train: final leakage(B=%d)=%.3f", cfg.spab.batch_size,
             hist.epochs[-1].get("leakage_rate", -1.0))
    stage.finish(["head.ckpt", "spab.json"])


def _run_fed_round(cfg: ExperimentConfig, out: Path) -> None:
    stage = Stage("round", cfg, out)
    if stage.done():
        log.info("fed-round: up to date")
        return
    fe = FeatureExtractor.load(out / "fe_robust.ckpt")
    head = SpabHead.load(out / "head.ckpt")
    private = _private_dataset(cfg)
    rng = np.random.default_rng(cfg.stage_seed("round"))
    dp = None
    if cfg.round.dp_epsilon > 0:
        clip = cfg.round.dp_clip
        if clip <= 0:
            clip = federation.median_clean_norm(fe, head, private,
                                                cfg.round.batch_size, rng)
        dp = federation.DpConfig(cfg.round.dp_epsilon, cfg.round.dp_delta,
                                 clip, seed=cfg.stage_seed("round"))
    update, images, labels = federation.run_round(fe, head, private,
                                                  cfg.round.batch_size, rng, dp)
    (out / "update.bin").write_bytes(update.to_bytes())
    names = []
    for i, img in enumerate(images):
        name = f"batch_{i:02d}.ppm"
        reconstruction.write_ppm(out / name, img)
        names.append(name)
    _write_json(out / "round.json", {
        "batch_size": int(cfg.round.batch_size),
        "labels": [int(v) for v in labels],
        "images": names,
        "dp": None if dp is None else {"epsilon": dp.epsilon, "delta": dp.delta,
                                       "clip": dp.clip},
        "update_norm": update.l2_norm(),
    })
    stage.finish(["update.bin", "round.json"] + names)


def _run_extract(cfg: ExperimentConfig, out: Path) -> None:
    stage = Stage("extract", cfg, out)
    if stage.done():
        log.info("extract: up to date")
        return
    update = federation.GradientUpdate.from_bytes((out / "update.bin").read_bytes())
    cands = leakage.extract_candidate_irs(update.grads["w"], update.grads["b"])
    cands = leakage.dedupe_candidates(cands)
    _write_json(out / "irs.json", {
        "candidates": [{
            "vector": [float(v) for v in c.vector],
            "source_column": c.source_column,
            "bias_gradient": c.bias_gradient,
            "duplicate_group": c.duplicate_group,
        } for c in cands],
    })
    log.info("extract: %d deduplicated candidates", len(cands))
    stage.finish(["irs.json"])


def _load_irs(out: Path) -> list[np.ndarray]:
    doc = json.loads((out / "irs.json").read_text())
    return [np.asarray(c["vector"]) for c in doc["candidates"]]


def _run_reconstruct(cfg: ExperimentConfig, out: Path, jobs: int) -> None:
    stage = Stage("reconstruct", cfg, out)
    if stage.done():
        log.info("reconstruct: up to date")
        return
    targets = _load_irs(out)
    if not targets:
        raise click.ClickException("no extracted IRs; run `extract` first")
    shape = (cfg.model.in_channels, cfg.dataset.size, cfg.dataset.size)
    job_cfg = dataclasses.replace(cfg.ir_match,
                                  seed=cfg.stage_seed("reconstruct"))
    results = reconstruction.run_ir_match_jobs(targets, str(out / "fe_robust.ckpt"),
                                               shape, job_cfg, jobs=jobs)
    # pair each reconstruction with its best ground-truth match when the
    # round's batch is available
    round_doc = json.loads((out / "round.json").read_text()) \
        if (out / "round.json").exists() else None
    report = []
    names = []
    for i, res in enumerate(results):
        name = f"recon_{i:02d}.ppm"
        reconstruction.write_ppm(out / name, np.clip(res.image, 0.0, 1.0))
        names.append(name)
        entry = {"image": name, "best_loss": res.best_loss,
                 "best_iteration": res.best_iteration}
        if round_doc is not None:
            scored = []
            for gt_name in round_doc["images"]:
                gt = reconstruction.read_ppm(out / gt_name)
                scored.append((metrics.psnr(res.image, gt),
                               metrics.ssim(res.image, gt), gt_name))
            p, s, gt_name = max(scored)
            entry.update({"match": gt_name, "psnr": p, "ssim": s})
        report.append(entry)
    _write_json(out / "reconstruct.json", report)
    stage.finish(["reconstruct.json"] + names)


def _run_preimage(cfg: ExperimentConfig, out: Path, pairs: int = 5) -> None:
    stage = Stage("preimage", cfg, out)
    if stage.done():
        log.info("preimage: up to date")
        return
    ds = _private_dataset(cfg)
    rng = np.random.default_rng(cfg.stage_seed("preimage"))
    budget = training.PgdBudget(1.0, 0.01, 300)
    report = {}
    for tag in ("natural", "robust"):
        fe = FeatureExtractor.load(out / f"fe_{tag}.ckpt")
        ratios = []
        for _ in range(pairs):
            a, b = rng.choice(len(ds.images), 2, replace=False)
            res = reconstruction.preimage_attack(ds.images[a], ds.images[b],
                                                 fe, budget)
            ratios.append(res.ratio)
        report[tag] = {"ratios": ratios, "median": float(np.median(ratios))}
        log.info("preimage %s: median ratio %.3e", tag, report[tag]["median"])
    _write_json(out / "preimage.json", report)
    stage.finish(["preimage.json"])


def _run_detect(cfg: ExperimentConfig, out: Path,
                checkpoint: Path | None = None) -> bool:
    """Returns True when the scanned model is anomalous."""
    target = checkpoint or (out / "head.ckpt")
    model = _load_any_model(target)
    scan = detection.scan_model(model)
    try:
        shown = str(Path(target).relative_to(out))
    except ValueError:
        shown = str(target)
    _write_json(out / "detect.json", {
        "checkpoint": shown,
        "anomalous": scan.anomalous,
        "min_entropy": scan.min_entropy,
        "reports": [{"layer": r.layer, "index": r.index, "size": r.size,
                     "entropy": r.entropy, "flagged": r.flagged}
                    for r in scan.reports],
    })
    log.info("detect: %s (min entropy %.3f)",
             "ANOMALOUS" if scan.anomalous else "clean", scan.min_entropy)
    return scan.anomalous


def _load_any_model(path):
    desc, _ = read_checkpoint(path)
    if desc.startswith("spab:"):
        return SpabHead.load(path)
    if desc.startswith("fe:"):
        return FeatureExtractor.load(path)
    if desc.startswith("linear_head:"):
        return LinearHead.load(path)
    raise click.ClickException(f"cannot scan checkpoint kind {desc!r}")


def _run_evaluate(cfg: ExperimentConfig, out: Path,
                  batch_sizes: list[int], seeds: int = 5) -> None:
    fe = FeatureExtractor.load(out / "fe_robust.ckpt")
    head = SpabHead.load(out / "head.ckpt")
    private = _private_dataset(cfg)
    rows = []
    for bsz in batch_sizes:
        rates = []
        for s in range(seeds):
            rng = np.random.default_rng(cfg.stage_seed("evaluate") + 7 * s + bsz)
            images, labels = federation.sample_batch(private, bsz, rng)
            rates.append(training.probe_leakage_rate(fe, head, images, labels))
        rows.append({"batch_size": bsz,
                     "leakage_rate_mean": float(np.mean(rates)),
                     "leakage_rate_std": float(np.std(rates))})
    with open(out / "evaluate.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["batch_size", "leakage_rate_mean",
                                                "leakage_rate_std"])
        writer.writeheader()
        writer.writerows(rows)
    log.info("evaluate: %s", rows)


# ---------------------------------------------------------------------------
# click wiring


@click.group()
def main() -> None:
    """Desk-scale federated-learning privacy laboratory."""
    _setup_logging()


def _stage_command(name, runner):
    @main.command(name)
    @common_options
    def cmd(config_path, seed, jobs, out_dir, _runner=runner):
        try:
            cfg, out = _load_effective_config(config_path, seed, out_dir)
        except (ConfigError, OSError) as exc:
            _error_record(Path(out_dir or "."), type(exc).__name__, str(exc))
            sys.exit(EXIT_BAD_CONFIG)
        try:
            _runner(cfg, out, jobs)
        except FileNotFoundError as exc:
            _error_record(out, "MissingInput", str(exc))
            sys.exit(EXIT_ERROR)
        except (training.TrainingDivergence, RuntimeError, ValueError) as exc:
            _error_record(out, type(exc).__name__, str(exc))
            sys.exit(EXIT_ERROR)
    return cmd


_stage_command("pretrain-at", lambda cfg, out, jobs: _run_pretrain(cfg, out))
_stage_command("spab-train", lambda cfg, out, jobs: _run_spab(cfg, out))
_stage_command("fed-round", lambda cfg, out, jobs: _run_fed_round(cfg, out))
_stage_command("extract", lambda cfg, out, jobs: _run_extract(cfg, out))
_stage_command("reconstruct", _run_reconstruct)
_stage_command("preimage", lambda cfg, out, jobs: _run_preimage(cfg, out))


@main.command("detect")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help="Checkpoint to scan (defaults to the run's trained head).")
def detect_cmd(config_path, seed, jobs, out_dir, checkpoint):
    try:
        cfg, out = _load_effective_config(config_path, seed, out_dir)
    except (ConfigError, OSError) as exc:
        _error_record(Path(out_dir or "."), type(exc).__name__, str(exc))
        sys.exit(EXIT_BAD_CONFIG)
    try:
        anomalous = _run_detect(cfg, out, Path(checkpoint) if checkpoint else None)
    except (FileNotFoundError, click.ClickException, ValueError) as exc:
        _error_record(out, type(exc).__name__, str(exc))
        sys.exit(EXIT_ERROR)
    sys.exit(EXIT_ANOMALOUS if anomalous else EXIT_OK)


@main.command("evaluate")
@common_options
@click.option("--sweep", nargs=2, type=str, default=("batch-size", "8,16,32,64"),
              show_default=True, help="Sweep axis and comma-separated values.")
def evaluate_cmd(config_path, seed, jobs, out_dir, sweep):
    try:
        cfg, out = _load_effective_config(config_path, seed, out_dir)
    except (ConfigError, OSError) as exc:
        _error_record(Path(out_dir or "."), type(exc).__name__, str(exc))
        sys.exit(EXIT_BAD_CONFIG)
    axis, values = sweep
    if axis != "batch-size":
        _error_record(out, "ConfigError", f"unsupported sweep axis {axis!r}")
        sys.exit(EXIT_BAD_CONFIG)
    try:
        batch_sizes = [int(v) for v in values.split(",") if v]
        _run_evaluate(cfg, out, batch_sizes)
    except (FileNotFoundError, ValueError) as exc:
        _error_record(out, type(exc).__name__, str(exc))
        sys.exit(EXIT_ERROR)


@main.command("demo")
@common_options
def demo_cmd(config_path, seed, jobs, out_dir):
    """Run the whole pipeline on the synthetic dataset."""
    try:
        cfg, out = _load_effective_config(config_path, seed, out_dir)
    except (ConfigError, OSError) as exc:
        _error_record(Path(out_dir or "."), type(exc).__name__, str(exc))
        sys.exit(EXIT_BAD_CONFIG)
    try:
        _run_pretrain(cfg, out)
        _run_spab(cfg, out)
        _run_fed_round(cfg, out)
        _run_extract(cfg, out)
        _run_reconstruct(cfg, out, jobs)
        _run_preimage(cfg, out)
        _run_detect(cfg, out)
        _run_evaluate(cfg, out, [8, 16, 32, 64])
    except (training.TrainingDivergence, FileNotFoundError, RuntimeError,
            ValueError, click.ClickException) as exc:
        _error_record(out, type(exc).__name__, str(exc))
        sys.exit(EXIT_ERROR)


if __name__ == "__main__":
    main()
