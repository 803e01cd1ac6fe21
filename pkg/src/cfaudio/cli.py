"""Command-line entry point: ingest, cfgen, frontend, train, eval, pipeline."""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from . import counterfactual as cf
from . import evaluation as ev
from .audio_io import read_wav
from .errors import CfAudioError, DependencyError
from .frontend import log_mel
from .manifest import load_manifest, save_manifest
from .runconfig import RunConfig, load_run_config
from .synthetic import LABELS_NAME, MANIFEST_NAME, SyntheticCorpusSpec, generate_synthetic_corpus
from .trainer import FINAL_CHECKPOINT_NAME, fit, load_model
from .util import file_digest


@click.group()
def main():
    """Counterfactual contrastive audio-text learning toolkit."""


def _fail(exc: Exception) -> None:
    raise click.ClickException(str(exc))


# ----------------------------------------------------------------- ingest


@main.group()
def ingest():
    """Dataset loading and synthetic corpus generation."""


@ingest.command("validate")
@click.argument("manifest", type=click.Path(exists=True))
def ingest_validate(manifest):
    """Validate a manifest file and report its contents."""
    try:
        loaded = load_manifest(manifest)
    except CfAudioError as exc:
        _fail(exc)
    n_captions = sum(len(e.captions) for e in loaded.entries)
    n_cf = sum(len(e.counterfactuals) for e in loaded.entries)
    click.echo(
        f"ok: {len(loaded.entries)} entries, {n_captions} captions, "
        f"{n_cf} counterfactuals (version {loaded.version})"
    )


@ingest.command("synth")
@click.option("--classes", default=8, show_default=True)
@click.option("--clips", default=16, show_default=True, help="Clips per class.")
@click.option("--seconds", default=2.0, show_default=True)
@click.option("--sample-rate", default=16000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def ingest_synth(classes, clips, seconds, sample_rate, seed, out):
    """Generate a deterministic synthetic audio-caption corpus."""
    spec = SyntheticCorpusSpec(
        n_classes=classes,
        clips_per_class=clips,
        clip_seconds=seconds,
        sample_rate=sample_rate,
        seed=seed,
    )
    try:
        manifest = generate_synthetic_corpus(spec, out)
    except CfAudioError as exc:
        _fail(exc)
    click.echo(f"wrote {len(manifest.entries)} clips under {out}")


# ------------------------------------------------------------------ cfgen


@main.group()
def cfgen():
    """Counterfactual caption generation."""


def _build_backend(config: RunConfig) -> cf.LlmBackend:
    if not config.backend.base_url or not config.backend.model_id:
        raise click.ClickException(
            "llm generator needs backend.base_url and backend.model_id in the config"
        )
    return cf.HttpChatBackend(
        base_url=config.backend.base_url,
        model_id=config.backend.model_id,
        api_key_env=config.backend.api_key_env,
        timeout=config.backend.timeout,
        min_interval=config.backend.min_interval,
    )


@cfgen.command("augment")
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--backend", "generator", type=click.Choice(["llm", "oracle"]), default="oracle",
              show_default=True)
@click.option("--policy", type=click.Choice(sorted(cf.POLICY_CLAUSES)), default="any",
              show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True, help="Regenerate entries that already have counterfactuals.")
@click.option("--cache", "cache_dir", type=click.Path(), default=None,
              help="Response cache directory (llm backend).")
@click.option("--seed", default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Run config providing backend settings.")
def cfgen_augment(manifest, generator, policy, out, force, cache_dir, seed, config_path):
    """Fill counterfactual captions into a manifest; write a sidecar report."""
    try:
        loaded = load_manifest(manifest)
        aug_config = cf.AugmentConfig(
            generator="rule-oracle" if generator == "oracle" else "llm",
            policy=policy,
            force=force,
            seed=seed,
        )
        if aug_config.generator == "llm":
            run_config = load_run_config(config_path) if config_path else RunConfig()
            aug_config.backend = _build_backend(run_config)
            aug_config.prompts = cf.PromptPair.default(policy)
            if cache_dir:
                aug_config.cache = cf.ResponseCache(cache_dir)
        augmented, report = cf.augment_manifest(loaded, aug_config)
    except CfAudioError as exc:
        _fail(exc)
    save_manifest(augmented, out)
    sidecar = Path(out).with_suffix(Path(out).suffix + ".report.json")
    sidecar.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    click.echo(
        f"augmented {len(report['augmented'])}, skipped {len(report['skipped'])}, "
        f"failed {len(report['failed'])} -> {out} (report: {sidecar})"
    )
    if report["failed"]:
        sys.exit(1)


@cfgen.command("preview")
@click.argument("caption")
@click.option("--seed", default=0, show_default=True)
def cfgen_preview(caption, seed):
    """Show the rule-oracle counterfactual for one caption."""
    try:
        record = cf.rule_oracle_counterfactual(caption, seed=seed)
    except CfAudioError as exc:
        _fail(exc)
    click.echo(f"caption:        {record.caption}")
    click.echo(f"counterfactual: {record.counterfactual}")
    click.echo(f"altered span:   {record.sources.sources[0].span}")
    status = "passed" if record.validation_passed else f"failed ({record.failure_reason})"
    click.echo(f"validation:     {status}")


# --------------------------------------------------------------- frontend


@main.group()
def frontend():
    """Feature extraction inspection."""


@frontend.command("inspect")
@click.argument("wav", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def frontend_inspect(wav, config_path):
    """Print the log-Mel shape and summary statistics of a WAV file."""
    config = load_run_config(config_path).frontend if config_path else RunConfig().frontend
    try:
        clip = read_wav(wav)
        spec = log_mel(clip, config)
    except CfAudioError as exc:
        _fail(exc)
    frames = spec.frames
    click.echo(f"clip: {clip.duration:.2f} s at {clip.sample_rate} Hz")
    click.echo(f"log-mel shape: {frames.shape[0]} frames x {frames.shape[1]} mels")
    click.echo(
        f"values: min {frames.min():.3f}  max {frames.max():.3f}  "
        f"mean {frames.mean():.3f}  frame rate {spec.frame_rate:.2f}/s"
    )


# ------------------------------------------------------------------ train


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--manifest", default=None, type=click.Path(exists=True),
              help="Override the manifest path in the config.")
@click.option("--resume", "resume_path", default=None, type=click.Path(exists=True))
def train_command(config_path, out_dir, manifest, resume_path):
    """Train the audio tower per a run config."""
    run_config = load_run_config(config_path)
    try:
        checkpoint = fit(run_config.train_config(manifest), out_dir, resume_from=resume_path)
    except CfAudioError as exc:
        _fail(exc)
    click.echo(f"finished at step {checkpoint.step}; checkpoint in {out_dir}")


# ------------------------------------------------------------------- eval


@main.group("eval")
def eval_group():
    """Evaluation protocols over a trained checkpoint."""


def _load_for_eval(checkpoint, manifest):
    bundle = load_model(checkpoint)
    loaded = load_manifest(manifest)
    return bundle, loaded


def _write_report(payload: dict, out: str | None) -> None:
    if out:
        Path(out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


@eval_group.command("retrieval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--ks", default="1,10", show_default=True)
@click.option("--all-captions", is_flag=True, help="One query per caption instead of per clip.")
@click.option("--out", default=None, type=click.Path())
def eval_retrieval(checkpoint, manifest, ks, all_captions, out):
    """Text-to-audio retrieval accuracy at the given cutoffs."""
    try:
        bundle, loaded = _load_for_eval(checkpoint, manifest)
        embedded = ev.embed_manifest(bundle, loaded, all_captions=all_captions)
        cutoffs = [int(k) for k in ks.split(",") if k.strip()]
        report = ev.retrieval_eval(
            embedded.fact, embedded.audio, list(embedded.row_targets), cutoffs
        )
    except CfAudioError as exc:
        _fail(exc)
    for k in sorted(report.top_k):
        click.echo(f"top-{k}: {report.top_k[k]:.4f}")
    click.echo(f"queries: {report.n_queries} ({report.tie_policy})")
    _write_report(
        {"top_k": {str(k): v for k, v in report.top_k.items()}, "n_queries": report.n_queries},
        out,
    )


@eval_group.command("zeroshot")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--labels", "labels_path", required=True, type=click.Path(exists=True),
              help='JSON file: {"classes": [...], "truth": {entry_id: class}}.')
@click.option("--template", default="This is the sound of a {label}", show_default=True)
@click.option("--out", default=None, type=click.Path())
def eval_zeroshot(checkpoint, manifest, labels_path, template, out):
    """Zero-shot classification with templated class labels."""
    try:
        bundle, loaded = _load_for_eval(checkpoint, manifest)
        labels_blob = json.loads(Path(labels_path).read_text(encoding="utf-8"))
        classes = labels_blob["classes"]
        truth = labels_blob["truth"]
        embedded = ev.embed_manifest(bundle, loaded)
        true_labels = [truth[entry_id] for entry_id in embedded.entry_ids]
        report = ev.zero_shot_classify(
            embedded.audio, true_labels, classes, template, bundle.text_cache
        )
    except (CfAudioError, KeyError) as exc:
        _fail(exc)
    click.echo(f"accuracy: {report.accuracy:.4f} over {len(classes)} classes")
    for label, acc in sorted(report.per_class.items()):
        click.echo(f"  {label}: {acc:.4f}")
    _write_report({"accuracy": report.accuracy, "per_class": report.per_class}, out)


@eval_group.command("audit")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--all-captions", is_flag=True)
@click.option("--out", default=None, type=click.Path())
def eval_audit(checkpoint, manifest, all_captions, out):
    """Count items where audio is closer to its factual caption than to its
    counterfactual."""
    try:
        bundle, loaded = _load_for_eval(checkpoint, manifest)
        embedded = ev.embed_manifest(bundle, loaded, all_captions=all_captions)
        if embedded.cf is None:
            raise DependencyError("manifest has entries without counterfactuals")
        report = ev.fact_cf_audit(
            embedded.audio[embedded.row_targets], embedded.fact, embedded.cf
        )
    except CfAudioError as exc:
        _fail(exc)
    click.echo(
        f"wins: {report.win_count} / {report.n} = {report.fraction:.4f} "
        f"(95% CI [{report.ci_low:.4f}, {report.ci_high:.4f}], ties {report.tie_count})"
    )
    _write_report(
        {
            "win_count": report.win_count,
            "n": report.n,
            "fraction": report.fraction,
            "ci": [report.ci_low, report.ci_high],
            "ties": report.tie_count,
        },
        out,
    )


@eval_group.command("export")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--plot", "plot_path", default=None, type=click.Path())
@click.option("--method", type=click.Choice(["tsne", "pca"]), default="tsne", show_default=True)
@click.option("--seed", default=0, show_default=True)
def eval_export(checkpoint, manifest, out, plot_path, method, seed):
    """Dump aligned {id, role, vector} records; optionally plot a 2D projection."""
    try:
        bundle, loaded = _load_for_eval(checkpoint, manifest)
        count = ev.export_embeddings(bundle, loaded, out)
    except CfAudioError as exc:
        _fail(exc)
    click.echo(f"wrote {count} records to {out}")
    if plot_path:
        _, roles, vectors = ev.load_embedding_dump(out)
        coords = ev.project_2d(vectors, method=method, seed=seed)
        ev.save_projection_plot(coords, roles, plot_path)
        click.echo(f"wrote projection plot to {plot_path}")


# --------------------------------------------------------------- pipeline


def _provenance(workdir: Path, stage: str, config_hash: str, inputs: list[str], outputs: list[str]):
    record = {
        "stage": stage,
        "config_hash": config_hash,
        "inputs": {p: file_digest(p) for p in inputs if Path(p).is_file()},
        "outputs": outputs,
        "timestamp": time.time(),
    }
    with open(workdir / "provenance.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")


@main.command("pipeline")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--stages", default="synth,augment,train,eval", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def pipeline(config_path, stages, out_dir):
    """Run pipeline stages in order: synth, augment, train, eval."""
    run_config = load_run_config(config_path)
    config_hash = run_config.digest()
    workdir = Path(out_dir)
    workdir.mkdir(parents=True, exist_ok=True)
    wanted = [s.strip() for s in stages.split(",") if s.strip()]
    order = ["synth", "augment", "train", "eval"]
    unknown = set(wanted) - set(order)
    if unknown:
        raise click.ClickException(f"unknown stage(s): {', '.join(sorted(unknown))}")

    corpus_manifest = workdir / "corpus" / MANIFEST_NAME
    eval_manifest = workdir / "corpus_eval" / MANIFEST_NAME
    augmented_manifest = workdir / "augmented.jsonl"
    train_dir = workdir / "train"
    checkpoint_path = train_dir / FINAL_CHECKPOINT_NAME

    def train_source() -> str:
        if augmented_manifest.is_file():
            return str(augmented_manifest)
        if run_config.train.manifest:
            return run_config.train.manifest
        if corpus_manifest.is_file():
            return str(corpus_manifest)
        raise DependencyError(f"a training manifest is required; missing {augmented_manifest}")

    try:
        for stage in (s for s in order if s in wanted):
            if stage == "synth":
                generate_synthetic_corpus(run_config.synth_spec(), workdir / "corpus")
                generate_synthetic_corpus(run_config.synth_spec(held_out=True), workdir / "corpus_eval")
                _provenance(workdir, "synth", config_hash, [],
                            [str(corpus_manifest), str(eval_manifest)])
                click.echo(f"[synth] wrote {corpus_manifest} and {eval_manifest}")

            elif stage == "augment":
                source = run_config.train.manifest or str(corpus_manifest)
                if not Path(source).is_file():
                    raise DependencyError(f"augment stage needs a manifest; missing {source}")
                loaded = load_manifest(source)
                aug_config = cf.AugmentConfig(
                    generator=run_config.augment.generator,
                    policy=run_config.augment.policy,
                    force=run_config.augment.force,
                    seed=run_config.augment_seed(),
                )
                if aug_config.generator == "llm":
                    aug_config.backend = _build_backend(run_config)
                    aug_config.prompts = cf.PromptPair.default(run_config.augment.policy)
                    aug_config.cache = cf.ResponseCache(workdir / "llm_cache")
                augmented, report = cf.augment_manifest(loaded, aug_config)
                save_manifest(augmented, augmented_manifest)
                (workdir / "augmented.report.json").write_text(
                    json.dumps(report, indent=2) + "\n", encoding="utf-8"
                )
                _provenance(workdir, "augment", config_hash, [source], [str(augmented_manifest)])
                click.echo(f"[augment] {len(report['augmented'])} generated, "
                           f"{len(report['skipped'])} skipped, {len(report['failed'])} failed")
                if report["failed"]:
                    raise CfAudioError(f"{len(report['failed'])} entries failed augmentation")

            elif stage == "train":
                source = train_source()
                checkpoint = fit(run_config.train_config(source), train_dir)
                _provenance(workdir, "train", config_hash, [source], [str(checkpoint_path)])
                click.echo(f"[train] {checkpoint.step} steps -> {checkpoint_path}")

            elif stage == "eval":
                if not checkpoint_path.is_file():
                    raise DependencyError(
                        f"eval stage needs a trained checkpoint; missing {checkpoint_path}"
                    )
                source = eval_manifest if eval_manifest.is_file() else (
                    augmented_manifest if augmented_manifest.is_file() else corpus_manifest
                )
                if not Path(source).is_file():
                    raise DependencyError(f"eval stage needs a manifest; missing {source}")
                bundle = load_model(checkpoint_path)
                expected = run_config.train_config(train_source()).digest()
                if bundle.config_hash != expected:
                    raise DependencyError(
                        f"checkpoint {checkpoint_path} was trained under a different "
                        f"configuration (hash {bundle.config_hash[:12]}, expected {expected[:12]})"
                    )
                loaded = load_manifest(source)
                eval_dir = workdir / "eval"
                eval_dir.mkdir(exist_ok=True)
                embedded = ev.embed_manifest(bundle, loaded,
                                             all_captions=run_config.eval.all_captions)
                outputs = []

                report = ev.retrieval_eval(
                    embedded.fact, embedded.audio, list(embedded.row_targets),
                    list(run_config.eval.ks),
                )
                path = eval_dir / "retrieval.json"
                path.write_text(json.dumps(
                    {"top_k": {str(k): v for k, v in report.top_k.items()},
                     "n_queries": report.n_queries}, indent=2) + "\n", encoding="utf-8")
                outputs.append(str(path))
                click.echo("[eval] retrieval " + ", ".join(
                    f"top-{k}: {v:.4f}" for k, v in sorted(report.top_k.items())))

                labels_path = Path(source).parent / LABELS_NAME
                if labels_path.is_file():
                    blob = json.loads(labels_path.read_text(encoding="utf-8"))
                    true_labels = [blob["truth"][i] for i in embedded.entry_ids]
                    zs = ev.zero_shot_classify(
                        embedded.audio, true_labels, blob["classes"],
                        run_config.eval.template, bundle.text_cache,
                    )
                    path = eval_dir / "zeroshot.json"
                    path.write_text(json.dumps(
                        {"accuracy": zs.accuracy, "per_class": zs.per_class},
                        indent=2) + "\n", encoding="utf-8")
                    outputs.append(str(path))
                    click.echo(f"[eval] zero-shot accuracy {zs.accuracy:.4f}")

                if embedded.cf is not None:
                    audit = ev.fact_cf_audit(
                        embedded.audio[embedded.row_targets], embedded.fact, embedded.cf
                    )
                    path = eval_dir / "audit.json"
                    path.write_text(json.dumps(
                        {"win_count": audit.win_count, "n": audit.n,
                         "fraction": audit.fraction,
                         "ci": [audit.ci_low, audit.ci_high]}, indent=2) + "\n",
                        encoding="utf-8")
                    outputs.append(str(path))
                    click.echo(f"[eval] audit {audit.win_count}/{audit.n} = {audit.fraction:.4f}")

                dump_path = eval_dir / "embeddings.jsonl"
                ev.export_embeddings(bundle, loaded, dump_path, expected_hash=expected)
                _, roles, vectors = ev.load_embedding_dump(dump_path)
                coords = ev.project_2d(
                    vectors, method=run_config.eval.projection,
                    seed=run_config.projection_seed(),
                )
                plot_path = eval_dir / "projection.png"
                ev.save_projection_plot(coords, roles, plot_path)
                outputs += [str(dump_path), str(plot_path)]
                _provenance(workdir, "eval", config_hash, [str(source)], outputs)

    except (CfAudioError, click.ClickException) as exc:
        raise click.ClickException(str(exc))
    click.echo(f"pipeline complete (config hash {config_hash[:12]})")


if __name__ == "__main__":
    main()
