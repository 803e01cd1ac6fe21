"""Acceptance suite: one test per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -v`` for one pass/fail line per
criterion. Training-based criteria share module-scoped runs: the main
configuration (w1=1, w2=100) is trained for 1500 steps per seed; the
ablation arms run 250 steps each, a budget at which the angle-only and
factual-only objectives have not yet both saturated the 64-item held-out
audit (by ~400 steps both reach fraction 1.0 and the ordering degenerates
to a tie).
"""

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from cfaudio import evaluation as ev
from cfaudio.counterfactual import (
    AugmentConfig,
    PromptPair,
    StubBackend,
    augment_manifest,
    identify_sources,
    intervene,
    validate_counterfactual,
)
from cfaudio.encoders import build_audio_encoder
from cfaudio.frontend import FrontendConfig, log_mel
from cfaudio.audio_io import AudioClip
from cfaudio.losses import (
    LossConfig,
    angle_loss,
    clap_loss,
    factual_consistency_loss,
    gradient_check,
    similarity,
    total_loss,
)
from cfaudio.manifest import load_manifest, save_manifest
from cfaudio.runconfig import run_config_from_mapping
from cfaudio.synthetic import SyntheticCorpusSpec, generate_synthetic_corpus
from cfaudio.trainer import Checkpoint, fit, load_model

import caption_fixtures as fx
from test_losses import (
    as_t,
    oracle_angle,
    oracle_clap,
    oracle_factual,
    oracle_similarity,
    random_unit,
    sample_kink_free,
)

SEEDS = (0, 1, 2)
MAIN_STEPS = 1500
ABLATION_STEPS = 250

TOY_FRONTEND = {
    "sample_rate": 16000, "hop": 320, "window": 1024, "n_mels": 32,
    "f_min": 50.0, "f_max": 7800.0, "segment_seconds": 2.0,
}


def report(criterion: str, detail: str) -> None:
    print(f"[acceptance] {criterion}: PASS ({detail})")


# ==========================================================================
# shared training infrastructure


@dataclass
class TrainedRun:
    audit_fraction: float
    audit_fraction_step0: float
    top1: float
    retrieval_top_k: dict
    zeroshot: float
    model_state: dict
    wall_seconds: float
    out_dir: Path


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    """Training corpus (8 classes x 16 clips) and held-out corpus (8 x 8),
    both re-augmented with rule-oracle counterfactuals."""
    t0 = time.monotonic()
    root = tmp_path_factory.mktemp("acceptance_corpora")
    generate_synthetic_corpus(SyntheticCorpusSpec(8, 16, 2.0, 16000, seed=100), root / "train")
    generate_synthetic_corpus(SyntheticCorpusSpec(8, 8, 2.0, 16000, seed=200), root / "eval")

    for name in ("train", "eval"):
        manifest = load_manifest(root / name / "manifest.jsonl")
        augmented, rpt = augment_manifest(
            manifest, AugmentConfig(generator="rule-oracle", force=True, seed=7)
        )
        assert not rpt["failed"]
        save_manifest(augmented, root / name / "manifest.jsonl")

    labels = json.loads((root / "eval" / "labels.json").read_text())
    return {
        "root": root,
        "train": str(root / "train" / "manifest.jsonl"),
        "eval": load_manifest(root / "eval" / "manifest.jsonl"),
        "labels": labels,
        "setup_seconds": time.monotonic() - t0,
    }


def train_and_measure(corpora, w1, w2, seed, steps, out_root) -> TrainedRun:
    config = run_config_from_mapping(
        {
            "seed": seed,
            "frontend": TOY_FRONTEND,
            "loss": {"w1": w1, "w2": w2},
            "train": {"steps": steps, "batch_size": 16, "optimizer": "adam",
                      "lr": 3e-3, "checkpoint_interval": 10 ** 6},
        }
    ).train_config(corpora["train"])
    out_dir = out_root / f"w1_{w1}_w2_{w2}_seed_{seed}"
    t0 = time.monotonic()
    fit(config, out_dir)
    wall = time.monotonic() - t0

    bundle = load_model(out_dir / "checkpoint_final.pt")
    held_out = corpora["eval"]
    embedded = ev.embed_manifest(bundle, held_out)
    audit = ev.fact_cf_audit(embedded.audio[embedded.row_targets], embedded.fact, embedded.cf)
    retrieval = ev.retrieval_eval(
        embedded.fact, embedded.audio, list(embedded.row_targets), ks=[1, 5, 10, 64]
    )
    labels = corpora["labels"]
    zeroshot = ev.zero_shot_classify(
        embedded.audio,
        [labels["truth"][i] for i in embedded.entry_ids],
        labels["classes"],
        "This is the sound of a {label}",
        bundle.text_cache,
    )

    init_config = run_config_from_mapping(
        {
            "seed": seed,
            "frontend": TOY_FRONTEND,
            "loss": {"w1": w1, "w2": w2},
            "train": {"steps": 0, "batch_size": 16, "optimizer": "adam",
                      "lr": 3e-3, "checkpoint_interval": 10 ** 6},
        }
    ).train_config(corpora["train"])
    fit(init_config, out_root / f"init_{w1}_{w2}_{seed}")
    bundle0 = load_model(out_root / f"init_{w1}_{w2}_{seed}" / "checkpoint_final.pt")
    embedded0 = ev.embed_manifest(bundle0, held_out)
    audit0 = ev.fact_cf_audit(
        embedded0.audio[embedded0.row_targets], embedded0.fact, embedded0.cf
    )

    return TrainedRun(
        audit_fraction=audit.fraction,
        audit_fraction_step0=audit0.fraction,
        top1=retrieval.top_k[1],
        retrieval_top_k=retrieval.top_k,
        zeroshot=zeroshot.accuracy,
        model_state=Checkpoint.load(out_dir / "checkpoint_final.pt").model_state,
        wall_seconds=wall,
        out_dir=out_dir,
    )


@pytest.fixture(scope="module")
def main_runs(corpora, tmp_path_factory):
    out_root = tmp_path_factory.mktemp("main_runs")
    return {
        seed: train_and_measure(corpora, 1.0, 100.0, seed, MAIN_STEPS, out_root)
        for seed in SEEDS
    }


@pytest.fixture(scope="module")
def ablation_runs(corpora, tmp_path_factory):
    out_root = tmp_path_factory.mktemp("ablation_runs")
    t0 = time.monotonic()
    runs = {
        (w1, w2, seed): train_and_measure(corpora, w1, w2, seed, ABLATION_STEPS, out_root)
        for (w1, w2) in ((1.0, 0.0), (0.0, 100.0), (0.0, 0.0))
        for seed in SEEDS
    }
    runs["wall_seconds"] = time.monotonic() - t0
    return runs


# ==========================================================================
# criterion 1: loss oracle equivalence


def test_c01_loss_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(1001)
    for _ in range(100):
        n, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        E_t, E_a, E_cf = (random_unit(rng, n, d) for _ in range(3))
        tau = float(rng.uniform(0.5, 5.0))
        mu = float(rng.uniform(0.0, 0.5))

        C = oracle_similarity(E_t, E_a, tau)
        ours_C = similarity(as_t(E_t), as_t(E_a), tau).C.numpy()
        assert np.abs(ours_C - C).max() < 1e-10

        assert abs(float(clap_loss(as_t(C))) - oracle_clap(C)) < 1e-10
        assert (
            abs(float(angle_loss(as_t(E_a), as_t(E_t), as_t(E_cf), mu))
                - oracle_angle(E_a, E_t, E_cf, mu)) < 1e-10
        )
        assert (
            abs(float(factual_consistency_loss(as_t(E_a), as_t(E_t)))
                - oracle_factual(E_a, E_t)) < 1e-10
        )
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    report("criterion 1", f"100 instances x 3 losses within 1e-10 in {elapsed:.1f}s")


# ==========================================================================
# criterion 2: gradient checks


def test_c02_gradient_checks():
    t0 = time.monotonic()
    rng = np.random.default_rng(2002)
    checked = 0

    for _ in range(8):
        n, d = int(rng.integers(2, 7)), int(rng.integers(3, 12))
        E_a, E_t, E_cf = sample_kink_free(rng, n, d, mu=0.2)
        err = gradient_check(
            lambda a, t, c: angle_loss(a, t, c, mu=0.2),
            [as_t(E_a), as_t(E_t), as_t(E_cf)],
            eps=1e-6,
        )
        assert err < 1e-5
        checked += 1

    for _ in range(6):
        n, d = int(rng.integers(2, 7)), int(rng.integers(3, 12))
        err = gradient_check(
            factual_consistency_loss,
            [as_t(rng.standard_normal((n, d))), as_t(rng.standard_normal((n, d)))],
            eps=1e-6,
        )
        assert err < 1e-5
        checked += 1

    for _ in range(4):
        n, d = int(rng.integers(2, 7)), int(rng.integers(3, 12))
        err = gradient_check(
            lambda t, a: clap_loss(similarity(t, a, tau=2.5)),
            [as_t(random_unit(rng, n, d)), as_t(random_unit(rng, n, d))],
            eps=1e-6,
        )
        assert err < 1e-5
        checked += 1

    config = LossConfig(tau=2.0, w0=1.0, w1=1.0, w2=100.0, include_clap_term=True)
    for _ in range(2):
        n, d = int(rng.integers(2, 6)), int(rng.integers(3, 10))
        E_a, E_t, E_cf = sample_kink_free(rng, n, d, mu=config.mu)
        err = gradient_check(
            lambda a, t, c: total_loss(a, t, config, E_t_cf=c).total,
            [as_t(E_a), as_t(E_t), as_t(E_cf)],
            eps=1e-6,
        )
        assert err < 1e-5
        checked += 1

    elapsed = time.monotonic() - t0
    assert checked >= 20
    assert elapsed < 60.0
    report("criterion 2", f"{checked} configurations, max rel err < 1e-5 in {elapsed:.1f}s")


# ==========================================================================
# criterion 3: trivial identities


def test_c03_trivial_identities():
    rng = np.random.default_rng(3003)
    E = as_t(random_unit(rng, 4, 8))
    T = as_t(random_unit(rng, 4, 8))
    assert float(angle_loss(E, T, T, mu=0.2)) == 0.2
    assert float(factual_consistency_loss(E, E)) == 0.0
    assert abs(float(clap_loss(torch.zeros(4, 4, dtype=torch.float64))) - math.log(4)) < 1e-10
    report("criterion 3", "angle margin, factual zero, ln(4) identities hold")


# ==========================================================================
# criterion 4: frontend shape law and determinism


def test_c04_frontend_shape_and_determinism():
    t0 = time.monotonic()
    config = FrontendConfig()
    rng = np.random.default_rng(4004)
    x = 0.3 * rng.standard_normal(320000)
    clip = AudioClip(samples=x, sample_rate=32000)

    first = log_mel(clip, config)
    assert first.shape == (1001, 64)
    second = log_mel(AudioClip(samples=x.copy(), sample_rate=32000), config)
    assert np.array_equal(first.frames, second.frames)

    c = 2.5
    scaled = log_mel(AudioClip(samples=c * x, sample_rate=32000), config)
    np.testing.assert_allclose(scaled.frames - first.frames, 2.0 * np.log(c), atol=1e-6)

    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    report("criterion 4", f"1001x64, bit-identical, 2 ln(c) shift in {elapsed:.1f}s")


# ==========================================================================
# criterion 5: chance calibration of the audit


def test_c05_audit_chance_calibration():
    t0 = time.monotonic()
    n, d = 1044, 16
    in_band = 0
    for seed in range(100):
        rng = np.random.default_rng(50_000 + seed)
        audio, fact, cf = (random_unit(rng, n, d) for _ in range(3))
        fraction = ev.fact_cf_audit(audio, fact, cf).fraction
        if 0.42 <= fraction <= 0.58:
            in_band += 1
    elapsed = time.monotonic() - t0
    assert in_band >= 95
    assert elapsed < 30.0
    report("criterion 5", f"{in_band}/100 seeds inside [0.42, 0.58] in {elapsed:.1f}s")


# ==========================================================================
# criterion 6: end-to-end counterfactual separation


def test_c06_end_to_end_separation(corpora, main_runs):
    total_wall = corpora["setup_seconds"] + sum(r.wall_seconds for r in main_runs.values())
    for seed, run in main_runs.items():
        assert run.audit_fraction >= 0.9, f"seed {seed}: audit {run.audit_fraction}"
        assert run.audit_fraction > run.audit_fraction_step0, (
            f"seed {seed}: {run.audit_fraction} vs step-0 {run.audit_fraction_step0}"
        )
    assert total_wall < 300.0

    # exported embedding geometry reflects the separation
    run0 = main_runs[SEEDS[0]]
    bundle = load_model(run0.out_dir / "checkpoint_final.pt")
    dump = run0.out_dir / "embeddings.jsonl"
    ev.export_embeddings(bundle, corpora["eval"], dump)
    ids, roles, vectors = ev.load_embedding_dump(dump)
    by_role = {}
    for role in ("audio", "fact", "counterfactual"):
        members = [v for r, v in zip(roles, vectors) if r == role]
        by_role[role] = np.asarray(members)
    d_fact = np.linalg.norm(by_role["audio"] - by_role["fact"], axis=1).mean()
    d_cf = np.linalg.norm(by_role["audio"] - by_role["counterfactual"], axis=1).mean()
    assert d_fact < d_cf

    # held-out audio clusters by class after training
    embedded = ev.embed_manifest(bundle, corpora["eval"])
    truth = corpora["labels"]["truth"]
    classes = np.asarray([truth[i] for i in embedded.entry_ids])
    sims = embedded.audio @ embedded.audio.T
    same = classes[:, None] == classes[None, :]
    off_diag = ~np.eye(len(classes), dtype=bool)
    within = sims[same & off_diag].mean()
    between = sims[~same].mean()
    assert within > between

    # the angle term itself decreases over training
    metrics = [
        json.loads(line)
        for line in (run0.out_dir / "metrics.jsonl").read_text().splitlines()
    ]
    late = float(np.mean([m["angle"] for m in metrics[-50:]]))
    assert late < metrics[0]["angle"]

    fractions = [f"{main_runs[s].audit_fraction:.3f}" for s in SEEDS]
    report("criterion 6", f"audit fractions {fractions} in {total_wall:.0f}s")


# ==========================================================================
# criterion 7: ablation trend reproduction


def test_c07_ablation_trends(ablation_runs):
    angle_wins = sum(
        ablation_runs[(1.0, 0.0, s)].audit_fraction
        > ablation_runs[(0.0, 100.0, s)].audit_fraction
        for s in SEEDS
    )
    assert angle_wins >= 2, f"angle-only audit ordering held in only {angle_wins}/3 seeds"

    retrieval_wins = sum(
        ablation_runs[(0.0, 100.0, s)].top1 >= ablation_runs[(1.0, 0.0, s)].top1
        for s in SEEDS
    )
    assert retrieval_wins >= 2

    chance_ok = 0
    for seed in SEEDS:
        run = ablation_runs[(0.0, 0.0, seed)]
        spec = run_config_from_mapping(
            {"seed": seed, "frontend": TOY_FRONTEND}
        ).train_config("unused").audio_encoder
        fresh = build_audio_encoder(spec)
        unchanged = all(
            torch.equal(param, run.model_state[name])
            for name, param in fresh.state_dict().items()
        )
        assert unchanged, f"seed {seed}: parameters moved with all weights zero"

        n_queries = 64
        successes = round(run.top1 * n_queries)
        lo = stats.binom.ppf(0.025, n_queries, 1 / 64)
        hi = stats.binom.ppf(0.975, n_queries, 1 / 64)
        if lo <= successes <= hi:
            chance_ok += 1
    assert chance_ok >= 2

    assert ablation_runs["wall_seconds"] < 900.0
    detail = (
        f"audit ordering {angle_wins}/3, retrieval ordering {retrieval_wins}/3, "
        f"chance calibration {chance_ok}/3, {ablation_runs['wall_seconds']:.0f}s"
    )
    report("criterion 7", detail)


# ==========================================================================
# criterion 8: retrieval sanity


def test_c08_retrieval_sanity(main_runs):
    for seed, run in main_runs.items():
        assert run.top1 >= 0.8, f"seed {seed}: top-1 {run.top1}"
        values = [run.retrieval_top_k[k] for k in sorted(run.retrieval_top_k)]
        assert values == sorted(values), "top-k accuracy must be monotone in k"
        assert run.retrieval_top_k[64] == 1.0
    report("criterion 8", f"top-1 {[f'{main_runs[s].top1:.3f}' for s in SEEDS]} on 64-item corpus")


# ==========================================================================
# criterion 9: zero-shot trend


def test_c09_zero_shot(main_runs):
    for seed, run in main_runs.items():
        assert run.zeroshot >= 0.8, f"seed {seed}: zero-shot accuracy {run.zeroshot}"
    report("criterion 9", f"accuracies {[f'{main_runs[s].zeroshot:.3f}' for s in SEEDS]}")


# ==========================================================================
# criterion 10: counterfactual pipeline fixtures


def test_c10_counterfactual_fixtures():
    t0 = time.monotonic()
    prompts = PromptPair.default()
    for fixture in fx.FIXTURES:
        backend = StubBackend([fx.identify_response(fixture), fx.intervene_response(fixture)])
        sources = identify_sources(fixture["caption"], backend, prompts)
        record = intervene(fixture["caption"], sources, backend, prompts)
        assert record.validation_passed
        assert record.counterfactual == fixture["counterfactual"]

    caption = "A gun is loaded"
    passed, reason = validate_counterfactual(caption, caption, sources)
    assert not passed and reason == "identity output"
    passed, reason = validate_counterfactual(caption, "   ", sources)
    assert not passed and reason == "empty output"

    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    report("criterion 10", f"8/8 canonical pairs verbatim in {elapsed:.1f}s")


# ==========================================================================
# criterion 11: determinism and resume


def test_c11_determinism_and_resume(corpora, tmp_path_factory):
    out = tmp_path_factory.mktemp("determinism")
    config = run_config_from_mapping(
        {
            "seed": 17,
            "frontend": TOY_FRONTEND,
            "loss": {"w1": 1.0, "w2": 100.0},
            "train": {"steps": 60, "batch_size": 16, "optimizer": "adam",
                      "lr": 3e-3, "checkpoint_interval": 30},
        }
    ).train_config(corpora["train"])

    fit(config, out / "a")
    fit(config, out / "b")
    metrics_a = (out / "a" / "metrics.jsonl").read_bytes()
    assert metrics_a == (out / "b" / "metrics.jsonl").read_bytes()

    resumed_dir = out / "resumed"
    resumed_dir.mkdir()
    final = fit(config, resumed_dir, resume_from=out / "a" / "checkpoint_000030.pt")
    tail_a = (out / "a" / "metrics.jsonl").read_text().splitlines()[30:]
    tail_r = (resumed_dir / "metrics.jsonl").read_text().splitlines()
    assert tail_a == tail_r

    uninterrupted = Checkpoint.load(out / "a" / "checkpoint_final.pt")
    for name, param in uninterrupted.model_state.items():
        assert torch.equal(param, final.model_state[name])
    report("criterion 11", "bit-identical metrics and exact resume at step 30")
