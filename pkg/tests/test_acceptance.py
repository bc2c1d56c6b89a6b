"""Acceptance suite: one test per criterion, each reported as a pass/fail line.

The pretraining runs are shared: the ten full-loss runs of criterion 6 also
provide the full-loss encoders for the ordering checks of criterion 7.
"""
import math
import time

import numpy as np
import pytest
import torch

import oracles
from acceptance_log import criterion, note
from multisample import experiments, losses, probe
from multisample.dsp import pitch_shift
from multisample.losses import BILINEAR, COSINE, LossWeights
from multisample.model import EncoderConfig, HeadOutputs, encode, heads, init_params, state_hash
from multisample.pretrain import TrainConfig, epoch_means, train
from multisample.sampling import FeatureBank
from multisample.synthgen import SynthSpec, gen_mixed_corpus, gen_tone_bank

N_LOSS_SEEDS = 10
ORDERING_SEEDS = (0, 1, 2)
DESK = TrainConfig(epochs=20, batch_size=32)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


# -- 1. loss oracles --------------------------------------------------------------


def small_instance(rng):
    B, d, T = int(rng.integers(2, 5)), int(rng.integers(2, 9)), int(rng.integers(2, 6))
    t = lambda *s: torch.from_numpy(rng.standard_normal(s))
    return B, d, T, dict(
        za=t(B, d), zp=t(B, d), zs=t(B, d), W=t(d, d), Wf=t(d, d),
        fx=t(B, d, T), fp=t(B, d, T), fs=t(B, d, T), pa=t(B, T), ps=t(B, T),
        a=torch.from_numpy(rng.uniform(0.8, 1.2, B)),
    )


frames = lambda z: [z[b].T.tolist() for b in range(z.shape[0])]


@criterion(1, "loss oracle equivalence, 100+ instances per loss, abs tol 1e-10")
def test_loss_oracles(float64):
    t0 = time.time()
    rng = np.random.default_rng(1234)
    worst = 0.0
    for _ in range(100):
        B, d, T, v = small_instance(rng)
        m = int(rng.integers(0, T // 2 + 1))
        alpha, beta = rng.uniform(0, 2, 2)
        sim = COSINE if rng.random() < 0.3 else BILINEAR
        W = v["W"] if sim is BILINEAR else None
        Wf = v["Wf"] if sim is BILINEAR else None
        Wl = lambda w: None if w is None else w.tolist()

        got = losses.loss_clip(v["za"], v["zp"], sim, W).item()
        want = oracles.clip_loss(v["za"].tolist(), v["zp"].tolist(), Wl(W))
        worst = max(worst, abs(got - want))

        got = losses.loss_frame(v["fx"], v["fp"], v["fs"], m, Wf, sim).item()
        want = oracles.frame_loss(frames(v["fx"]), frames(v["fp"]), frames(v["fs"]), m, Wl(Wf))
        worst = max(worst, abs(got - want))

        got = losses.loss_pitch(v["ps"], v["pa"], v["a"]).item()
        want = oracles.pitch_loss(v["ps"].tolist(), v["pa"].tolist(), v["a"].tolist())
        worst = max(worst, abs(got - want))

        anchor = HeadOutputs(v["za"], v["fx"], v["pa"])
        positive = HeadOutputs(v["zp"], v["fp"], v["pa"])
        shifted = HeadOutputs(v["zs"], v["fs"], v["ps"])
        got = losses.loss_total(anchor, positive, shifted, v["a"], W, Wf,
                                LossWeights(alpha, beta), sim, m)[0].item()
        want = oracles.total_loss(v["za"].tolist(), v["zp"].tolist(), frames(v["fx"]), frames(v["fp"]),
                                  frames(v["fs"]), v["ps"].tolist(), v["pa"].tolist(), v["a"].tolist(),
                                  Wl(W), Wl(Wf), alpha, beta, m)
        worst = max(worst, abs(got - want))
    elapsed = time.time() - t0
    note(1, f"max abs diff {worst:.1e}, {elapsed:.1f} s")
    assert worst <= 1e-10 and elapsed < 60


# -- 2. gradients -----------------------------------------------------------------


def _fd_relative_error(f, tensors, step=1e-5):
    for x in tensors:
        x.requires_grad_(True)
    analytic = torch.autograd.grad(f(), tensors)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(tensors, analytic):
            flat, num = x.view(-1), torch.zeros(x.numel(), dtype=x.dtype)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                num[i] = (up - down) / (2 * step)
            den = max(g.norm().item(), num.norm().item(), 1e-12)
            worst = max(worst, (g.reshape(-1) - num).norm().item() / den)
    return worst


@criterion(2, "finite-difference gradient checks, 20 instances, rel err < 1e-4")
def test_gradient_checks(float64):
    t0 = time.time()
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(20):
        _, _, _, v = small_instance(rng)
        worst = max(worst, _fd_relative_error(
            lambda: losses.loss_clip(v["za"], v["zp"], BILINEAR, v["W"]), [v["za"], v["zp"], v["W"]]))
        worst = max(worst, _fd_relative_error(
            lambda: losses.loss_frame(v["fx"], v["fp"], v["fs"], 0, v["Wf"]), [v["fx"], v["fp"], v["fs"], v["Wf"]]))
        worst = max(worst, _fd_relative_error(
            lambda: losses.loss_pitch(v["ps"], v["pa"], v["a"]), [v["ps"], v["pa"]]))

        def total():
            return losses.loss_total(HeadOutputs(v["za"], v["fx"], v["pa"]), HeadOutputs(v["zp"], v["fp"], v["pa"]),
                                     HeadOutputs(v["zs"], v["fs"], v["ps"]), v["a"], v["W"], v["Wf"])[0]

        worst = max(worst, _fd_relative_error(
            total, [v["za"], v["zp"], v["fx"], v["fp"], v["fs"], v["pa"], v["ps"], v["W"], v["Wf"]]))
    elapsed = time.time() - t0
    note(2, f"max rel err {worst:.1e}, {elapsed:.1f} s")
    assert worst < 1e-4 and elapsed < 120


# -- 3. similarity facts ----------------------------------------------------------


@criterion(3, "similarity unit facts")
def test_similarity_facts(float64):
    u = torch.tensor([0.3, -1.2, 2.0, 0.7])
    v = torch.tensor([1.1, 0.4, -0.5, 0.9])
    assert losses.sim_cosine(u, u, 0.2).item() == 5.0
    assert losses.sim_bilinear(u, v, torch.eye(4)).item() == pytest.approx(torch.dot(u, v).item(), abs=1e-15)
    uniform = losses.clip_loss_from_logits(torch.zeros(2, 2)).item()
    assert abs(uniform - math.log(2)) <= 1e-12


# -- 4. shapes --------------------------------------------------------------------


@criterion(4, "shape contract 64x96 -> 512x3")
def test_shape_contract():
    model = init_params(EncoderConfig(), seed=0)
    emb = encode(model.encoder, torch.randn(64, 96))
    z = heads(model.heads, emb.h)
    assert emb.h.shape == (512, 3)
    assert z.z_clip.shape == (512,) and z.z_frame.shape == (512, 3) and z.z_pitch.shape == (3,)


# -- 5. pitch-shift law -------------------------------------------------------------


def dominant_frequency(x, sr=16000):
    n = 1 << 20
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n=n))
    k = int(np.argmax(spec))
    a, b, c = np.log(spec[k - 1 : k + 2] + 1e-300)
    return (k + 0.5 * (a - c) / (a - 2 * b + c)) * sr / n


@criterion(5, "pitch-shift law within 2 %")
def test_pitch_shift_law():
    t0 = time.time()
    tones = gen_tone_bank(SynthSpec("tone_bank", 3, 1.0, 0, midi_range=(57, 57)))
    tones += gen_tone_bank(SynthSpec("tone_bank", 3, 1.0, 1, midi_range=(69, 69)))
    tones += gen_tone_bank(SynthSpec("tone_bank", 3, 1.0, 2, midi_range=(81, 81)))
    worst = 0.0
    for clip in tones:
        f0 = dominant_frequency(clip.waveform.samples)
        for a in (0.8, 1.2):
            f = dominant_frequency(pitch_shift(clip.waveform, a).samples)
            worst = max(worst, abs(f / (a * f0) - 1))
    elapsed = time.time() - t0
    note(5, f"max relative deviation {100 * worst:.3f} %, {elapsed:.1f} s")
    assert worst <= 0.02 and elapsed < 60


# -- shared pretraining runs ----------------------------------------------------------


@pytest.fixture(scope="module")
def full_runs():
    """Ten seeded full-loss desk runs; returns (checkpoints by seed, wall time)."""
    t0 = time.time()
    runs = {}
    for seed in range(N_LOSS_SEEDS):
        runs[seed] = train(gen_mixed_corpus(200, seed=seed), DESK.replace(seed=seed))
    return runs, time.time() - t0


@pytest.fixture(scope="module")
def ordering_reports(full_runs):
    """Probe reports for random, clip-only, clip+frame and full encoders over three seeds,
    plus the frozen-encoder hash checks made around every probe run."""
    runs, _ = full_runs
    reports, hash_checks = [], []
    for seed in ORDERING_SEEDS:
        bank = FeatureBank(gen_mixed_corpus(200, seed=seed))
        data = experiments.probe_datasets(seed)
        encoders = {
            "random": init_params(seed=seed),
            "clip": train(bank, experiments.ablation_config("clip", DESK.replace(seed=seed))),
            "clip+frame": train(bank, experiments.ablation_config("clip+frame", DESK.replace(seed=seed))),
            "clip+frame+pitch": runs[seed],
        }
        for label, source in encoders.items():
            encoder = probe._encoder_from(source)
            before = state_hash(encoder)
            for rep in experiments.probe_encoder(encoder, data, label=label):
                reports.append(rep)
                hash_checks.append(before == rep.encoder_hash == state_hash(encoder))
    return reports, hash_checks


def mean_metric(reports, label, task, metric):
    return float(np.mean([r.metrics[metric] for r in reports if r.label == label and r.task == task]))


# -- 6. end-to-end desk run --------------------------------------------------------------


@criterion(6, "desk runs: loss decreases epoch 1 -> 20 for >= 9/10 seeds, <= 30 min")
def test_desk_loss_decreases(full_runs):
    runs, elapsed = full_runs
    firsts_lasts = [(epoch_means(c.log)[0], epoch_means(c.log)[-1]) for c in runs.values()]
    n_down = sum(last < first for first, last in firsts_lasts)
    note(6, f"{n_down}/{N_LOSS_SEEDS} decreasing, {elapsed / 60:.1f} min for {N_LOSS_SEEDS} runs")
    assert all(len(epoch_means(c.log)) == 20 for c in runs.values())
    assert n_down >= 9 and elapsed <= 30 * 60


# -- 7. ordering effects -----------------------------------------------------------------


@criterion("7a", "pitch probe: full > clip-only, both > random (mean of 3 seeds)")
def test_pitch_ordering(ordering_reports):
    reports, _ = ordering_reports
    full, clip, rand = (mean_metric(reports, l, "pitch", "pitch_accuracy") for l in ("clip+frame+pitch", "clip", "random"))
    note("7a", f"full {full:.3f}, clip-only {clip:.3f}, random {rand:.3f}")
    assert full > clip
    assert clip > rand and full > rand


@criterion("7b", "event probe: clip+frame frame F1 > clip-only (mean of 3 seeds)")
def test_frame_ordering(ordering_reports):
    reports, _ = ordering_reports
    with_frame = mean_metric(reports, "clip+frame", "events", "frame_f1")
    clip = mean_metric(reports, "clip", "events", "frame_f1")
    full = mean_metric(reports, "clip+frame+pitch", "events", "frame_f1")
    note("7b", f"clip+frame {with_frame:.3f}, full {full:.3f}, clip-only {clip:.3f}")
    assert with_frame > clip


@criterion("7c", "chroma >= pitch on every pitch report")
def test_chroma_dominates(ordering_reports):
    reports, _ = ordering_reports
    pitch_reports = [r for r in reports if r.kind == "pitch_classification"]
    assert len(pitch_reports) == 4 * len(ORDERING_SEEDS)
    assert all(r.metrics["chroma_accuracy"] >= r.metrics["pitch_accuracy"] for r in pitch_reports)


# -- 8. frozen encoder ---------------------------------------------------------------------


@criterion(8, "encoder hash unchanged by every probe run")
def test_frozen_encoder(ordering_reports):
    _, hash_checks = ordering_reports
    note(8, f"{sum(hash_checks)}/{len(hash_checks)} probe runs")
    assert hash_checks and all(hash_checks)


# -- 9. determinism ---------------------------------------------------------------------------


@criterion(9, "deterministic reruns give bit-identical checkpoints and reports")
def test_determinism(tmp_path):
    corpus = gen_mixed_corpus(200, seed=5)
    data = experiments.probe_datasets(5)
    cfg = DESK.replace(seed=5, epochs=3)
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        ckpt = train(corpus, cfg, out)
        files = []
        for rep in experiments.probe_encoder(ckpt, {"texture": data["texture"], "pitch": data["pitch"]}):
            path = out / f"{rep.task}.json"
            rep.save(path)
            files.append(path.read_bytes())
        blobs.append(((out / "checkpoint_final.pt").read_bytes(), files))
    assert blobs[0][0] == blobs[1][0]
    assert blobs[0][1] == blobs[1][1]


# -- 10. frame-loss analytic cases ----------------------------------------------------------------


@criterion(10, "frame-loss analytic cases")
def test_frame_loss_cases(float64):
    rng = np.random.default_rng(0)
    W = torch.from_numpy(rng.standard_normal((8, 8)))
    # with m <= T'//2 the positive set covers every frame for T' <= 2
    for T, m in [(1, 0), (2, 1)]:
        z = torch.from_numpy(rng.standard_normal((4, 8, T)))
        assert losses.loss_frame_single(z, m=m, W=W).item() == 0.0
    same = torch.from_numpy(rng.standard_normal(8)).reshape(1, 8, 1).repeat(1, 1, 3)
    logits = losses.similarity_matrix(same[0].T, same[0].T, BILINEAR, W)
    per_anchor = -(logits.diagonal() - torch.logsumexp(logits, dim=1))
    assert torch.all((per_anchor - math.log(3)).abs() <= 1e-12)
    assert abs(losses.loss_frame_single(same, m=0, W=W).item() - math.log(3)) <= 1e-12
