"""Acceptance suite: one test per criterion, each printed as a pass line.

Every tolerance here is pinned; the criteria run on synthetic corpora
with fixed seeds so the whole suite is deterministic and finishes well
inside a laptop-scale time budget.
"""

import itertools
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ulma_kit import segmentation
from ulma_kit.errors import EmptyMaskError, NoIsmFoundError
from ulma_kit.harf_synth import (
    Anchor,
    Parabola,
    arc_length,
    chord_length,
    fit_sag,
    parabola_through,
)
from ulma_kit.model import (
    EncoderConfig,
    FineTuneHead,
    classify_loss,
    conv_output_length,
    detect_loss,
    finetune_classify_step,
    finetune_detect_step,
    grad_check,
    init_head,
    init_model,
    mask_spans,
    positional_encoding,
    pooled_forward,
    predict_units,
    pretrain_loss,
    pretrain_step,
    scaled_dot_attention,
)
from ulma_kit.model import _softmax  # row-sum checks need the raw weights
from ulma_kit.reward import PreferencePair, init_reward_model, train_reward
from ulma_kit.signal import AudioClip
from conftest import make_two_burst_clip, write_pcm16_wav

RATE = 16000


def _pass(number, name):
    print(f"[acceptance] criterion {number:02d} ({name}): PASS")


# --- synthetic corpora -------------------------------------------------

UNIT_FREQS = [500.0, 1000.0, 2000.0, 3200.0]


def markov_corpus(n_clips, frames_per_clip, seed):
    """Hub-and-spoke 4-unit Markov chain rendered as 20 ms tone frames.

    Unit 0 is the hub: it alternates with a uniformly random spoke unit,
    and each segment lasts 8-16 frames, so unit statistics are strongly
    structured and learnable.
    """
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    spf = RATE // 50
    for c in range(n_clips):
        state = int(rng.integers(4))
        seq = []
        while len(seq) < frames_per_clip:
            seq.extend([state] * int(rng.integers(8, 17)))
            state = 0 if state != 0 else int(rng.integers(1, 4))
        seq = np.array(seq[:frames_per_clip])
        t = np.arange(frames_per_clip * spf) / RATE
        freqs = np.repeat([UNIT_FREQS[s] for s in seq], spf)
        clips.append(AudioClip(0.4 * np.sin(2 * np.pi * freqs * t), RATE,
                               f"markov-{c}"))
        labels.append(seq)
    return clips, labels


def tone_classification_corpus():
    """Two linearly separable classes: 500 Hz vs 2500 Hz tones."""
    clips, labels = [], []
    for i in range(6):
        for label, freq in ((0, 500.0), (1, 2500.0)):
            rng = np.random.default_rng(1000 * (label + 1) + i)
            t = np.arange(int(0.5 * RATE)) / RATE
            x = 0.4 * rng.uniform(0.9, 1.1) * np.sin(2 * np.pi * freq * t)
            x += 0.005 * rng.standard_normal(t.size)
            clips.append(AudioClip(np.clip(x, -1, 1), RATE,
                                   f"tone{int(freq)}-{i}"))
            labels.append(label)
    return clips, labels


def detection_corpus():
    """Three disjoint event types (600/1500/3000 Hz tone segments)."""
    rng = np.random.default_rng(55)
    combos = [(0,), (1,), (2,), (0, 1), (0, 2), (1, 2)] * 2
    event_freqs = [600.0, 1500.0, 3000.0]
    clips, targets = [], []
    for i, combo in enumerate(combos):
        n = int(0.5 * RATE)
        x = 0.005 * rng.standard_normal(n)
        seg = n // len(combo)
        for j, label in enumerate(combo):
            t = np.arange(seg) / RATE
            x[j * seg:(j + 1) * seg] += 0.4 * np.sin(
                2 * np.pi * event_freqs[label] * t
            )
        target = np.zeros(3)
        target[list(combo)] = 1.0
        clips.append(AudioClip(np.clip(x, -1, 1), RATE, f"det-{i}"))
        targets.append(target)
    return clips, targets


def preference_corpus(n_pairs, seed):
    """Chosen clips always carry the strictly higher envelope peak."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        low = rng.uniform(0.1, 0.4)
        high = rng.uniform(low + 0.2, 0.9)
        def clip(amp, j):
            r = np.random.default_rng(j)
            t = np.arange(int(0.3 * RATE)) / RATE
            x = amp * np.sin(2 * np.pi * 700.0 * t)
            x += 0.005 * r.standard_normal(t.size)
            return AudioClip(np.clip(x, -1, 1), RATE, f"pref-{j}")
        pairs.append(PreferencePair(chosen=clip(high, 10_000 + i),
                                    rejected=clip(low, 20_000 + i)))
    return pairs


# --- criteria ----------------------------------------------------------

def test_criterion_01_comparator_suite():
    cfg = segmentation.ComparatorConfig(v_th=0.1, v_max=0.8, v_min=-0.4)
    rng = np.random.default_rng(42)
    samples = rng.normal(size=10_000)
    samples[::100] = cfg.v_th  # witness the exact-threshold mid level too
    out = segmentation.comparator(samples, cfg).values
    assert set(np.unique(out)) == {cfg.v_min, cfg.mid, cfg.v_max}

    x = rng.normal(size=5000)
    counts = []
    for v_th in np.linspace(-2.0, 2.0, 9):
        c = segmentation.ComparatorConfig(v_th=v_th, v_max=1.0, v_min=-1.0)
        counts.append(int(np.sum(segmentation.comparator(x, c).values == 1.0)))
    assert all(a >= b for a, b in zip(counts, counts[1:]))

    sine_cfg = segmentation.ComparatorConfig(v_th=0.0, v_max=1.0, v_min=0.0)
    t = np.arange(64) / 64.0
    sine = np.sin(2 * np.pi * t)
    got = segmentation.comparator(sine, sine_cfg).values
    expected = np.array([1.0 if v > 0 else (0.0 if v < 0 else 0.5)
                         for v in sine])
    assert np.array_equal(got, expected)  # bit-for-bit
    _pass(1, "comparator suite")


def test_criterion_02_positional_encoding():
    d_model = 8
    table = positional_encoding(64, d_model)
    for pos in range(64):
        for i in range(d_model // 2):
            angle = pos / 10000 ** (2 * i / d_model)
            assert abs(table[pos, 2 * i] - math.sin(angle)) <= 1e-12
            assert abs(table[pos, 2 * i + 1] - math.cos(angle)) <= 1e-12
    assert np.array_equal(table[0], np.tile([0.0, 1.0], d_model // 2))
    _pass(2, "positional encoding")


def test_criterion_03_attention():
    rng = np.random.default_rng(7)
    scores = rng.normal(size=(50, 13)) * 5
    probs = _softmax(scores)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-12

    Q, K, V = rng.normal(size=(6, 4)), rng.normal(size=(9, 4)), rng.normal(size=(9, 5))
    out = scaled_dot_attention(Q, K, V)
    assert np.all(out >= V.min(axis=0) - 1e-12)
    assert np.all(out <= V.max(axis=0) + 1e-12)

    w1 = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    hand = scaled_dot_attention(np.array([[1.0, 0.0]]),
                                np.array([[1.0, 0.0], [0.0, 1.0]]),
                                np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert abs(hand[0, 0] - w1) <= 1e-9
    assert abs(hand[0, 1] - (1 - w1)) <= 1e-9

    perm = rng.permutation(9)
    assert np.allclose(scaled_dot_attention(Q, K[perm], V[perm]), out,
                       atol=1e-12)
    _pass(3, "scaled dot-product attention")


def test_criterion_04_kmeans():
    from ulma_kit.units import assign, kmeans_fit

    centers = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
    rng = np.random.default_rng(42)
    points = np.vstack([
        c + 0.05 * rng.standard_normal((200, 2)) for c in centers
    ])
    true_labels = np.repeat(np.arange(3), 200)

    trace = []
    cb = kmeans_fit(points, k=3, seed=7, trace=trace)
    assert all(a >= b - 1e-9 for a, b in zip(trace, trace[1:]))

    best = None
    for perm in itertools.permutations(range(3)):
        err = np.linalg.norm(cb.centroids[list(perm)] - centers, axis=1).max()
        if best is None or err < best[0]:
            best = (err, perm)
    max_err, perm = best
    assert max_err < 0.05
    relabeled = np.argsort(np.array(perm))[assign(cb, points)]
    assert np.mean(relabeled == true_labels) == 1.0

    cb2 = kmeans_fit(points, k=3, seed=7)
    assert cb.centroids.tobytes() == cb2.centroids.tobytes()
    _pass(4, "k-means")


def test_criterion_05_gradient_checks():
    cfg = EncoderConfig(d_model=8, n_heads=2, d_ff=16, k_units=4, proj_dim=8,
                        conv_layers=((10, 5, 4), (8, 4, 4), (4, 4, 4), (4, 4, 4)))
    model = init_model(cfg, seed=33)
    head = init_head("classify", cfg.d_model, 3, seed=5)
    rng = np.random.default_rng(0)
    clip = AudioClip(0.5 * rng.uniform(-1, 1, 3200), RATE, "gc")

    def head_loss():
        loss, _, head_grads = classify_loss(model, head, clip, 1)
        return loss, head_grads

    head_err = grad_check(head, head_loss, eps=1e-6)
    assert head_err <= 1e-7

    model2 = init_model(cfg, seed=37)
    t = conv_output_length(cfg, clip.samples.size)
    labels = np.random.default_rng(4).integers(0, cfg.k_units, t)
    mask = np.array([1, 2, 3, 6, 7])

    def full_loss():
        return pretrain_loss(model2, clip, labels, mask)

    full_err = grad_check(model2, full_loss, max_checks=250)
    assert full_err <= 1e-4
    _pass(5, "gradient checks")


def test_criterion_06_masked_pretraining():
    cfg = EncoderConfig(k_units=4)
    clips, labels = markov_corpus(12, 50, seed=1)
    model = init_model(cfg, seed=2)
    rng = np.random.default_rng(3)

    losses = []
    while len(losses) < 500:
        i = len(losses) % len(clips)
        try:
            loss = pretrain_step(model, clips[i], labels[i], rng, 0.5)
        except EmptyMaskError:
            continue
        losses.append(loss)

    initial = float(np.mean(losses[:10]))
    final = float(np.mean(losses[-10:]))
    assert final < 0.8 * initial

    rng_eval = np.random.default_rng(909)
    correct = total = 0
    for clip, lab in zip(clips, labels):
        mask = mask_spans(50, cfg, rng_eval)
        if mask.size == 0:
            continue
        pred = predict_units(model, clip, mask)
        correct += int((pred == lab[mask]).sum())
        total += mask.size
    accuracy = correct / total
    assert accuracy >= 0.40  # chance is 0.25
    _pass(6, "masked pretraining")


def test_criterion_07_finetune_classification():
    cfg = EncoderConfig(k_units=4)
    model = init_model(cfg, seed=11)
    head = init_head("classify", cfg.d_model, 2, seed=12)
    clips, labels = tone_classification_corpus()

    conv_before = {name: model.params[name].copy()
                   for name in model.params if name.startswith("conv")}
    for _ in range(200):
        for clip, label in zip(clips, labels):
            finetune_classify_step(model, head, clip, label, 0.05)

    correct = sum(
        int(np.argmax(pooled_forward(model, c)[0] @ head.weights + head.bias) == l)
        for c, l in zip(clips, labels)
    )
    assert correct / len(clips) >= 0.95
    for name, value in conv_before.items():
        assert np.array_equal(model.params[name], value)  # bit-identical
    _pass(7, "fine-tune classification")


def test_criterion_08_detection_head():
    cfg = EncoderConfig(k_units=4)
    model = init_model(cfg, seed=21)
    clips, targets = detection_corpus()

    zero_head = FineTuneHead("detect", np.zeros((cfg.d_model, 3)), np.zeros(3))
    for clip, target in zip(clips[:3], targets[:3]):
        loss, _, _ = detect_loss(model, zero_head, clip, target)
        assert abs(loss - math.log(2)) <= 1e-12

    head = init_head("detect", cfg.d_model, 3, seed=22)
    for _ in range(200):
        for clip, target in zip(clips, targets):
            finetune_detect_step(model, head, clip, target, 0.3)
    final = np.mean([detect_loss(model, head, c, t)[0]
                     for c, t in zip(clips, targets)])
    assert final < 0.1
    _pass(8, "detection head")


def test_criterion_09_harf_solver():
    a1, a2 = Anchor(0.0, 0.0), Anchor(1.0, 0.0)
    chord = chord_length(a1, a2)
    flat = parabola_through(a1, a2, 0.0)
    assert abs(arc_length(flat) - chord) <= 1e-12

    for factor in (1.0, 1.01, 1.5, 3.0):
        target = factor * chord
        fit = fit_sag(a1, a2, target)
        realized = arc_length(parabola_through(a1, a2, fit.sag))
        assert abs(realized - target) <= 1e-9

    def closed_form(p):
        def antiderivative(t):
            u = 2.0 * p.a * t + p.b
            return (u * math.hypot(1.0, u) + math.asinh(u)) / 2.0
        return (antiderivative(p.t2) - antiderivative(p.t1)) / (2.0 * p.a)

    # The curve through (0,0) and (1,0) whose closed-form length is
    # 1.478943 is the sag-0.5 parabola y = 2x^2 - 2x; the sag-0.25 curve
    # y = x^2 - x has closed-form length 1.147794.  Both are checked
    # against the quadrature at 1e-6.
    deep = Parabola(a=2.0, b=-2.0, c=0.0, t1=0.0, t2=1.0)
    assert abs(closed_form(deep) - 1.478943) <= 1e-6
    assert abs(arc_length(deep) - closed_form(deep)) <= 1e-6

    shallow = Parabola(a=1.0, b=-1.0, c=0.0, t1=0.0, t2=1.0)
    assert abs(closed_form(shallow) - 1.1477935747) <= 1e-9
    assert abs(arc_length(shallow) - closed_form(shallow)) <= 1e-6
    _pass(9, "harf solver")


def test_criterion_10_segmentation():
    hop = 0.01 + 1e-9
    clip = make_two_burst_clip()
    pattern = segmentation.decompose(clip)
    assert abs(pattern.ism.onset_s - 0.2) <= hop
    assert abs(pattern.ism.offset_s - 0.4) <= hop
    assert abs(pattern.fil.onset_s - 0.7) <= hop
    assert abs(pattern.fil.offset_s - 0.8) <= hop
    assert abs(pattern.chirps_s - 0.3) <= hop
    assert abs(pattern.height_ratio - 0.5) <= 0.02

    noise = AudioClip(
        0.05 * np.random.default_rng(14).uniform(-1, 1, RATE), RATE, "noise"
    )
    with pytest.raises(NoIsmFoundError):
        segmentation.decompose(noise)
    _pass(10, "segmentation")


def test_criterion_11_correlation():
    perfect = [(0.9, "positive")] * 8 + [(0.1, "negative")] * 8
    report = segmentation.correlate_height_reactions(perfect)
    assert report.auc == 1.0

    rng = np.random.default_rng(123)
    ratios = rng.uniform(0, 1, 1000)
    labels = rng.choice(["positive", "negative"], size=1000)
    random_report = segmentation.correlate_height_reactions(
        list(zip(ratios, labels))
    )
    assert abs(random_report.auc - 0.5) <= 0.06

    # 32 x 32 pairs keep every AUC dyadic so the identity is bit-exact.
    ratios = rng.uniform(0, 1, 64)
    flip_labels = ["positive"] * 32 + ["negative"] * 32
    rng.shuffle(flip_labels)
    flipped = ["negative" if l == "positive" else "positive"
               for l in flip_labels]
    auc = segmentation.correlate_height_reactions(
        list(zip(ratios, flip_labels))).auc
    auc_flip = segmentation.correlate_height_reactions(
        list(zip(ratios, flipped))).auc
    assert auc + auc_flip == 1.0
    _pass(11, "height-reaction correlation")


def test_criterion_12_reward_model():
    cfg = EncoderConfig(d_model=16, n_heads=2, d_ff=32, k_units=4, proj_dim=8,
                        conv_layers=((10, 5, 8), (8, 4, 8), (4, 4, 8), (4, 4, 8)))
    encoder = init_model(cfg, seed=9)
    rm = init_reward_model(encoder, seed=10)
    pairs = preference_corpus(200, seed=11)

    untrained = train_reward(rm, pairs, epochs=0, step_size=1.0, seed=0)
    assert abs(untrained.final_loss - math.log(2)) <= 0.1

    report = train_reward(rm, pairs, epochs=200, step_size=1.0, seed=0)
    assert report.pairwise_accuracy >= 0.90
    _pass(12, "reward model")


def test_criterion_13_cli_end_to_end_determinism(tmp_path):
    corpus_dir = tmp_path / "corpus"
    corpus_dir.mkdir()
    records = []
    clips, labels = tone_classification_corpus()
    for i, (clip, label) in enumerate(zip(clips, labels)):
        path = corpus_dir / f"clip_{i}.wav"
        write_pcm16_wav(path, clip.samples, RATE)
        records.append({"path": str(path), "label": ["low", "high"][label]})
    manifest = corpus_dir / "manifest.jsonl"
    manifest.write_text(
        "\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8"
    )

    def run_pipeline(base: Path):
        def ulma(*argv):
            proc = subprocess.run(
                [sys.executable, "-m", "ulma_kit", *argv],
                capture_output=True, text=True,
            )
            assert proc.returncode == 0, proc.stderr
        ulma("features", "--manifest", str(manifest),
             "--out", str(base / "feat"))
        ulma("cluster", "--features", str(base / "feat" / "features.json"),
             "--k", "8", "--seed", "7", "--out", str(base / "cb"))
        ulma("pretrain", "--manifest", str(manifest),
             "--codebook", str(base / "cb" / "codebook.json"),
             "--seed", "5", "--steps", "100", "--out", str(base / "pre"))
        ulma("refit-units", "--manifest", str(manifest),
             "--checkpoint", str(base / "pre" / "checkpoint.json"),
             "--layer", "1", "--k", "8", "--seed", "9",
             "--out", str(base / "cb2"))
        ulma("finetune-classify", "--manifest", str(manifest),
             "--checkpoint", str(base / "pre" / "checkpoint.json"),
             "--seed", "11", "--epochs", "200", "--step-size", "0.05",
             "--out", str(base / "cls"))

    run_pipeline(tmp_path / "run1")
    run_pipeline(tmp_path / "run2")

    artifacts = [
        ("feat", "features.json"),
        ("cb", "codebook.json"),
        ("pre", "checkpoint.json"),
        ("pre", "pretrain_report.jsonl"),
        ("cb2", "codebook.json"),
        ("cls", "checkpoint_finetuned.json"),
        ("cls", "head.json"),
        ("cls", "finetune_report.jsonl"),
    ]
    for sub_dir, name in artifacts:
        b1 = (tmp_path / "run1" / sub_dir / name).read_bytes()
        b2 = (tmp_path / "run2" / sub_dir / name).read_bytes()
        assert b1 == b2, f"{sub_dir}/{name} differs between runs"

    report_lines = (tmp_path / "run1" / "cls" / "finetune_report.jsonl") \
        .read_text().splitlines()
    final = json.loads(report_lines[1])
    assert final["train_accuracy"] >= 0.95
    _pass(13, "CLI end-to-end determinism")
