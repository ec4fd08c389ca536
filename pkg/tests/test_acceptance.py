"""Acceptance gate: ten criteria, each printing one pass/fail line.

Criteria 5 and 6 train the toy model from scratch (full-precision and
quantization-aware), so this file takes several minutes; everything else is
seconds. Module-scoped fixtures share the trained models between criteria.
"""

import dataclasses
import itertools
import time

import numpy as np
import pytest

from qtfm.checkpoint import snapshot
from qtfm.data import SynthTaskSpec, generate_synthetic
from qtfm.errors import UncalibratedCheckpointError
from qtfm.evaluate import evaluate, wer
from qtfm.model import Model, ModelConfig, count_params
from qtfm.pipeline import (
    IntegerModel,
    QuantSim,
    compression_report,
    ptq_calibrate,
    qat_finalize,
    quantize_weights_only,
    route_divergence,
)
from qtfm.quant import QuantParams, RangeTracker, dequantize, quantize
from qtfm.tensor import Tensor
from qtfm.train import TrainConfig, cross_entropy, eval_frame_accuracy, train_loop


def _report(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


# -- shared toy-training setup (criteria 5, 6, 8) -------------------------------------

TOY_MODEL = ModelConfig(d_model=64, n_heads=4, d_ff=256, enc_layers=2, dec_layers=2,
                        vocab_size=32, feature_dim=32, dropout=0.1, variant="proposed",
                        frontend_channels=16)
TRAIN_SPEC = SynthTaskSpec(feature_dim=32, noise_sigma=0.05, min_frames=4, max_frames=4,
                           max_tokens=6, ngram_fraction=0.2)
DEV_SPEC = dataclasses.replace(TRAIN_SPEC, ngram_fraction=0.1)
TOY_TRAIN = TrainConfig(epochs=26, batch_frames=250, average_last=3, seed=0,
                        act_quant_start=300)

FULL_MODEL = ModelConfig()  # 512/8/2048, 6+6 layers, vocab 5000, 80-dim features


@pytest.fixture(scope="module")
def toy_data():
    train = generate_synthetic(TRAIN_SPEC, 2000, seed=100)
    dev = generate_synthetic(DEV_SPEC, 64, seed=200)
    return train, dev


@pytest.fixture(scope="module")
def fp_run(toy_data):
    train, dev = toy_data
    t0 = time.monotonic()
    res = train_loop(Model(TOY_MODEL, seed=0), train, TOY_TRAIN)
    seconds = time.monotonic() - t0
    model = Model(TOY_MODEL, params=res.checkpoint.load_params())
    acc = eval_frame_accuracy(model, dev)
    summary = evaluate(model, dev)
    return {"res": res, "seconds": seconds, "acc": acc, "summary": summary}


@pytest.fixture(scope="module")
def qat_run(toy_data):
    train, _ = toy_data
    hook = QuantSim(k=8, act_quant_start=TOY_TRAIN.act_quant_start)
    t0 = time.monotonic()
    res = train_loop(Model(TOY_MODEL, seed=0), train, TOY_TRAIN, hook=hook)
    return {"res": res, "seconds": time.monotonic() - t0}


# -- 1. quantizer properties ----------------------------------------------------------


class TestCriterion01:
    def test_quantizer_property_suite(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(12345)
        n = 10_000
        worst = 0.0
        for _ in range(n):
            scale = rng.choice([1e-2, 1.0, 1e2])
            a = rng.normal() * scale
            b = a + (abs(rng.normal()) + 1e-3) * scale
            p = QuantParams.from_range(a, b, 8)
            x = rng.normal((a + b) / 2, (b - a))     # inside and outside the range
            c = quantize(np.array(x), p)
            assert 0 <= int(c) <= 255

            y = dequantize(c, p)
            err = abs(float(y) - float(np.clip(x, a, b)))
            worst = max(worst, err / p.delta)
            assert err <= p.delta / 2 + 1e-9 * p.delta

            x2 = x + abs(rng.normal()) * p.delta     # monotonicity
            assert int(quantize(np.array(x2), p)) >= int(c)

            c2 = quantize(y, p)                       # idempotence
            assert int(c2) == int(c)
            assert float(dequantize(c2, p)) == float(y)
        dt = time.monotonic() - t0
        _report(1, dt < 5.0,
                f"10k random (x,a,b) K=8: round-trip <= delta/2 (worst {worst:.3f} delta), "
                f"monotone, idempotent, codes in [0,255]; {dt:.2f}s (< 5s)")


# -- 2. EMA range tracking ------------------------------------------------------------


class TestCriterion02:
    def test_ema_matches_closed_form(self):
        t0 = time.monotonic()
        worst = 0.0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            lows = rng.normal(size=40)
            highs = lows + abs(rng.normal(size=40))
            t = RangeTracker(momentum=0.9)
            for lo, hi in zip(lows, highs):
                t.update(lo, hi)
            exp_min, exp_max = lows[0], highs[0]     # closed form, first sample initializes
            for lo, hi in zip(lows[1:], highs[1:]):
                exp_min = 0.9 * exp_min + 0.1 * lo
                exp_max = 0.9 * exp_max + 0.1 * hi
            worst = max(worst, abs(t.running_min - exp_min), abs(t.running_max - exp_max))
        assert worst < 1e-12

        fixed = RangeTracker()
        for _ in range(100):
            fixed.update(-0.3, 0.7)
        exact = fixed.running_min == -0.3 and fixed.running_max == 0.7
        dt = time.monotonic() - t0
        _report(2, worst < 1e-12 and exact and dt < 1.0,
                f"EMA matches closed form within 1e-12 (worst {worst:.2e}); "
                f"constant stream exact; {dt:.2f}s (< 1s)")


# -- 3. gradient correctness ----------------------------------------------------------


def _numeric_grad(f, x: np.ndarray, idx, h=1e-5) -> float:
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def _check_param(f, x: np.ndarray, analytic: np.ndarray, entries, rtol=1e-3) -> float:
    worst = 0.0
    for idx in entries:
        num = _numeric_grad(f, x, idx)
        ana = analytic[idx]
        rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
        worst = max(worst, rel)
        assert rel <= rtol, f"gradient mismatch at {idx}: numeric {num}, analytic {ana}"
    return worst


class TestCriterion03:
    def test_every_op_and_tiny_model_gradcheck(self):
        import qtfm.tensor as T

        t0 = time.monotonic()
        rng = np.random.default_rng(7)
        worst = 0.0

        def scalar_check(build, x0):
            """build(Tensor) -> scalar Tensor; finite-difference vs backward."""
            nonlocal worst
            xt = Tensor(x0.copy(), requires_grad=True)
            out = build(xt)
            out.backward()
            def f(arr):
                return build(Tensor(arr)).data.item()
            entries = [tuple(rng.integers(0, s) for s in x0.shape) for _ in range(4)]
            worst = max(worst, _check_param(f, x0, xt.grad, entries))

        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 5))
        scalar_check(lambda t: T.tsum(t + Tensor(x)), x)
        scalar_check(lambda t: T.tsum(t * Tensor(x + 0.5)), x)
        scalar_check(lambda t: T.tsum(-t), x)
        scalar_check(lambda t: T.tsum(t @ Tensor(w)), x)
        scalar_check(lambda t: T.tsum(T.transpose(t)), x)
        scalar_check(lambda t: T.tsum(T.reshape(t, (4, 3))), x)
        scalar_check(lambda t: T.tsum(T.narrow(t, 1, 1, 2)), x)
        scalar_check(lambda t: T.tsum(T.concat([t, Tensor(x)], axis=0) * Tensor(np.vstack([x, x]))), x)
        scalar_check(lambda t: T.tmean(t) * 3.0, x)
        scalar_check(lambda t: T.tsum(T.relu(t)), x + 0.1)      # keep clear of the kink
        scalar_check(lambda t: T.tsum(T.softmax(t, axis=-1) * Tensor(x)), x)
        g = np.abs(rng.standard_normal(4)) + 0.5
        bta = rng.standard_normal(4)
        scalar_check(lambda t: T.tsum(T.layer_norm(t, Tensor(g), Tensor(bta)) * Tensor(x)), x)
        scalar_check(lambda t: T.tsum(T.layer_norm(Tensor(x), t, Tensor(bta)) * Tensor(x[:1])), g)

        table = rng.standard_normal((6, 4))
        ids = np.array([0, 3, 5, 3])
        mul_emb = rng.standard_normal((4, 4))
        scalar_check(lambda t: T.tsum(T.embedding(t, ids) * Tensor(mul_emb)), table)

        img = rng.standard_normal((2, 6, 6))
        ker = rng.standard_normal((3, 2, 3, 3))
        mul3 = rng.standard_normal((3, 6, 6))
        scalar_check(lambda t: T.tsum(T.conv2d(Tensor(img), t, Tensor(np.zeros(3)), 1, 1) * Tensor(mul3)), ker)
        scalar_check(lambda t: T.tsum(T.conv2d(t, Tensor(ker), Tensor(np.zeros(3)), 1, 1) * Tensor(mul3)), img)
        scalar_check(lambda t: T.tsum(T.max_pool2d(t, 2)), img)

        seq = rng.standard_normal((5, 3))
        cker = rng.standard_normal((3, 3, 4))
        mul4 = rng.standard_normal((5, 4))
        scalar_check(lambda t: T.tsum(T.causal_conv1d(t, Tensor(cker), Tensor(np.zeros(4))) * Tensor(mul4)), seq)
        scalar_check(lambda t: T.tsum(T.causal_conv1d(Tensor(seq), t, Tensor(np.zeros(4))) * Tensor(mul4)), cker)

        logits = rng.standard_normal((5, 6))
        targets = np.array([3, 0, 4, 5, 3])
        scalar_check(lambda t: cross_entropy(t, targets), logits)

        # Full tiny model: loss through every layer; at least five named parameters.
        tiny = ModelConfig(d_model=16, n_heads=2, d_ff=32, enc_layers=2, dec_layers=2,
                           vocab_size=8, feature_dim=8, dropout=0.0, frontend_channels=4)
        model = Model(tiny, seed=11)
        feats = rng.standard_normal((8, 8))
        dec_in = np.array([1, 4, 6, 3])
        tgt = np.array([4, 6, 3, 2])

        def loss_with(name, arr):
            old = model.params[name]
            model.params[name] = Tensor(arr, requires_grad=True)
            try:
                return cross_entropy(model.forward(feats, dec_in), tgt).data.item()
            finally:
                model.params[name] = old

        loss = cross_entropy(model.forward(feats, dec_in), tgt)
        loss.backward()
        names = ["frontend.conv0.w", "frontend.proj.w", "enc0.self.wq", "enc1.ffn.w1",
                 "dec0.cross.wk", "dec1.self.wo", "embed.w", "output.w"]
        assert len(names) >= 5
        for name in names:
            p = model.params[name]
            entries = [tuple(rng.integers(0, s) for s in p.data.shape) for _ in range(3)]
            worst = max(worst, _check_param(lambda a, n=name: loss_with(n, a),
                                            p.data, p.grad, entries))
        for p in model.params.values():
            p.grad = None

        dt = time.monotonic() - t0
        _report(3, worst <= 1e-3 and dt < 60.0,
                f"finite differences: every op + tiny 2+2/d16/h2 model "
                f"({len(names)} params), worst rel err {worst:.2e} (<= 1e-3); "
                f"{dt:.1f}s (< 60s)")


# -- 4. parameter count ---------------------------------------------------------------


class TestCriterion04:
    def test_full_scale_parameter_count(self):
        t0 = time.monotonic()
        n = count_params(FULL_MODEL)
        n_conv = count_params(dataclasses.replace(FULL_MODEL, variant="conv-context"))
        rel = abs(n - 51_000_000) / 51_000_000
        dt = time.monotonic() - t0
        _report(4, n == 49_920_072 and rel <= 0.15 and n_conv > n and dt < 5.0,
                f"full-size config: {n:,} params ({rel * 100:.1f}% from 51M, within 15%); "
                f"conv-context {n_conv:,} > proposed; {dt:.2f}s (< 5s, no training)")


# -- 5. toy training ------------------------------------------------------------------


class TestCriterion05:
    def test_toy_training_accuracy_and_wer(self, toy_data, fp_run):
        acc, s = fp_run["acc"], fp_run["summary"]
        _report(5, acc >= 0.90 and s.wer <= 0.10 and fp_run["seconds"] < 900,
                f"toy run: token acc {acc:.4f} (>= 0.90), WER {s.wer:.4f} (<= 0.10) "
                f"on {s.n_utterances} held-out utterances; trained in "
                f"{fp_run['seconds']:.0f}s (< 900s)")

    def test_toy_training_deterministic(self, toy_data, fp_run):
        # Epoch count never changes earlier draws, so a fresh 2-epoch run must
        # reproduce the first two epochs of the full run bit-for-bit.
        train, _ = toy_data
        short = dataclasses.replace(TOY_TRAIN, epochs=2)
        res2 = train_loop(Model(TOY_MODEL, seed=TOY_TRAIN.seed), train, short)
        prefix = [m for m in fp_run["res"].metrics if m["type"] == "step" and m["epoch"] < 2]
        again = [m for m in res2.metrics if m["type"] == "step"]
        same = len(prefix) == len(again) and all(
            a["loss"] == b["loss"] and a["grad_norm"] == b["grad_norm"]
            for a, b in zip(prefix, again))
        _report(5, same,
                f"determinism: re-run of first 2 epochs reproduces all "
                f"{len(prefix)} step losses bit-for-bit")


# -- 6. quantization parity -----------------------------------------------------------


class TestCriterion06:
    def test_ptq_and_qat_within_two_wer_points(self, toy_data, fp_run, qat_run):
        train, dev = toy_data
        fp_wer = fp_run["summary"].wer

        ptq = ptq_calibrate(fp_run["res"].checkpoint, train, steps=1000)
        wer_ptq = evaluate(IntegerModel(ptq), dev).wer

        qat_ckpt = qat_finalize(qat_run["res"].snapshots, data=train, steps=1000)
        wer_qat = evaluate(IntegerModel(qat_ckpt), dev).wer

        ok = (abs(wer_ptq - fp_wer) <= 0.02 + 1e-12
              and abs(wer_qat - fp_wer) <= 0.02 + 1e-12)
        _report(6, ok,
                f"integer-route WER: fp {fp_wer:.4f}, ptq {wer_ptq:.4f} "
                f"(|diff| {abs(wer_ptq - fp_wer) * 100:.2f} pts), qat {wer_qat:.4f} "
                f"(|diff| {abs(wer_qat - fp_wer) * 100:.2f} pts); both <= 2 points; "
                f"qat trained in {qat_run['seconds']:.0f}s")


# -- 7. integer-path equivalence ------------------------------------------------------


class TestCriterion07:
    def test_integer_vs_fake_quant_per_site(self):
        t0 = time.monotonic()
        spec = SynthTaskSpec(vocab_size=8, feature_dim=4, min_tokens=2, max_tokens=4,
                             min_frames=4, max_frames=6)
        worst_ratio = 0.0
        worst_logits = 0.0
        for seed in range(20):
            variant = ["proposed", "proposed-pe", "conv-context"][seed % 3]
            cfg = ModelConfig(d_model=8, n_heads=2, d_ff=16, enc_layers=1, dec_layers=1,
                              vocab_size=8, feature_dim=4, dropout=0.0,
                              frontend_channels=4, variant=variant)
            data = generate_synthetic(spec, 6, seed=1000 + seed)
            fp = snapshot(cfg, Model(cfg, seed=seed).params, step=0)
            q = ptq_calibrate(fp, data, steps=6)
            u = data[seed % len(data)]
            dec_in = np.concatenate([[1], u.tokens])
            gaps = route_divergence(fp, q, u.features, dec_in)
            for site, (gap, delta) in gaps.items():
                assert gap <= delta + 1e-12, f"seed {seed} site {site}: {gap} > {delta}"
                worst_ratio = max(worst_ratio, gap / delta if delta else 0.0)
            lg, ld = gaps["output.logits"]
            assert lg <= 10 * ld
            worst_logits = max(worst_logits, lg / ld if ld else 0.0)
        dt = time.monotonic() - t0
        _report(7, dt < 30.0,
                f"20 seeds x 3 variants: per-site |integer - fake-quant| <= delta "
                f"(worst {worst_ratio:.3f} delta); end-to-end logits worst "
                f"{worst_logits:.3f} delta (< 10 delta); {dt:.1f}s (< 30s)")


# -- 8. compression -------------------------------------------------------------------


class TestCriterion08:
    def test_compression_ratios(self):
        t0 = time.monotonic()
        toy_ckpt = quantize_weights_only(snapshot(TOY_MODEL, Model(TOY_MODEL, seed=1).params, 0))
        r_toy = compression_report(toy_ckpt).ratio
        full_ckpt = quantize_weights_only(snapshot(FULL_MODEL, Model(FULL_MODEL, seed=1).params, 0))
        r_full = compression_report(full_ckpt).ratio
        dt = time.monotonic() - t0
        _report(8, r_toy >= 3.5 and r_full >= 3.9 and dt < 60.0,
                f"checkpoint byte ratio fp32/8-bit: toy {r_toy:.3f} (>= 3.5), "
                f"full-size config {r_full:.3f} (>= 3.9); {dt:.1f}s (< 60s)")


# -- 9. WER oracle equivalence --------------------------------------------------------


def _oracle_distances(alphabet: int, max_len: int):
    """Exhaustive minimal-edit distance for every pair of sequences, bottom-up
    over suffixes (independent of the production DP, which runs prefix-wise
    with different tie-breaking)."""
    seqs = []
    for length in range(max_len + 1):
        seqs.extend(itertools.product(range(alphabet), repeat=length))
    sid = {s: i for i, s in enumerate(seqs)}
    tail = [sid[s[1:]] if s else -1 for s in seqs]
    head = [s[0] if s else -1 for s in seqs]
    ln = [len(s) for s in seqs]
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(len(s), []).append(i)

    n = len(seqs)
    dist = [[0] * n for _ in range(n)]
    for li in range(max_len + 1):
        for lj in range(max_len + 1):
            for i in by_len[li]:
                row = dist[i]
                ti = tail[i]
                hi = head[i]
                trow = dist[ti] if ti >= 0 else None
                for j in by_len[lj]:
                    if li == 0:
                        row[j] = lj
                    elif lj == 0:
                        row[j] = li
                    else:
                        tj = tail[j]
                        sub = trow[tj] + (1 if hi != head[j] else 0)
                        dele = trow[j] + 1
                        ins = row[tj] + 1
                        best = sub if sub <= dele else dele
                        row[j] = best if best <= ins else ins
    return seqs, dist


class TestCriterion09:
    def test_wer_matches_exhaustive_oracle(self):
        t0 = time.monotonic()
        seqs, dist = _oracle_distances(alphabet=3, max_len=6)
        n_pairs = 0
        for i, ref in enumerate(seqs):
            drow = dist[i]
            for j, hyp in enumerate(seqs):
                r = wer(list(ref), list(hyp))
                assert r.errors == drow[j], (ref, hyp, r, drow[j])
                n_pairs += 1

        rng = np.random.default_rng(99)
        for _ in range(10_000):
            ref = list(rng.integers(0, 5, size=rng.integers(0, 15)))
            hyp = list(rng.integers(0, 5, size=rng.integers(0, 15)))
            r = wer(ref, hyp)
            assert r.substitutions + r.deletions + r.hits == len(ref)
            assert r.substitutions + r.insertions + r.hits == len(hyp)
            assert r.wer == r.errors / max(1, len(ref))
        dt = time.monotonic() - t0
        _report(9, dt < 60.0,
                f"DP WER == exhaustive oracle on all {n_pairs:,} pairs "
                f"(len <= 6, 3 symbols); counter identities on 10k random pairs; "
                f"{dt:.1f}s (< 60s)")


# -- 10. degenerate-calibration guard -------------------------------------------------


class TestCriterion10:
    def test_uncalibrated_checkpoint_refused_without_override(self, tmp_path):
        from qtfm.cli import main
        from qtfm.fileio import save_dataset, write_checkpoint

        cfg = ModelConfig(d_model=8, n_heads=2, d_ff=16, enc_layers=1, dec_layers=1,
                          vocab_size=8, feature_dim=4, dropout=0.0, frontend_channels=4)
        spec = SynthTaskSpec(vocab_size=8, feature_dim=4, min_tokens=2, max_tokens=3,
                             min_frames=4, max_frames=5)
        bare = quantize_weights_only(snapshot(cfg, Model(cfg, seed=2).params, 0))
        flagged = bare.is_quantized and not bare.calibrated

        with pytest.raises(UncalibratedCheckpointError):
            IntegerModel(bare)

        ckpt_path = tmp_path / "bare.qtc"
        write_checkpoint(ckpt_path, bare)
        save_dataset(tmp_path / "ds", generate_synthetic(spec, 4, seed=3))
        refused = main(["eval", "--ckpt", str(ckpt_path), "--data", str(tmp_path / "ds")])
        overridden = main(["eval", "--ckpt", str(ckpt_path), "--data", str(tmp_path / "ds"),
                           "--allow-uncalibrated"])
        _report(10, flagged and refused == 1 and overridden == 0,
                f"weights-only checkpoint flagged uncalibrated; eval exit "
                f"{refused} without override, {overridden} with --allow-uncalibrated")
