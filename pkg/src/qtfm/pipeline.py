"""8-bit quantization pipeline: simulation, calibration, integer inference.

Two independent routes produce quantized predictions:

- ``QuantSim`` instruments the float model (as a forward hook) with
  quantize-dequantize round trips at every weight and activation site, and
  tracks activation ranges with EMA range trackers.  It is both the training
  instrument (QAT / PTQ calibration) and the reference oracle for the integer
  path.

- ``IntegerModel`` runs inference from stored 8-bit codes.  Matrix products
  accumulate integer sums (int64) and reconstruct real values through a
  four-term decomposition whose scale constants are composed in float64 from
  the quantizer parameters:

      y = dx*dw * S1 + dx*aw * S2[i] + ax*dw * S3[j] + n*ax*aw  (+ bias)

  with S1 the code-product sum, S2/S3 the row/column code sums, and n the
  inner size.  Zero-padded convolutions mask padding cells out of S3/n so
  pad positions contribute exactly 0 (matching real zero padding).
  Nonlinear interiors (softmax, layer norm, residual adds, position terms)
  run on dequantized reals and requantize at the next site; ReLU maps codes
  through a precomputed lookup table; max-pool, gather, reshape, and concat
  operate on codes directly.

The two routes share quantizer parameters but no inference code, so
elementwise agreement within one step size per site is a meaningful check.
"""

from __future__ import annotations

import contextlib
import dataclasses
import math
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import AuditError, ContractError, UncalibratedCheckpointError
from .model import (Model, ModelConfig, causal_mask, is_matrix_param,
                    param_shapes, sinusoidal_pe)
from .quant import (QuantParams, QuantizedTensor, RangeTracker, dequantize,
                    fake_quant, quantize, weight_range)
from .tensor import Tensor
from .train import checkpoint_average

PLACEHOLDER_RANGE = (-1.0, 1.0)


class SiteMap(NamedTuple):
    weights: tuple[str, ...]
    acts: tuple[str, ...]


def build_site_map(config: ModelConfig) -> SiteMap:
    """Every weight and activation site a hooked forward pass must visit."""
    weights = tuple(n for n in param_shapes(config) if is_matrix_param(n))
    acts: list[str] = ["input_features", "frontend.conv0.act", "frontend.conv1.act",
                       "frontend.proj.out"]
    attn = ("q", "k", "v", "scores", "weights", "context", "out")
    for i in range(config.enc_layers):
        acts += [f"enc{i}.self.{s}" for s in attn]
        acts += [f"enc{i}.norm1.out", f"enc{i}.ffn.act", f"enc{i}.ffn.out",
                 f"enc{i}.norm2.out"]
    acts.append("embed.out")
    if config.variant == "conv-context":
        acts += [f"dec_conv{i}.act" for i in range(config.dec_conv_blocks)]
    for i in range(config.dec_layers):
        acts += [f"dec{i}.self.{s}" for s in attn]
        acts.append(f"dec{i}.norm1.out")
        acts += [f"dec{i}.cross.{s}" for s in attn]
        acts += [f"dec{i}.norm2.out", f"dec{i}.ffn.act", f"dec{i}.ffn.out",
                 f"dec{i}.norm3.out"]
    acts.append("output.logits")
    return SiteMap(weights=weights, acts=tuple(acts))


class QuantSim:
    """Fake-quantization hook: weights always, activations once ranges exist.

    Weight quantizers span each tensor's current min/max (recomputed after
    every optimizer step).  Activation quantizers come from EMA trackers that
    observe batch statistics during the step and commit at ``end_step`` —
    fake-quant therefore always uses the ranges as of the previous step.
    Activation rounding engages once ``step >= act_quant_start`` and the
    site's tracker has at least one committed observation.
    """

    def __init__(self, k: int = 8, act_quant_start: int = 0, track: bool = True,
                 momentum: float = 0.9):
        if k < 2:
            raise ContractError("bit width must be at least 2")
        self.k = k
        self.act_quant_start = act_quant_start
        self.track = track
        self.momentum = momentum
        self.step = 0
        self.trackers: dict[str, RangeTracker] = {}
        self.act_quant_count = 0
        self.trace: dict[str, list[np.ndarray]] | None = None
        self._pending: dict[str, tuple[float, float]] = {}
        self._wcache: dict[str, Tensor] = {}

    @staticmethod
    def from_ranges(act_ranges: dict[str, tuple[float, float]], k: int = 8) -> "QuantSim":
        """Static simulator with fixed activation ranges (no tracking)."""
        sim = QuantSim(k=k, act_quant_start=0, track=False)
        for site, (lo, hi) in act_ranges.items():
            sim.trackers[site] = RangeTracker(running_min=lo, running_max=hi,
                                              initialized=True)
        return sim

    @property
    def act_quant_active(self) -> bool:
        return self.step >= self.act_quant_start

    def weight(self, name: str, t: Tensor) -> Tensor:
        cached = self._wcache.get(name)
        if cached is None:
            cached = fake_quant(t, weight_range(t.data, self.k))
            self._wcache[name] = cached
        return cached

    def act(self, name: str, t: Tensor) -> Tensor:
        if self.track:
            lo, hi = float(t.data.min()), float(t.data.max())
            prev = self._pending.get(name)
            if prev is not None:
                lo, hi = min(lo, prev[0]), max(hi, prev[1])
            self._pending[name] = (lo, hi)
        tracker = self.trackers.get(name)
        if not self.act_quant_active or tracker is None or not tracker.initialized:
            return t
        out = fake_quant(t, tracker.params(self.k))
        self.act_quant_count += 1
        if self.trace is not None:
            self.trace.setdefault(name, []).append(out.data.copy())
        return out

    def end_step(self) -> None:
        """Commit this step's batch statistics and invalidate the weight cache."""
        for site, (lo, hi) in self._pending.items():
            self.trackers.setdefault(site, RangeTracker(momentum=self.momentum)).update(lo, hi)
        self._pending.clear()
        self._wcache.clear()
        self.step += 1

    @contextlib.contextmanager
    def frozen(self):
        """Suspend tracking and isolate the weight cache.

        Evaluation passes must not move the ranges, and cache entries they
        create (built with the tape off, so without gradient links) must not
        leak into subsequent training steps.
        """
        prev_track = self.track
        prev_cache = self._wcache
        self.track = False
        self._wcache = dict(prev_cache)
        try:
            yield self
        finally:
            self.track = prev_track
            self._wcache = prev_cache

    def range_state(self) -> dict[str, tuple[float, float]]:
        return {site: (tr.running_min, tr.running_max)
                for site, tr in self.trackers.items() if tr.initialized}


class SimulatedModel:
    """A float model viewed through a static QuantSim (the reference route).

    Must be built from the float checkpoint that the integer one was encoded
    from: weight quantizers are rederived from the float values, which (by
    construction of ``weight_range``) reproduces the stored codes exactly.
    """

    def __init__(self, ckpt: Checkpoint, act_ranges: dict | None = None,
                 allow_uncalibrated: bool = False, k: int = 8):
        if ckpt.is_quantized:
            raise ContractError(
                "the simulated route needs the float checkpoint, not the quantized one")
        self.model = Model(ckpt.config, params=ckpt.load_params())
        sites = build_site_map(ckpt.config).acts
        ranges = dict(act_ranges if act_ranges is not None else ckpt.act_ranges)
        missing = [s for s in sites if s not in ranges]
        if missing:
            if not allow_uncalibrated:
                raise UncalibratedCheckpointError(
                    f"no activation ranges for {len(missing)} sites; calibrate first "
                    "or pass the explicit override")
            for s in missing:
                ranges[s] = PLACEHOLDER_RANGE
        self.sim = QuantSim.from_ranges({s: ranges[s] for s in sites}, k=k)

    def predict_logits(self, features: np.ndarray, token_ids: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.model.forward(features, token_ids, hook=self.sim).data


def audit_sites(config: ModelConfig) -> SiteMap:
    """Run a probe forward and verify the hook visits exactly the site map."""
    expected = build_site_map(config)

    class Recorder:
        def __init__(self):
            self.weights: set[str] = set()
            self.acts: set[str] = set()

        def weight(self, name, t):
            self.weights.add(name)
            return t

        def act(self, name, t):
            self.acts.add(name)
            return t

    rec = Recorder()
    model = Model(config, seed=0)
    rng = np.random.default_rng(0)
    with T.no_grad():
        model.forward(rng.normal(size=(8, config.feature_dim)),
                      np.array([1, 3]), hook=rec)
    if rec.weights != set(expected.weights) or rec.acts != set(expected.acts):
        missing = (set(expected.weights) - rec.weights) | (set(expected.acts) - rec.acts)
        extra = (rec.weights - set(expected.weights)) | (rec.acts - set(expected.acts))
        raise AuditError(f"site map mismatch: missing={sorted(missing)}, "
                         f"unexpected={sorted(extra)}")
    return expected


# -- calibration ---------------------------------------------------------------


def _quantize_from_fp(ckpt: Checkpoint, act_ranges: dict[str, tuple[float, float]],
                      calibrated: bool, k: int) -> Checkpoint:
    """Encode matrix weights to codes; biases and norm affines stay float32."""
    if ckpt.is_quantized:
        raise ContractError("checkpoint is already quantized")
    qparams: dict[str, QuantizedTensor] = {}
    rest: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        if is_matrix_param(name):
            w = arr.astype(np.float64)
            qparams[name] = QuantizedTensor.from_real(w, weight_range(w, k))
        else:
            rest[name] = arr
    return Checkpoint(config=ckpt.config, step=ckpt.step, params=rest,
                      qparams=qparams, act_ranges=dict(act_ranges),
                      calibrated=calibrated, constituents=list(ckpt.constituents))


def quantize_weights_only(ckpt: Checkpoint, k: int = 8) -> Checkpoint:
    """Quantize weights without calibrating activations (checkpoint stays flagged
    uncalibrated; integer inference will refuse it without an override)."""
    return _quantize_from_fp(ckpt, ckpt.act_ranges, calibrated=False, k=k)


def ptq_calibrate(ckpt: Checkpoint, data, steps: int, k: int = 8) -> Checkpoint:
    """Post-training calibration: observe activation ranges, then quantize.

    Runs teacher-forced forwards through a fresh QuantSim for ``steps``
    batches (one utterance per batch, cycling through ``data``) with no
    weight updates, then freezes weights and the tracked ranges into a
    calibrated quantized checkpoint.
    """
    if steps < 1:
        raise ContractError("calibration needs at least one batch")
    if not data:
        raise ContractError("calibration needs a non-empty dataset")
    if ckpt.is_quantized:
        raise ContractError("cannot calibrate an already-quantized checkpoint")
    from .train import teacher_pair   # local import keeps module load cycle-free

    model = Model(ckpt.config, params=ckpt.load_params())
    sim = QuantSim(k=k, act_quant_start=0)
    with T.no_grad():
        for i in range(steps):
            u = data[i % len(data)]
            feats, toks = u[0], u[1]
            dec_in, _ = teacher_pair(toks)
            model.forward(feats, dec_in, hook=sim)
            sim.end_step()
    ranges = sim.range_state()
    missing = set(build_site_map(ckpt.config).acts) - set(ranges)
    if missing:
        raise AuditError(f"calibration left sites unobserved: {sorted(missing)}")
    return _quantize_from_fp(ckpt, ranges, calibrated=True, k=k)


def qat_finalize(snapshots: list[Checkpoint], data=None, steps: int = 1000,
                 k: int = 8) -> Checkpoint:
    """Average QAT snapshots (weights and tracked ranges), then quantize.

    Every snapshot must carry activation ranges from training with a
    QuantSim hook; the averaged float weights are exactly the plain
    checkpoint average and are never updated here.  When ``data`` is given,
    the averaged ranges are additionally adjusted by running ``steps``
    teacher-forced forwards (one utterance per step, cycling) through a
    simulator whose trackers start from the averaged ranges, so the EMA
    keeps every adjusted range inside the hull of its start value and the
    observed batch statistics.
    """
    if not snapshots:
        raise ContractError("need at least one snapshot")
    for c in snapshots:
        if not c.act_ranges:
            raise ContractError(
                f"snapshot at step {c.step} has no activation ranges (not QAT)")
    avg = checkpoint_average(snapshots)
    missing = set(build_site_map(avg.config).acts) - set(avg.act_ranges)
    if missing:
        raise AuditError(f"QAT ranges missing sites: {sorted(missing)}")
    ranges = dict(avg.act_ranges)
    if data is not None and steps > 0:
        from .train import teacher_pair   # local import keeps module load cycle-free

        model = Model(avg.config, params=avg.load_params())
        sim = QuantSim(k=k, act_quant_start=0)
        for site, (lo, hi) in ranges.items():
            sim.trackers[site] = RangeTracker(running_min=lo, running_max=hi,
                                              initialized=True)
        with T.no_grad():
            for i in range(steps):
                u = data[i % len(data)]
                dec_in, _ = teacher_pair(u[1])
                model.forward(u[0], dec_in, hook=sim)
                sim.end_step()
        ranges = sim.range_state()
    return _quantize_from_fp(avg, ranges, calibrated=True, k=k)


# -- integer inference ----------------------------------------------------------


def integer_linear(x_codes: np.ndarray, xp: QuantParams,
                   w_codes: np.ndarray, wp: QuantParams) -> np.ndarray:
    """Real-valued matmul of two code matrices via integer accumulation.

    All products and sums over codes run in int64; the four scale constants
    are composed in float64 from the two quantizers.
    """
    cx = x_codes.astype(np.int64)
    cw = w_codes.astype(np.int64)
    if cx.ndim != 2 or cw.ndim != 2 or cx.shape[1] != cw.shape[0]:
        raise ContractError(f"integer matmul shape mismatch: {cx.shape} x {cw.shape}")
    n = cx.shape[1]
    s1 = cx @ cw
    s2 = cx.sum(axis=1)
    s3 = cw.sum(axis=0)
    c11 = xp.delta * wp.delta
    c10 = xp.delta * wp.a
    c01 = xp.a * wp.delta
    c00 = n * xp.a * wp.a
    return c11 * s1 + c10 * s2[:, None] + c01 * s3[None, :] + c00


def _masked_patch_linear(patches: np.ndarray, mask: np.ndarray, xp: QuantParams,
                         w_mat: np.ndarray, wp: QuantParams) -> np.ndarray:
    """Decomposition for patch matrices whose padding cells must act as real 0.

    ``patches`` is (n_taps, n_positions) codes with 0 at padding cells,
    ``mask`` the matching validity indicator, ``w_mat`` (n_out, n_taps) codes.
    Returns real (n_out, n_positions).
    """
    cx = patches.astype(np.int64)
    m = mask.astype(np.int64)
    cw = w_mat.astype(np.int64)
    s1 = cw @ cx                      # pad cells hold code 0, so they vanish here
    s2 = cx.sum(axis=0)               # sum of valid codes per position
    s3 = cw @ m                       # per-(out, position) sum of weight codes over valid taps
    n_valid = m.sum(axis=0)
    c11 = xp.delta * wp.delta
    c10 = xp.delta * wp.a
    c01 = xp.a * wp.delta
    return c11 * s1 + c10 * s2[None, :] + c01 * s3 + (n_valid * xp.a * wp.a)[None, :]


def relu_lut(params: QuantParams) -> np.ndarray:
    """Code-domain ReLU: dequantize, clip negatives to zero, requantize."""
    codes = np.arange(params.levels)
    return quantize(np.maximum(dequantize(codes, params), 0.0), params)


def _checked_ranges(ckpt: Checkpoint, allow_uncalibrated: bool) -> dict[str, tuple[float, float]]:
    """Activation ranges for integer inference; placeholders only under the override."""
    sites = build_site_map(ckpt.config).acts
    ranges = dict(ckpt.act_ranges)
    missing = [s for s in sites if s not in ranges]
    if not ckpt.calibrated or missing:
        if not allow_uncalibrated:
            raise UncalibratedCheckpointError(
                "checkpoint has no calibrated activation ranges; quantized "
                "inference would be meaningless (pass the explicit override to "
                "proceed with placeholder ranges)")
        for s in missing:
            ranges[s] = PLACEHOLDER_RANGE
    return {s: ranges[s] for s in sites}


class IntegerModel:
    """Inference from 8-bit codes only; mirrors the hooked float model site by site.

    ``trace``, when enabled via ``predict_logits(..., trace=dict)``, records
    the dequantized value of every activation site in visit order for
    comparison against the QuantSim route.
    """

    def __init__(self, ckpt: Checkpoint, allow_uncalibrated: bool = False):
        if not ckpt.is_quantized:
            raise ContractError("integer inference needs a quantized checkpoint")
        self.config = ckpt.config
        cfg = ckpt.config
        expected_w = {n for n in param_shapes(cfg) if is_matrix_param(n)}
        if set(ckpt.qparams) != expected_w:
            raise ContractError("quantized checkpoint is missing weight tensors")
        ks = {qt.params.k for qt in ckpt.qparams.values()}
        if len(ks) != 1:
            raise ContractError(f"mixed weight bit widths: {sorted(ks)}")
        self.k = ks.pop()
        self.w_codes = {n: qt.codes for n, qt in ckpt.qparams.items()}
        self.w_params = {n: qt.params for n, qt in ckpt.qparams.items()}
        self.fp = {n: a.astype(np.float64) for n, a in ckpt.params.items()}
        ranges = _checked_ranges(ckpt, allow_uncalibrated)
        self.act_params = {s: QuantParams.from_range(lo, hi, self.k)
                           for s, (lo, hi) in ranges.items()}
        self._lut = {s: relu_lut(p) for s, p in self.act_params.items()
                     if s.endswith(".act")}
        self._trace: dict[str, list[np.ndarray]] | None = None

    # -- site helpers -----------------------------------------------------------

    def _req(self, site: str, real: np.ndarray) -> np.ndarray:
        codes = quantize(real, self.act_params[site])
        if self._trace is not None:
            self._trace.setdefault(site, []).append(
                dequantize(codes, self.act_params[site]))
        return codes

    def _deq(self, site: str, codes: np.ndarray) -> np.ndarray:
        return dequantize(codes, self.act_params[site])

    def _relu_codes(self, site: str, codes: np.ndarray) -> np.ndarray:
        out = self._lut[site][codes]
        if self._trace is not None:
            # the traced value for a .act site is the post-ReLU one
            self._trace[site][-1] = dequantize(out, self.act_params[site])
        return out

    def _matmul(self, x_codes: np.ndarray, x_site: str, w_name: str) -> np.ndarray:
        return integer_linear(x_codes, self.act_params[x_site],
                              self.w_codes[w_name], self.w_params[w_name])

    # -- layers -------------------------------------------------------------------

    def _attention(self, x_codes: np.ndarray, x_site: str, kv_codes: np.ndarray,
                   kv_site: str, prefix: str, mask: np.ndarray | None) -> np.ndarray:
        cfg = self.config
        d_head = cfg.d_head
        q = self._req(f"{prefix}.q", self._matmul(x_codes, x_site, f"{prefix}.wq"))
        k = self._req(f"{prefix}.k", self._matmul(kv_codes, kv_site, f"{prefix}.wk"))
        v = self._req(f"{prefix}.v", self._matmul(kv_codes, kv_site, f"{prefix}.wv"))
        scale = 1.0 / math.sqrt(d_head)
        heads = []
        ctx_site = f"{prefix}.context"
        for h in range(cfg.n_heads):
            sl = slice(h * d_head, (h + 1) * d_head)
            qp, kp = self.act_params[f"{prefix}.q"], self.act_params[f"{prefix}.k"]
            s_real = integer_linear(q[:, sl], qp, k[:, sl].T, kp) * scale
            s_codes = self._req(f"{prefix}.scores", s_real)
            s = self._deq(f"{prefix}.scores", s_codes)
            if mask is not None:
                s = s + mask
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            w_codes = self._req(f"{prefix}.weights", e / e.sum(axis=-1, keepdims=True))
            ctx_real = integer_linear(w_codes, self.act_params[f"{prefix}.weights"],
                                      v[:, sl], self.act_params[f"{prefix}.v"])
            # per-head requantization and post-concat requantization are the
            # same elementwise map; trace the concatenated tensor to mirror
            # the simulated route's single hook call
            heads.append(quantize(ctx_real, self.act_params[ctx_site]))
        context = np.concatenate(heads, axis=1)
        if self._trace is not None:
            self._trace.setdefault(ctx_site, []).append(
                dequantize(context, self.act_params[ctx_site]))
        out = integer_linear(context, self.act_params[ctx_site],
                             self.w_codes[f"{prefix}.wo"], self.w_params[f"{prefix}.wo"])
        return self._req(f"{prefix}.out", out)

    def _ffn(self, x_codes: np.ndarray, x_site: str, prefix: str) -> np.ndarray:
        h_real = self._matmul(x_codes, x_site, f"{prefix}.w1") + self.fp[f"{prefix}.b1"]
        h = self._relu_codes(f"{prefix}.act", self._req(f"{prefix}.act", h_real))
        out = integer_linear(h, self.act_params[f"{prefix}.act"],
                             self.w_codes[f"{prefix}.w2"], self.w_params[f"{prefix}.w2"])
        return self._req(f"{prefix}.out", out + self.fp[f"{prefix}.b2"])

    def _norm(self, real_in: np.ndarray, prefix: str) -> np.ndarray:
        gamma = self.fp[f"{prefix}.gamma"]
        beta = self.fp[f"{prefix}.beta"]
        mu = real_in.mean(axis=-1, keepdims=True)
        var = real_in.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + 1e-5)
        y = gamma * ((real_in - mu) * inv) + beta
        return self._req(f"{prefix}.out", y)

    def _conv_block(self, codes: np.ndarray, in_site: str, name: str,
                    out_site: str) -> np.ndarray:
        """3x3 stride-1 pad-1 conv from codes, bias + ReLU, requantize, pool."""
        from .tensor import _im2col_indices
        c, hgt, wid = codes.shape
        chan, rows, cols = _im2col_indices(c, hgt, wid, 3, 3, 1, 1, hgt, wid)
        cpad = np.pad(codes.astype(np.int64), ((0, 0), (1, 1), (1, 1)))
        mpad = np.pad(np.ones_like(codes, dtype=np.int64), ((0, 0), (1, 1), (1, 1)))
        patches = cpad[chan, rows, cols]
        mask = mpad[chan, rows, cols]
        w = self.w_codes[name + ".w"]
        out_ch = w.shape[0]
        y = _masked_patch_linear(patches, mask, self.act_params[in_site],
                                 w.reshape(out_ch, -1), self.w_params[name + ".w"])
        y = y.reshape(out_ch, hgt, wid) + self.fp[name + ".b"].reshape(-1, 1, 1)
        out = self._relu_codes(out_site, self._req(out_site, y))
        with T.no_grad():                      # max over codes == code of max value
            pooled = T.max_pool2d(Tensor(out.astype(np.float64)), 2, 2).data
        return pooled.astype(out.dtype)

    # -- full passes ----------------------------------------------------------------

    def encode(self, features: np.ndarray) -> tuple[np.ndarray, str]:
        cfg = self.config
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != cfg.feature_dim:
            raise ContractError(
                f"expected features of shape (T, {cfg.feature_dim}), got {feats.shape}")
        if feats.shape[0] < 4:
            raise ContractError(
                f"input too short: {feats.shape[0]} frames, the front end needs at least 4")
        x = self._req("input_features", feats)
        img = self._conv_block(x[None, :, :], "input_features",
                               "frontend.conv0", "frontend.conv0.act")
        img = self._conv_block(img, "frontend.conv0.act",
                               "frontend.conv1", "frontend.conv1.act")
        ch, t_out, f_out = img.shape
        flat = img.reshape(ch, t_out * f_out).T.reshape(t_out, ch * f_out)
        y = integer_linear(flat, self.act_params["frontend.conv1.act"],
                           self.w_codes["frontend.proj.w"], self.w_params["frontend.proj.w"])
        y = y + self.fp["frontend.proj.b"]
        if cfg.variant == "proposed-pe":
            y = y + sinusoidal_pe(t_out, cfg.d_model)
        x = self._req("frontend.proj.out", y)
        site = "frontend.proj.out"
        for i in range(cfg.enc_layers):
            attn = self._attention(x, site, x, site, f"enc{i}.self", None)
            x = self._norm(self._deq(site, x) + self._deq(f"enc{i}.self.out", attn),
                           f"enc{i}.norm1")
            site = f"enc{i}.norm1.out"
            ffn = self._ffn(x, site, f"enc{i}.ffn")
            x = self._norm(self._deq(site, x) + self._deq(f"enc{i}.ffn.out", ffn),
                           f"enc{i}.norm2")
            site = f"enc{i}.norm2.out"
        return x, site

    def decode(self, memory: np.ndarray, mem_site: str, token_ids: np.ndarray) -> np.ndarray:
        cfg = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ContractError(f"decoder ids must be a non-empty 1D array, got shape {ids.shape}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ContractError("token id out of range")
        gathered = self.w_codes["embed.w"][ids]
        real = dequantize(gathered, self.w_params["embed.w"]) * math.sqrt(cfg.d_model)
        if cfg.variant == "proposed-pe":
            real = real + sinusoidal_pe(ids.size, cfg.d_model)
        x = self._req("embed.out", real)
        site = "embed.out"
        if cfg.variant == "conv-context":
            for i in range(cfg.dec_conv_blocks):
                x = self._dec_conv(x, site, i)
                site = f"dec_conv{i}.act"
        mask = causal_mask(ids.size)
        for i in range(cfg.dec_layers):
            attn = self._attention(x, site, x, site, f"dec{i}.self", mask)
            x = self._norm(self._deq(site, x) + self._deq(f"dec{i}.self.out", attn),
                           f"dec{i}.norm1")
            site = f"dec{i}.norm1.out"
            cross = self._attention(x, site, memory, mem_site, f"dec{i}.cross", None)
            x = self._norm(self._deq(site, x) + self._deq(f"dec{i}.cross.out", cross),
                           f"dec{i}.norm2")
            site = f"dec{i}.norm2.out"
            ffn = self._ffn(x, site, f"dec{i}.ffn")
            x = self._norm(self._deq(site, x) + self._deq(f"dec{i}.ffn.out", ffn),
                           f"dec{i}.norm3")
            site = f"dec{i}.norm3.out"
        logits = integer_linear(x, self.act_params[site],
                                self.w_codes["output.w"], self.w_params["output.w"])
        codes = self._req("output.logits", logits + self.fp["output.b"])
        return self._deq("output.logits", codes)

    def _dec_conv(self, codes: np.ndarray, in_site: str, idx: int) -> np.ndarray:
        cfg = self.config
        width = cfg.dec_conv_width
        t = codes.shape[0]
        cpad = np.pad(codes.astype(np.int64), ((width - 1, 0), (0, 0)))
        mpad = np.pad(np.ones_like(codes, dtype=np.int64), ((width - 1, 0), (0, 0)))
        # patches[t] stacks the width input rows feeding output step t
        patches = np.concatenate([cpad[j:j + t] for j in range(width)], axis=1)
        mask = np.concatenate([mpad[j:j + t] for j in range(width)], axis=1)
        w = self.w_codes[f"dec_conv{idx}.w"]          # (width, d_in, d_out)
        wflat = w.reshape(-1, w.shape[2])
        y = _masked_patch_linear(patches.T, mask.T, self.act_params[in_site],
                                 wflat.T, self.w_params[f"dec_conv{idx}.w"]).T
        y = y + self.fp[f"dec_conv{idx}.b"]
        site = f"dec_conv{idx}.act"
        return self._relu_codes(site, self._req(site, y))

    def predict_logits(self, features: np.ndarray, token_ids: np.ndarray,
                       trace: dict | None = None) -> np.ndarray:
        self._trace = trace
        try:
            memory, site = self.encode(features)
            return self.decode(memory, site, token_ids)
        finally:
            self._trace = None


def route_divergence(fp_ckpt: Checkpoint, q_ckpt: Checkpoint,
                     features: np.ndarray, token_ids: np.ndarray) -> dict[str, tuple[float, float]]:
    """Per-site agreement between the integer route and the simulated route.

    Runs both routes on one utterance with tracing and returns, per activation
    site, ``(max elementwise gap, step size)`` in real units.  ``fp_ckpt``
    must be the float checkpoint the quantized one was built from.
    """
    if not q_ckpt.is_quantized:
        raise ContractError("need a quantized checkpoint to compare against")
    k = next(iter(q_ckpt.qparams.values())).params.k
    simulated = SimulatedModel(fp_ckpt, act_ranges=q_ckpt.act_ranges, k=k)
    simulated.sim.trace = {}
    simulated.predict_logits(features, token_ids)
    integer = IntegerModel(q_ckpt)
    int_trace: dict[str, list[np.ndarray]] = {}
    integer.predict_logits(features, token_ids, trace=int_trace)

    if set(int_trace) != set(simulated.sim.trace):
        only_int = set(int_trace) - set(simulated.sim.trace)
        only_sim = set(simulated.sim.trace) - set(int_trace)
        raise AuditError(f"trace site mismatch: integer-only={sorted(only_int)}, "
                         f"simulated-only={sorted(only_sim)}")
    gaps: dict[str, tuple[float, float]] = {}
    for site, int_vals in int_trace.items():
        sim_vals = simulated.sim.trace[site]
        if len(int_vals) != len(sim_vals):
            raise AuditError(f"site {site} visited {len(int_vals)} times by the integer "
                             f"route but {len(sim_vals)} by the simulated route")
        gap = 0.0
        for a, b in zip(int_vals, sim_vals):
            if a.shape != b.shape:
                raise AuditError(f"site {site} shape mismatch: {a.shape} vs {b.shape}")
            gap = max(gap, float(np.abs(a - b).max()))
        gaps[site] = (gap, integer.act_params[site].delta)
    return gaps


# -- reporting -------------------------------------------------------------------


@dataclasses.dataclass
class CompressionReport:
    fp32_bytes: int
    quantized_bytes: int
    ratio: float
    n_quantized_tensors: int
    n_float_tensors: int


def compression_report(ckpt: Checkpoint) -> CompressionReport:
    """Payload byte accounting for a quantized checkpoint vs float32 storage.

    Each quantized tensor stores one code per element (k/8 bytes) plus its
    quantizer (two float64 and one uint32). Float tensors and activation
    ranges are counted at their stored size.
    """
    if not ckpt.is_quantized:
        raise ContractError("compression report needs a quantized checkpoint")
    q_bytes = 0
    total_scalars = 0
    for qt in ckpt.qparams.values():
        total_scalars += qt.codes.size
        q_bytes += qt.codes.size * ((qt.params.k + 7) // 8) + 8 + 8 + 4
    for arr in ckpt.params.values():
        total_scalars += arr.size
        q_bytes += arr.size * 4
    q_bytes += len(ckpt.act_ranges) * 16
    fp_bytes = total_scalars * 4 + len(ckpt.act_ranges) * 16
    return CompressionReport(
        fp32_bytes=fp_bytes,
        quantized_bytes=q_bytes,
        ratio=fp_bytes / q_bytes,
        n_quantized_tensors=len(ckpt.qparams),
        n_float_tensors=len(ckpt.params),
    )
