"""Command-line surface.

Each command reads its inputs from explicit flags, writes machine-readable
artifacts under ``--out`` (a directory), and prints a short human-readable
summary to standard output. Commands are deterministic given ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig, load_config
from .data import generate_synthetic
from .errors import ContractError, FormatError, UncalibratedCheckpointError
from .evaluate import evaluate, export_attention, length_deletion_report, wer
from .fileio import (
    load_dataset,
    read_checkpoint,
    read_records,
    save_dataset,
    write_checkpoint,
    write_container,
    write_records,
)
from .model import VARIANTS, Model, count_params
from .pipeline import (
    IntegerModel,
    QuantSim,
    compression_report,
    ptq_calibrate,
    qat_finalize,
)
from .train import TrainConfig, checkpoint_average, train_loop


def _load_run(args) -> RunConfig:
    if getattr(args, "config", None):
        run = load_config(args.config)
    else:
        from .data import SynthTaskSpec
        from .model import ModelConfig
        run = RunConfig(model=ModelConfig(), train=TrainConfig(), data=SynthTaskSpec())
    if getattr(args, "variant", None):
        run.model = dataclasses.replace(run.model, variant=args.variant)
    if getattr(args, "seed", None) is not None:
        run.train = dataclasses.replace(run.train, seed=args.seed)
    return run


def _out_dir(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _model_from_checkpoint(ckpt: Checkpoint) -> Model:
    """Float working model; any 8-bit weights are dequantized first."""
    return Model(ckpt.config, params=ckpt.load_params())


# -- commands ---------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    run = _load_run(args)
    seed = args.seed if args.seed is not None else 0
    data = generate_synthetic(run.data, args.count, seed=seed)
    out = _out_dir(args)
    save_dataset(out, data)
    n_rep = sum(1 for u in data if u.repeated_ngram)
    print(f"wrote {len(data)} utterances ({n_rep} with repeated n-grams) to {out}")
    return 0


def _cmd_train(args) -> int:
    run = _load_run(args)
    data = load_dataset(args.data)
    dev = load_dataset(args.dev_data) if args.dev_data else None
    model = Model(run.model, seed=run.train.seed)
    hook = None
    if args.quant == "qat":
        hook = QuantSim(k=8, act_quant_start=run.train.act_quant_start)
    t0 = time.time()
    result = train_loop(model, data, run.train, hook=hook, dev_data=dev)
    out = _out_dir(args)
    write_checkpoint(out / "checkpoint.qtc", result.checkpoint)
    write_checkpoint(out / "last.qtc", result.last)
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for snap in result.snapshots:
        write_checkpoint(snap_dir / f"snap-{snap.step:06d}.qtc", snap)
    write_records(out / "metrics.txt", result.metrics)
    final = [m for m in result.metrics if m["type"] == "epoch"][-1]
    extra = f" dev_frame_acc {final['dev_frame_acc']:.4f}" if "dev_frame_acc" in final else ""
    print(f"trained {run.train.epochs} epochs in {time.time() - t0:.1f}s: "
          f"loss {final['loss']:.4f} frame_acc {final['frame_acc']:.4f}{extra}")
    print(f"averaged checkpoint (last {len(result.snapshots)} epochs) -> {out / 'checkpoint.qtc'}")
    return 0


def _cmd_quantize_ptq(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    quantized = ptq_calibrate(ckpt, data, steps=args.steps)
    out = _out_dir(args)
    write_checkpoint(out / "quantized.qtc", quantized)
    rep = compression_report(quantized)
    print(f"calibrated over {args.steps} steps; {rep.n_quantized_tensors} tensors quantized, "
          f"ratio {rep.ratio:.2f} -> {out / 'quantized.qtc'}")
    return 0


def _cmd_quantize_qat_finalize(args) -> int:
    snaps = sorted(Path(args.snapshots).glob("snap-*.qtc"))
    if not snaps:
        raise ContractError(f"no snap-*.qtc files under {args.snapshots}")
    checkpoints = [read_checkpoint(p) for p in snaps]
    data = load_dataset(args.data) if args.data else None
    quantized = qat_finalize(checkpoints, data=data, steps=args.steps)
    out = _out_dir(args)
    write_checkpoint(out / "quantized.qtc", quantized)
    adjusted = f", ranges adjusted over {args.steps} steps" if data else ""
    print(f"finalized {len(checkpoints)} snapshots{adjusted} -> {out / 'quantized.qtc'}")
    return 0


def _cmd_average(args) -> int:
    checkpoints = [read_checkpoint(p) for p in args.checkpoints]
    avg = checkpoint_average(checkpoints)
    out = _out_dir(args)
    write_checkpoint(out / "averaged.qtc", avg)
    print(f"averaged {len(checkpoints)} checkpoints -> {out / 'averaged.qtc'}")
    return 0


def _paired_transcripts(ref_path, hyp_path) -> tuple[list, list, list]:
    """Pair transcripts from two record files by utterance id."""
    def transcripts(path):
        out = {}
        for rec in read_records(path):
            if rec["type"] != "utterance":
                raise FormatError(f"unexpected record type {rec['type']!r} in {path}")
            out[rec["id"]] = [int(t) for t in str(rec["tokens"]).split()]
        return out

    refs, hyps = transcripts(ref_path), transcripts(hyp_path)
    if set(refs) != set(hyps):
        raise ContractError("reference and hypothesis files list different utterance ids")
    ids = sorted(refs)
    return [refs[u] for u in ids], [hyps[u] for u in ids], ids


def _cmd_eval(args) -> int:
    if (args.ref is None) != (args.hyp is None):
        raise ContractError("--ref and --hyp must be given together")
    if args.ref:
        refs, hyps, ids = _paired_transcripts(args.ref, args.hyp)
        counts = [wer(r, h) for r, h in zip(refs, hyps)]
        errors = sum(c.errors for c in counts)
        ref_len = sum(c.ref_len for c in counts)
        rate = errors / max(1, ref_len)
        print(f"wer {rate:.4f} ({errors} errors / {ref_len} reference tokens, "
              f"{len(ids)} utterances)")
        if args.out:
            out = _out_dir(args)
            write_records(out / "eval.txt",
                          [{"type": "eval", "wer": rate, "errors": errors,
                            "ref_tokens": ref_len, "n_utterances": len(ids)}])
            rep = length_deletion_report(refs, hyps)
            write_records(out / "length_deletion.txt",
                          [{"type": "length_deletion", "id": uid,
                            "ref_len": n, "deletions": d}
                           for uid, (n, d) in zip(ids, rep.rows)])
        return 0

    if not args.ckpt or not args.data:
        raise ContractError("eval needs either --ref/--hyp or --ckpt/--data")
    ckpt = read_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    if ckpt.is_quantized:
        model_like = IntegerModel(ckpt, allow_uncalibrated=args.allow_uncalibrated)
        route = "integer"
    else:
        model_like = _model_from_checkpoint(ckpt)
        route = "float"
    summary = evaluate(model_like, data, max_len=args.max_len)
    print(f"[{route}] wer {summary.wer:.4f} "
          f"(S={summary.substitutions} D={summary.deletions} I={summary.insertions} "
          f"H={summary.hits} / {summary.ref_tokens} ref tokens, "
          f"{summary.n_utterances} utterances, {summary.truncated} truncated)")
    if summary.repeated_wer is not None:
        print(f"repeated-ngram wer {summary.repeated_wer:.4f}, "
              f"regular wer {summary.regular_wer:.4f}")
    if args.out:
        rec = {"type": "eval", "route": route, **summary.as_record()}
        write_records(_out_dir(args) / "eval.txt", [rec])
    return 0


def _cmd_report_compression(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    rep = compression_report(ckpt)
    print(f"fp32 {rep.fp32_bytes} bytes, quantized {rep.quantized_bytes} bytes, "
          f"ratio {rep.ratio:.3f} "
          f"({rep.n_quantized_tensors} quantized / {rep.n_float_tensors} float tensors)")
    if args.out:
        write_records(_out_dir(args) / "compression.txt",
                      [{"type": "compression", "fp32_bytes": rep.fp32_bytes,
                        "quantized_bytes": rep.quantized_bytes, "ratio": rep.ratio,
                        "n_quantized_tensors": rep.n_quantized_tensors,
                        "n_float_tensors": rep.n_float_tensors}])
    return 0


def _cmd_export_attention(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    if not 0 <= args.utt < len(data):
        raise ContractError(f"--utt {args.utt} out of range for {len(data)} utterances")
    u = data[args.utt]
    model = _model_from_checkpoint(ckpt)
    maps = export_attention(model, u.features, u.tokens)
    out = _out_dir(args)
    tensors = {name: arr.astype(np.float32) for name, arr in maps}
    write_container(out / "attention.qtc", tensors,
                    {"kind": "attention", "utterance": args.utt,
                     "frames": int(u.features.shape[0]), "tokens": len(u.tokens)})
    print(f"wrote {len(tensors)} attention maps -> {out / 'attention.qtc'}")
    return 0


def _cmd_count_params(args) -> int:
    run = _load_run(args)
    n = count_params(run.model)
    print(f"{run.model.variant}: {n} parameters")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qtfm",
        description="Train, quantize, and evaluate small attention-based "
                    "speech-to-token models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", _cmd_gen_data, "generate a synthetic dataset directory")
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--count", type=int, required=True, help="number of utterances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("train", _cmd_train, "train a model and write averaged checkpoint")
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--dev-data", help="held-out dataset directory")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--quant", choices=["off", "qat"], default="off")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")

    p = add("quantize-ptq", _cmd_quantize_ptq,
            "post-training calibration of a float checkpoint")
    p.add_argument("--ckpt", required=True, help="float checkpoint file")
    p.add_argument("--data", required=True, help="calibration dataset directory")
    p.add_argument("--steps", type=int, default=1000, help="calibration batches")
    p.add_argument("--out", required=True)

    p = add("quantize-qat-finalize", _cmd_quantize_qat_finalize,
            "average quantization-trained snapshots and emit the 8-bit checkpoint")
    p.add_argument("--snapshots", required=True,
                   help="directory of snap-*.qtc files from `train --quant qat`")
    p.add_argument("--data", help="dataset directory for adjusting the averaged "
                                  "activation ranges (optional)")
    p.add_argument("--steps", type=int, default=1000,
                   help="range-adjustment forward passes when --data is given")
    p.add_argument("--out", required=True)

    p = add("average", _cmd_average, "average several checkpoints")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files")
    p.add_argument("--out", required=True)

    p = add("eval", _cmd_eval, "greedy-decode a dataset or score ref/hyp files")
    p.add_argument("--ckpt", help="checkpoint file (float or quantized)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--ref", help="reference transcript records")
    p.add_argument("--hyp", help="hypothesis transcript records")
    p.add_argument("--max-len", type=int, help="decode length cap")
    p.add_argument("--allow-uncalibrated", action="store_true",
                   help="run a quantized checkpoint even if its activation "
                        "ranges were never calibrated (diagnostic only)")
    p.add_argument("--out")

    p = add("report-compression", _cmd_report_compression,
            "byte accounting of a quantized checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")

    p = add("export-attention", _cmd_export_attention,
            "dump per-head attention maps for one utterance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--utt", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("count-params", _cmd_count_params, "print the model parameter count")
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UncalibratedCheckpointError as e:
        print(f"error: {e}\nhint: pass --allow-uncalibrated to run anyway "
              f"(expect degenerate output), or calibrate with quantize-ptq.",
              file=sys.stderr)
        return 1
    except (ContractError, FormatError, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
