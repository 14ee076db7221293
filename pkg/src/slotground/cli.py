"""Command line: train, eval, diagnostics, slot-map export, gradient check, data generation.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfigError, parse_config
from .io import FormatError, read_svtf, write_svtf

log = logging.getLogger("slotground")


class UsageError(Exception):
    pass


def _config(args):
    return parse_config(args.config, args.set)


def _splits(cfg, split: str, n: int | None):
    from dataclasses import replace

    from .train import make_datasets

    if n is not None:
        cfg = replace(cfg, n_eval=n)
    train, id_eval, ood_eval = make_datasets(cfg)
    return {"train": train, "id": id_eval, "ood": ood_eval}[split]


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    base = None
    if args.base:
        from .io import load_checkpoint

        base = {k: v for k, v in load_checkpoint(args.base).arrays.items() if k.startswith("base.")}
    res = train(cfg, out, base_arrays=base)
    last = res.log[-1] if res.log else {}
    print(json.dumps({"steps": len(res.log), "final": last, "output_dir": str(out)}))
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate, load_model

    model, cfg = load_model(args.checkpoint)
    samples = _splits(cfg, args.split, args.n)
    if not samples:
        raise UsageError("empty evaluation set")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    metrics = evaluate(model, samples, cfg, out, tag=args.split)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _pooled_files(paths) -> np.ndarray:
    from .diagnostics import pool_video_repr

    return np.stack([pool_video_repr(read_svtf(p).astype(np.float64)) for p in paths])


def cmd_diag_mmd(args) -> int:
    from .diagnostics import mmd2

    if args.checkpoint:
        from .train import load_model, make_datasets, pooled_representations

        model, cfg = load_model(args.checkpoint)
        train, id_eval, ood_eval = make_datasets(cfg)
        src = train[: args.n]
        x = pooled_representations(model, src, layer=args.layer, use_adapters=not args.no_adapters)
        y = pooled_representations(model, ood_eval[: args.n], layer=args.layer, use_adapters=not args.no_adapters)
    else:
        if not args.x or not args.y:
            raise UsageError("diag-mmd needs --checkpoint or both --x and --y feature files")
        x, y = _pooled_files(args.x), _pooled_files(args.y)
    res = mmd2(x, y)
    report = res.as_dict()
    print(json.dumps(report, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_diag_perturb(args) -> int:
    from functools import partial

    from .decoder import predict_samples
    from .diagnostics import PerturbSpec, perturb_eval
    from .train import load_model

    model, cfg = load_model(args.checkpoint)
    samples = _splits(cfg, args.split, args.n)
    predict = partial(predict_samples, model, batch_size=cfg.eval_batch_size)
    clean = predict(samples)
    report = {}
    for mode in args.modes:
        spec = PerturbSpec(mode=mode, noise_scale=args.scale, seed=args.seed)
        report[mode] = perturb_eval(predict, samples, spec, tau=args.tau, clean_preds=clean).as_dict()
    print(json.dumps(report, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_diag_simrank(args) -> int:
    from .diagnostics import simrank_split

    if not args.train or not args.test:
        raise UsageError("diag-simrank needs --train and --test feature files")
    tr, te = _pooled_files(args.train), _pooled_files(args.test)
    ids = [Path(p).stem for p in args.test]
    top, bottom, scores = simrank_split(tr, te, args.fraction, ids)
    rows = [("sample_id", "score", "set")]
    sets = {i: "top" for i in top} | {i: "bottom" for i in bottom}
    for i, s in zip(ids, scores):
        rows.append((i, f"{s:.17g}", sets.get(i, "")))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        csv.writer(out).writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Binary greyscale PGM (P5)."""
    img = np.asarray(image)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.clip(img, 0, maxval).astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_slot_maps(attn, grid: tuple[int, int], out_dir, prefix: str = "frame") -> np.ndarray:
    """Argmax slot per token as one PGM per frame plus a CSV; attn (T, N, K). Returns (T, N) labels."""
    from .synth import slot_assignment

    a = np.asarray(getattr(attn, "data", attn))
    T, N, K = a.shape
    h, w = grid
    if h * w != N:
        raise UsageError(f"grid {h}x{w} does not match {N} tokens")
    labels = slot_assignment(a)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    step = 255 // max(K - 1, 1)
    for t in range(T):
        write_pgm(out / f"{prefix}{t:03d}.pgm", labels[t].reshape(h, w) * step)
    with open(out / "slots.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "token", "row", "col", "slot"])
        for t in range(T):
            for n in range(N):
                wr.writerow([t, n, n // w, n % w, int(labels[t, n])])
    return labels


def cmd_export_slots(args) -> int:
    from .decoder import collate, decoder_forward
    from .train import load_model

    model, cfg = load_model(args.checkpoint)
    if cfg.adapter_type != "slot":
        raise UsageError("export-slots needs a checkpoint with slot adapters")
    samples = _splits(cfg, args.split, max(args.index + 1, 1))
    sample = samples[args.index]
    batch = collate([sample], model.vocab)
    out = decoder_forward(batch, model, positions=np.array([0]))
    layer = args.layer or max(out.slot_outputs)
    attn = out.slot_outputs[layer].attn.data[0]
    labels = export_slot_maps(attn, cfg.synth_spec().grid, args.out)
    from .synth import ari

    print(json.dumps({"sample_id": sample.sample_id, "layer": layer, "frames": int(labels.shape[0]),
                      "ari": ari(labels, sample.planted_labels)}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    rep = run_gradcheck(seed=args.seed, tol=args.tol, max_entries=args.max_entries)
    name, worst = rep.worst
    print(json.dumps({"ok": rep.ok, "worst_param": name, "worst_rel_error": worst, "n_params": len(rep.errors),
                      "seconds": round(rep.seconds, 2)}))
    return 0 if rep.ok else 1


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    samples = _splits(cfg, args.split, args.n)
    if args.n is not None:
        samples = samples[: args.n]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w") as fh:
        for s in samples:
            write_svtf(out / f"{s.sample_id}.svtf", s.frames)
            fh.write(json.dumps({"sample_id": s.sample_id, "query": list(s.query), "gt_window": list(s.gt_window),
                                 "times": [float(t) for t in s.times], "duration": s.duration}) + "\n")
    print(json.dumps({"written": len(samples), "dir": str(out)}))
    return 0


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slotground", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key=value or JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("train", help="train adapters + LoRA on synthetic videos")
    with_config(sp)
    sp.add_argument("--out", help="output directory (default: output_dir from config)")
    sp.add_argument("--base", help="reuse the frozen base weights of this checkpoint instead of pretraining")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="greedy-decode and score a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("id", "ood", "train"), default="id")
    sp.add_argument("--n", type=int, help="number of eval videos (default from config)")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("diag-mmd", help="MMD^2 between pooled representations")
    sp.add_argument("--checkpoint", help="compare ID train vs OOD eval pools of this model")
    sp.add_argument("--layer", type=int)
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--no-adapters", action="store_true")
    sp.add_argument("--x", nargs="+", help="SVTF files of the first set")
    sp.add_argument("--y", nargs="+", help="SVTF files of the second set")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_diag_mmd)

    sp = sub.add_parser("diag-perturb", help="GT-window vs random-window noise")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("id", "ood"), default="id")
    sp.add_argument("--n", type=int)
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tau", type=float, default=0.7)
    sp.add_argument("--modes", nargs="+", choices=("gt_window", "random_window"), default=["gt_window", "random_window"])
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_diag_perturb)

    sp = sub.add_parser("diag-simrank", help="similarity-ranked split of test videos")
    sp.add_argument("--train", nargs="+")
    sp.add_argument("--test", nargs="+")
    sp.add_argument("--fraction", type=float, default=0.2)
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(fn=cmd_diag_simrank)

    sp = sub.add_parser("export-slots", help="per-frame argmax slot maps as PGM + CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("id", "ood", "train"), default="id")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--layer", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export_slots)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--max-entries", type=int, help="check a random subset of entries per parameter")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("gen-data", help="write synthetic videos as SVTF files + manifest")
    with_config(sp)
    sp.add_argument("--split", choices=("train", "id", "ood"), default="train")
    sp.add_argument("--n", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"slotground: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    for name in ("checkpoint", "base", "x", "y", "train", "test", "config"):
        val = getattr(args, name, None)
        if not val or (name == "train" and args.command != "diag-simrank"):
            continue
        for path in [val] if isinstance(val, str) else val:
            if not Path(path).is_file():
                print(f"slotground: error: --{name}: no such file {path}", file=sys.stderr)
                return 2
    try:
        return args.fn(args)
    except (UsageError, RunConfigError) as e:
        print(f"slotground: error: {e}", file=sys.stderr)
        return 2
    except (ad.NumericError, FormatError, ad.ContractError, ad.DimensionError, RuntimeError, ValueError, OSError) as e:
        print(f"slotground: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
