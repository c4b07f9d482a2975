"""Command-line entry point: ``rvqdiff <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure (including failed oracle checks).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from . import checkpoint
from . import config as cfgmod
from .conditions import ConditionSet
from .errors import CapacityError, ConfigError, DomainError, IntegrityError, NumericError, ShapeError
from .evaluate import eval_samples, grid_search, oracle_checks
from .guidance import DurationModel, GuidanceWeights, SamplerConfig, predict_length, sample
from .models import MMDiT
from .synth import DatasetRecord, SynthConfig, gen_dataset, identity_anchors, read_records, write_records
from .training import load_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _parse_set(items):
    """``--set section.key=value`` pairs, values parsed as TOML literals."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = tomli.loads(f"v = {raw}")["v"]
        except tomli.TOMLDecodeError:
            value = raw
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _resolve(args, extra=None):
    over = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    for section, values in (extra or {}).items():
        for k, v in values.items():
            if v is not None:
                over.setdefault(section, {})[k] = v
    return cfgmod.load_config(args.config, over)


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _synth_from_meta(meta) -> SynthConfig:
    data = dict(meta["extra"]["data"])
    return SynthConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _resolve(args, {"data": {"n_records": args.n}})
    synth = cfgmod.synth_config(cfg)
    records = gen_dataset(synth, int(cfg["data"]["n_records"]))
    write_records(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve(args, {"train": {"epochs": args.epochs}})
    synth = cfgmod.synth_config(cfg)
    tcfg = cfgmod.train_config(cfg)
    mcfg = cfgmod.model_config(cfg)
    if not Path(args.data).exists():
        raise FileNotFoundError(f"dataset not found: {args.data}")
    records, _ = read_records(args.data)
    if not records:
        raise DomainError("dataset is empty")
    shape = {np.asarray(r.tokens).shape for r in records}
    if shape != {(synth.levels, synth.length)}:
        raise DomainError(f"dataset grid shapes {sorted(shape)} do not match the data config")
    n_val = int(cfg["data"]["n_val"])
    if n_val and len(records) > 2 * n_val:
        train_recs, val_recs = records[:-n_val], records[-n_val:]
    else:
        train_recs, val_recs = records, None
    model = MMDiT(mcfg, rng=np.random.default_rng([cfg["seed"], 0x1A17]), identity_anchors=identity_anchors(synth))
    extra = {"config": cfg, "data": synth.to_dict()}
    result = train(model, train_recs, tcfg, val_recs, out_dir=args.out_dir, resume=args.resume,
                   stop_after_epoch=args.stop_after_epoch, extra_meta=extra,
                   log=lambda rec: print(json.dumps(rec, sort_keys=True)))
    dur = DurationModel(synth.text_alphabet, seed=cfg["seed"])
    dur.fit([r.text for r in train_recs], [r.duration for r in train_recs])
    checkpoint.save(Path(args.out_dir) / "duration.ckpt", dur.params,
                    {"alphabet": dur.alphabet, "hidden": dur.hidden, "version": __version__})
    print(f"trained {len(result.metrics)} epochs; checkpoints in {args.out_dir}")
    return EXIT_OK


def _parse_symbols(text):
    if text is None:
        return None
    parts = text.replace(",", " ").split()
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"text must be a list of integer symbols, got {text!r}") from exc


def cmd_sample(args):
    model, _, meta = load_model(args.checkpoint)
    synth = _synth_from_meta(meta)
    text = _parse_symbols(args.text)
    if args.identity is not None and not 0 <= args.identity < len(model.identity_anchors):
        raise UsageError(f"unknown identity id {args.identity}")
    if args.emotion is not None and not 0 <= args.emotion < model.cfg.n_emotions:
        raise UsageError(f"unknown emotion id {args.emotion}")
    if text is not None and any(not 0 <= s < model.cfg.text_vocab for s in text):
        raise UsageError("unknown text symbol")
    if args.length is not None and args.predict_length:
        raise UsageError("--length and --predict-length are exclusive")
    if args.predict_length:
        if not text:
            raise UsageError("--predict-length needs --text")
        dur_path = Path(args.duration_model or Path(args.checkpoint).parent / "duration.ckpt")
        arrays, dmeta = checkpoint.load(dur_path)
        length = predict_length(text, DurationModel(dmeta["alphabet"], dmeta["hidden"], arrays))
    else:
        length = synth.length if args.length is None else args.length
    if length < 1:
        raise UsageError("--length must be at least 1")
    weights = GuidanceWeights(args.w0, args.w1, args.w2, args.w3)
    scfg = SamplerConfig(n_steps=args.steps, seed=args.seed)
    cond = ConditionSet(identity=args.identity, emotion=args.emotion, text=text)
    grids = sample(model, cond, length, model.cfg.max_levels, weights, scfg, n=args.n)
    records = [DatasetRecord(i, g, args.identity, args.emotion, text, length) for i, g in enumerate(grids)]
    header = {
        "weights": {"w0": weights.w0, "w1": weights.w1, "w2": weights.w2, "w3": weights.w3},
        "steps": scfg.n_steps,
        "seed": scfg.seed,
        "length": length,
        "conditions": {"identity": args.identity, "emotion": args.emotion, "text": None if text is None else list(text)},
        "checkpoint": str(args.checkpoint),
        "config": meta["extra"]["config"],
        "data": meta["extra"]["data"],
        "version": __version__,
    }
    write_records(args.out, records, header)
    print(f"wrote {len(records)} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    records, header = read_records(args.samples)
    if header is not None and "data" in header:
        synth = SynthConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["data"].items()})
        resolved = header.get("config")
    else:
        resolved = _resolve(args)
        synth = cfgmod.synth_config(resolved)
    report = eval_samples(records, synth)
    report["config"] = resolved
    report["version"] = __version__
    _emit(report, args.out)
    return EXIT_OK


def _parse_range(text, default):
    """``a:b:n`` (inclusive linspace) or a comma list; ``None`` keeps the default."""
    if text is None:
        return list(default)
    try:
        if ":" in text:
            lo, hi, n = text.split(":")
            vals = np.linspace(float(lo), float(hi), int(n)).tolist()
        else:
            vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad range {text!r}") from exc
    if not vals:
        raise UsageError(f"empty range {text!r}")
    return [round(v, 10) for v in vals]


def cmd_grid_search(args):
    model, _, meta = load_model(args.checkpoint)
    synth = _synth_from_meta(meta)
    defaults = meta["extra"]["config"]["grid_search"]
    ranges = {k: _parse_range(getattr(args, k), defaults[k]) for k in ("w0", "w1", "w2", "w3")}
    rows, summary = grid_search(model, synth, ranges, n_per=args.n_per, steps=args.steps, seed=args.seed)
    _emit({"ranges": ranges, "rows": rows, "summary": summary, "config": meta["extra"]["config"],
           "version": __version__}, args.out)
    return EXIT_OK


def cmd_oracle_check(args):
    cfg = _resolve(args)
    o = cfg["oracle"]
    synth = cfgmod.oracle_synth_config(cfg)
    checks = oracle_checks(synth, trials=o["trials"], noise=o["noise"], chains=args.chains if args.chains is not None else o["sampling_chains"],
                           steps=o["sampling_steps"], seed=cfg["seed"], score_corruption=args.corrupt_scores)
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} value={c['value']:.3e} threshold={c['threshold']}")
    failed = [c["name"] for c in checks if not c["passed"]]
    if failed:
        print(f"failed invariants: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="rvqdiff", description="Hierarchical-token discrete diffusion toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. train.lr=1e-3")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, help="number of records")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a score network")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stop-after-epoch", type=int, help="stop after this epoch (simulates an interruption)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="generate token grids from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--identity", type=int)
    sp.add_argument("--emotion", type=int)
    sp.add_argument("--text", help="symbol list, e.g. '0,2,1'")
    sp.add_argument("--length", type=int)
    sp.add_argument("--predict-length", action="store_true")
    sp.add_argument("--duration-model")
    sp.add_argument("--steps", type=int, default=96)
    sp.add_argument("--w0", type=float, default=1.9)
    sp.add_argument("--w1", type=float, default=1.0)
    sp.add_argument("--w2", type=float, default=1.0)
    sp.add_argument("--w3", type=float, default=1.6)
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="score samples against the exact distribution and classifier")
    common(sp)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grid-search", help="sweep guidance weights")
    sp.add_argument("--checkpoint", required=True)
    for k in ("w0", "w1", "w2", "w3"):
        sp.add_argument(f"--{k}", help="lo:hi:n or comma list")
    sp.add_argument("--n-per", type=int, default=16)
    sp.add_argument("--steps", type=int, default=96)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_grid_search)

    sp = sub.add_parser("oracle-check", help="run the brute-force invariant suite")
    common(sp)
    sp.add_argument("--chains", type=int)
    sp.add_argument("--corrupt-scores", type=float, default=1.0, help="scale exact scores (negative control)")
    sp.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DomainError, ShapeError, CapacityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        where = f" (last good checkpoint: {exc.last_checkpoint})" if getattr(exc, "last_checkpoint", None) else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
