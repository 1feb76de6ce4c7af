"""Command-line entry point: ``razn {generate,train,eval,bench}``.

Exit statuses: 0 ok, 2 config error, 3 overwrite refused, 4 numeric failure,
5 checkpoint/dataset mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as cfgmod
from .core import (
    BaselineState,
    PatchSampler,
    TrainState,
    baseline_predict,
    baseline_train_step,
    check_compatible,
    evaluate,
    infer_patch,
    load_batch,
    load_state,
    save_state,
    split_refs,
    train_step,
)
from .errors import ArtifactMismatchError, ConfigError, NumericError, PatchRangeError
from .metrics import format_report, relative_time, table_row
from .nets import flop_count, policy_config_from_dict, seg_config_from_dict
from .pyramid import PyramidDataset
from .synthwsi import SynthSpec, confusability_report, generate, spec_from_dict

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EXISTS = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5

log = logging.getLogger("razn")


class OverwriteRefused(Exception):
    pass


def _refuse_if_used(out: Path, marker: str, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OverwriteRefused(f"{out} already holds {marker}; pass --force to overwrite")
        shutil.rmtree(out)


# ------------------------------------------------------------------ generate


def load_spec(path=None, seed: int | None = None) -> SynthSpec:
    if path is None:
        d = {}
        text = ""
    else:
        d, text = cfgmod.read_json(path)
    if seed is not None:
        d["seed"] = seed
    try:
        return spec_from_dict(d)
    except (ConfigError, TypeError, ValueError) as exc:
        if path is None:
            raise ConfigError(str(exc)) from exc
        keys = list(d) + ["size", "levels", "rate", "tile_size", "class_area", "tissue_fraction", "textures", "variants"]
        raise cfgmod.anchored(path, text, exc, keys) from exc


def cmd_generate(args) -> int:
    spec = load_spec(args.config, args.seed)
    out = Path(args.out)
    _refuse_if_used(out, "a dataset", args.force)
    ds = generate(spec, out, workers=args.workers)
    ds = PyramidDataset.open(out)
    report = confusability_report(ds)
    print(json.dumps({"dataset": str(out), "dims": ds.dims, "confusability": report["scores"]}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------- train


def _new_state(cfg: cfgmod.RunConfig):
    if cfg.baseline == "razn":
        return TrainState.create(
            cfg.seg_config(), cfg.policy_config(), cfg.zoom_config(), cfg.schedule(), cfg.settings()
        )
    return BaselineState.create(
        cfg.baseline,
        cfg.seg_config(),
        cfg.schedule(),
        cfg.settings(),
        rate=cfg.rate,
        source=cfg.baseline_source,
        net_size=cfg.net_size,
    )


def _resume_state(cfg: cfgmod.RunConfig, path, ds):
    state, header = load_state(path)
    check_compatible(header, ds)
    if state.kind != cfg.baseline:
        raise ArtifactMismatchError(f"checkpoint holds a {state.kind!r} run, config asks for {cfg.baseline!r}")
    if header["meta"]["settings"] != cfg.settings().__dict__:
        raise ArtifactMismatchError("checkpoint sampling settings differ from the config")
    return state


def train_loop(state, ds: PyramidDataset, steps: int, out: Path, checkpoint_every: int, log_every: int) -> None:
    st = state.settings
    sampler = PatchSampler(
        ds, st.level, st.patch_size, "train", st.stratify, test_fraction=st.test_fraction, seed=st.split_seed
    )
    razn = isinstance(state, TrainState)
    with open(out / "train_log.jsonl", "a") as logf:
        while state.step < steps:
            refs = sampler.draw(state.rng, st.batch_size)
            if razn:
                rep = train_step(state, load_batch(ds, refs, state.zoom.rate))
            else:
                rep = baseline_train_step(state, ds, refs)
            if state.step % log_every == 0 or state.step == steps:
                rec = rep.log_record()
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
                logf.flush()
                log.info("step %d j0 %.4f zoom %.3f", rec["step"], rec["j0_mean"], rec["zoom_fraction"])
            if state.step % checkpoint_every == 0:
                save_state(out / f"ckpt_{state.step:06d}.bin", state, ds)
    save_state(out / "final.bin", state, ds)


def cmd_train(args) -> int:
    overrides = {
        "data": args.data,
        "out": args.out,
        "seed": args.seed,
        "steps": args.steps,
        "baseline": args.baseline,
        "reward_sign": args.reward_sign,
    }
    cfg = cfgmod.resolve(args.config, args.preset, overrides)
    ds = PyramidDataset.open(cfg.data_root())
    out = Path(cfg.out)
    if args.resume:
        state = _resume_state(cfg, args.resume, ds)
    else:
        _refuse_if_used(out, "a training run", args.force)
        state = _new_state(cfg)
        check_compatible({"meta": {"settings": cfg.settings().__dict__, "seg_cfg": cfg.seg_net}}, ds)
    cfgmod.write_resolved(cfg, out)
    train_loop(state, ds, cfg.steps, out, cfg.checkpoint_every, cfg.log_every)
    print(json.dumps({"final": str(out / "final.bin"), "step": state.step}))
    return EXIT_OK


# ----------------------------------------------------------- eval and bench


def _predictor(state, ds, force):
    if isinstance(state, TrainState):

        def predict(ref):
            res = infer_patch(state, ds, ref, force=force)
            return res.mask, res.level, res.record

        return predict
    if force is not None:
        raise ConfigError("--force-action applies to razn checkpoints only")
    return lambda ref: baseline_predict(state, ds, ref)


def _policy_ratio(header) -> float:
    meta = header["meta"]
    if "policy_cfg" not in meta:
        return 0.0
    seg = seg_config_from_dict(meta["seg_cfg"])
    pol = policy_config_from_dict(meta["policy_cfg"])
    size = meta["settings"]["patch_size"]
    return flop_count(seg, pol, (size, size)).ratio


def _open_for_inference(args):
    ds = PyramidDataset.open(cfgmod.data_root(args.data))
    state, header = load_state(args.checkpoint)
    check_compatible(header, ds)
    return ds, state, header


def _write_trace(path: Path, ledger, ratio: float) -> None:
    with open(path, "w") as fh:
        for rec in ledger.records:
            row = {
                "ref": rec.ref,
                "p_tilde": rec.p_tilde,
                "actions": rec.actions,
                "seg_units": {str(k): v for k, v in sorted(rec.seg_units.items())},
                "policy_units": rec.policy_units,
                "cost": rec.cost(ratio),
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_eval(args) -> int:
    if args.out:
        _refuse_if_used(Path(args.out), "an evaluation", args.force)
    ds, state, header = _open_for_inference(args)
    st = state.settings
    refs = split_refs(ds, st.level, st.patch_size, args.split, st.test_fraction, st.split_seed)
    masks = []
    predict = _predictor(state, ds, args.force_action)

    def keep(ref):
        mask, level, rec = predict(ref)
        masks.append((ref, mask, level))
        return mask, level, rec

    acc, ledger = evaluate(keep, ds, refs)
    ratio = _policy_ratio(header)
    row = table_row(acc)
    row["relative_time"] = relative_time(ledger, ratio)
    report = format_report({state.kind: row})
    sys.stdout.write(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(report)
        (out / "metrics.json").write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
        _write_trace(out / "trace.jsonl", ledger, ratio)
        mdir = out / "masks"
        mdir.mkdir()
        for ref, mask, level in masks:
            name = "mask_L{}_{}_{}_at_L{}.png".format(ref.level, ref.row, ref.col, level)
            Image.fromarray(mask.astype(np.uint8), mode="L").save(mdir / name)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.out:
        _refuse_if_used(Path(args.out), "a benchmark", args.force)
    ds, state, header = _open_for_inference(args)
    st = state.settings
    pool = split_refs(ds, st.level, st.patch_size, args.split, st.test_fraction, st.split_seed)
    n = args.n_patches
    if n < 1 or n > len(pool):
        raise ConfigError(f"--n-patches must lie in [1, {len(pool)}] for split {args.split!r}")
    pick = np.sort(np.random.default_rng(args.seed).choice(len(pool), n, replace=False))
    refs = [pool[i] for i in pick]
    predict = _predictor(state, ds, args.force_action)
    _, ledger = evaluate(predict, ds, refs)
    ratio = _policy_ratio(header)
    mean, std = relative_time(ledger, ratio)
    result = {
        "n_patches": n,
        "policy_ratio": ratio,
        "relative_time_mean": mean,
        "relative_time_std": std,
        "zoom_fraction": float(np.mean([r.actions[0] if r.actions else 0 for r in ledger.records])),
    }
    print(json.dumps(result, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        _write_trace(out / "trace.jsonl", ledger, ratio)
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="razn", description="Zoom-policy segmentation over image pyramids.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic pyramid")
    g.add_argument("--config", help="JSON generator spec (defaults apply when omitted)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a zoom model or a single-scale baseline")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS))
    t.add_argument("--data")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--baseline", choices=cfgmod.RUN_KINDS)
    t.add_argument("--reward-sign", choices=("as-written", "loss-decrease"))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint"), ("bench", cmd_bench, "cost benchmark")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data")
        e.add_argument("--split", default="test" if name == "eval" else "all", choices=("train", "test", "all"))
        e.add_argument("--out")
        e.add_argument("--force", action="store_true")
        e.add_argument("--force-action", choices=("break", "zoom"))
        e.add_argument("--seed", type=int, default=0)
        if name == "bench":
            e.add_argument("--n-patches", type=int, default=100)
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except OverwriteRefused as exc:
        print(f"razn: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except NumericError as exc:
        print(f"razn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactMismatchError as exc:
        print(f"razn: artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ConfigError, PatchRangeError) as exc:
        print(f"razn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
