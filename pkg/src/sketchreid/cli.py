"""Command-line entry point.

Subcommands: gen-data, train, eval, augment, perturb, diagnose. Exit codes:
0 success, 1 invalid input (bad flags, config, paths, checkpoints), 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import aa, encoder, evaluation, metaloop, runconfig
from .core import CheckpointError, ConfigError, Modality, Sample, ShapeMismatchError, save_checkpoint, seeded_rng
from .data import (ManifestError, SyntheticSpec, generate_synthetic, load_manifest, load_splits, read_image,
                   validate, write_image)
from .ktc import PerturbationState, optimize_eta

log = logging.getLogger("sketchreid")


class UsageError(Exception):
    """Bad invocation: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _kv(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
    return key.strip(), value.strip()


# ---------------------------------------------------------------------------
# helpers

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _manifest_path(data: Optional[str], cfg: runconfig.RunConfig) -> Path:
    if data is None:
        if not cfg.train.data_root:
            raise UsageError("no dataset given: pass --data or set [data] root")
        data = cfg.train.data_root
    p = Path(data)
    return p / cfg.train.manifest if p.is_dir() else p


def _load_splits(data, cfg):
    manifest = load_manifest(_manifest_path(data, cfg))
    problems = validate(manifest)
    if problems:
        raise UsageError("dataset failed validation:\n  " + "\n  ".join(problems))
    return load_splits(manifest)


def _run_config(args) -> runconfig.RunConfig:
    cfg = runconfig.load(getattr(args, "config", None))
    overrides = dict(getattr(args, "set", None) or [])
    for flag, key in (("seed", "train.seed"), ("cycles", "train.cycles")):
        if getattr(args, flag, None) is not None:
            overrides[key] = str(getattr(args, flag))
    return runconfig.apply_overrides(cfg, overrides)


def _load_model(path: str):
    state, config, _, _ = metaloop.load_state(path)
    return state, config


def _plot_losses(records: Sequence[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for phase in ("meta_train", "meta_test"):
        rs = [r for r in records if r["phase"] == phase]
        if rs:
            ax.plot([r["step"] for r in rs], [r["total"] for r in rs], label=phase, lw=0.8)
    ax.set_xlabel("meta-train step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_cmc(report: evaluation.MetricsReport, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = sorted(report.rank_k)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(ks, [report.rank_k[k] for k in ks], marker="o")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1)
    ax.set_title(f"mAP {report.map:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _image_dir(path: str) -> list[Path]:
    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"input directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise UsageError(f"no images in {d}")
    return files


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    spec = cfg.synthetic
    fields = {"seed": args.seed, "n_identities": args.n_identities,
              "images_per_identity_per_modality": args.images_per_identity, "height": args.height,
              "width": args.width, "n_artists": args.n_artists,
              "n_episode_identities": args.n_episode_identities, "n_eval_identities": args.n_eval_identities}
    spec = SyntheticSpec(**{**spec.__dict__, **{k: v for k, v in fields.items() if v is not None}})
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = generate_synthetic(spec, args.out)
    summary = {"images": len(manifest.records), "identities": spec.n_identities,
               "manifest": str(Path(args.out) / "manifest.csv"), "checksum": manifest.checksum}
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    splits = _load_splits(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(runconfig.render(cfg))
    t0 = time.time()

    def progress(state, _rng):
        if state.cycle % 10 == 0 or state.cycle == cfg.train.cycles:
            log.info("cycle %d/%d (%.0fs)", state.cycle, cfg.train.cycles, time.time() - t0)

    result = metaloop.run(cfg.train, splits, out, resume_from=args.resume, on_cycle=progress)
    if args.plot:
        lines = (out / "metrics.jsonl").read_text().splitlines()
        _plot_losses([json.loads(l) for l in lines], out / "losses.png")
    print(json.dumps({"cycles": result.state.cycle, "steps": result.state.step,
                      "checkpoint": str(out / "final")}))
    return 0


def cmd_eval(args) -> int:
    state, train_cfg = _load_model(args.checkpoint)
    cfg = runconfig.RunConfig(train_cfg)
    splits = _load_splits(args.data, cfg)
    if not splits.eval_query or not splits.gallery:
        raise UsageError("dataset has no held-out query/gallery identities")
    steps = train_cfg.adaptation_steps if args.adaptation_steps is None else args.adaptation_steps
    if steps < 0:
        raise UsageError("--adaptation-steps must be >= 0")
    params = state.params
    if steps:
        rng = seeded_rng(train_cfg.seed if args.seed is None else args.seed)
        episode = metaloop.sample_episode(splits.support, splits.query, rng, train_cfg.n_way,
                                          frozenset(splits.label_map))
        eta = state.perturbation.eta if train_cfg.use_ktc else None
        params = metaloop.adapt(params, episode, train_cfg, eta, steps)
    report = evaluation.evaluate_retrieval(params, splits.eval_query, splits.gallery)
    record = {**report.as_dict(), "adaptation_steps": steps, "checkpoint": str(args.checkpoint)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "eval.json", record)
        if args.plot:
            _plot_cmc(evaluation.retrieval_report(
                encoder.encode(splits.eval_query, params), [s.identity for s in splits.eval_query],
                encoder.encode(splits.gallery, params), [s.identity for s in splits.gallery],
                ks=range(1, min(20, len(splits.gallery)) + 1)), out / "cmc.png")
    elif args.plot:
        raise UsageError("--plot needs --out")
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_augment(args) -> int:
    files = _image_dir(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = seeded_rng(args.seed)
    lines = ["filename,top,left,height,width,global_norm,local_norm"]
    for f in files:
        img = read_image(f)
        local, sketch, rect = aa.augment(img, rng, sigma=args.sigma, guard=args.guard)
        write_image(out / f"{f.stem}_sketch.png", sketch)
        write_image(out / f"{f.stem}_local.png", local)
        g, l = aa.delta_norms(img, sketch, aa.rect_mask(rect, *img.shape[:2]))
        lines.append(f"{f.name},{rect.top},{rect.left},{rect.height},{rect.width},{g:.6f},{l:.6f}")
    (out / "records.csv").write_text("\n".join(lines) + "\n")
    print(json.dumps({"images": len(files), "records": str(out / "records.csv")}))
    return 0


def _identity_from_name(name: str, fallback: int) -> int:
    head = name.split("_", 1)[0]
    return int(head) if head.isdigit() else fallback


def cmd_perturb(args) -> int:
    state, cfg = _load_model(args.checkpoint)
    files = _image_dir(args.input)
    samples = [Sample(read_image(f), _identity_from_name(f.stem, 10_000 + i), Modality(args.modality))
               for i, f in enumerate(files)]
    ids = [s.identity for s in samples]
    if len(set(ids)) < 2:
        raise UsageError("need images of at least 2 identities (prefix file names with NNNN_)")
    h, w = samples[0].image.shape[:2]
    steps = cfg.max_iter if args.steps is None else args.steps
    pert = PerturbationState.from_config(cfg, h, w)
    if args.continue_eta and state.perturbation is not None:
        pert = pert.replace(eta=state.perturbation.eta.copy())
    params = state.params
    x = encoder.to_tensor(np.stack([s.image for s in samples]))
    route = encoder.sketch_route([s.modality for s in samples], cfg.augmented_route)
    with torch.no_grad():
        _, bank = encoder.embed(params, x, route)
    history: list[float] = []
    pert = optimize_eta(params, x, route, ids, bank, ids, pert, cfg.rho, cfg.update_direction, steps, history)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "eta", {}, pert, cfg)
    summary = {"final_loss": history[-1] if history else None, "eta_linf": float(np.abs(pert.eta).max()),
               "eta_l2": float(np.linalg.norm(pert.eta)), "iterations": pert.iteration,
               "skipped": pert.skipped, "images": len(samples)}
    _write_json(out / "perturb.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_diagnose(args) -> int:
    state, train_cfg = _load_model(args.checkpoint)
    splits = _load_splits(args.data, runconfig.RunConfig(train_cfg))
    eps = train_cfg.epsilon_unit if args.epsilon is None else args.epsilon / 255.0
    rgb = splits.gallery or splits.support
    sketches = splits.eval_query or splits.query
    rep = evaluation.diagnose(state.params, rgb, sketches, eps, seeded_rng(args.seed),
                              train_cfg.sketch_sigma, train_cfg.sketch_guard, n=args.n)
    record = rep.as_dict()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "diagnostics.json", record)
    print(json.dumps(record, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sketchreid", description="Sketch-to-photo re-identification with meta-learning.")
    p.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write the procedural synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-identities", type=int)
    g.add_argument("--images-per-identity", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--n-artists", type=int)
    g.add_argument("--n-episode-identities", type=int)
    g.add_argument("--n-eval-identities", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="episodic training run")
    t.add_argument("--config", help="INI config file")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--data", help="dataset directory or manifest.csv")
    t.add_argument("--seed", type=int)
    t.add_argument("--cycles", type=int)
    t.add_argument("--set", type=_kv, action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config key (repeatable)")
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.add_argument("--plot", action="store_true", help="write losses.png")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out sketch -> RGB retrieval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory or manifest.csv")
    e.add_argument("--adaptation-steps", type=int, help="fine-tuning steps on one target episode")
    e.add_argument("--seed", type=int, help="episode seed for adaptation (default: training seed)")
    e.add_argument("--out")
    e.add_argument("--plot", action="store_true", help="write cmc.png")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("augment", help="sketch and local sketch replacement for a directory of images")
    a.add_argument("--input", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--sigma", type=float, default=2.0)
    a.add_argument("--guard", type=float, default=1e-4)
    a.set_defaults(func=cmd_augment)

    u = sub.add_parser("perturb", help="fit a universal perturbation to a directory of images")
    u.add_argument("--checkpoint", required=True)
    u.add_argument("--input", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--steps", type=int, help="iterations (default: max_iter from the checkpoint config)")
    u.add_argument("--modality", choices=[m.value for m in Modality], default="rgb")
    u.add_argument("--continue-eta", action="store_true", help="start from the checkpoint's perturbation")
    u.set_defaults(func=cmd_perturb)

    d = sub.add_parser("diagnose", help="robustness and modality-gap diagnostics")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", help="dataset directory or manifest.csv")
    d.add_argument("--epsilon", type=float, help="perturbation bound in pixel units (default: config)")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("-n", type=int, default=32, help="images per estimate")
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)
    return p


_INPUT_ERRORS = (UsageError, ConfigError, ManifestError, CheckpointError, ShapeMismatchError,
                 FileNotFoundError, NotImplementedError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = args.log_level
    if level is None and getattr(args, "config", None):
        try:
            level = runconfig.load(args.config).log_level
        except ConfigError:
            level = None
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level or "INFO")
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
