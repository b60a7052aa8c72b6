"""Command-line entry point: ``posepair <subcommand> ...``.

Every run writes ``<output>.manifest.json`` recording the resolved
configuration, input and output hashes and tool versions; ``posepair
--from-manifest FILE`` re-executes a run from its manifest alone.

Exit codes: 0 success, 2 usage, 3 bad or inconsistent input,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from contextlib import ExitStack
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .body import generate_corpus, load_body, read_corpus, write_corpus
from .evaluation import AblationConfig, evaluate_dataset, run_ablation
from .kinematics import load_profile
from .pairing import (
    DEFAULT_IK_CAP,
    PairedDataset,
    ScaleTheta,
    filter_extreme,
    generate_pairs,
    read_calibration,
    recompute_phi,
    search_theta,
    verify_dataset,
)
from .prior import IKConfig, PosePrior
from .retarget import OneStageRetargeter, TrainConfig, TwoStageRetargeter, load_model, retarget_stream, train

logger = logging.getLogger("posepair")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_DIR_ENV = "POSEPAIR_OUTPUT_DIR"
MANIFEST_FORMAT = "posepair.manifest/1"


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _bundled(name):
    return resources.files("posepair.data").joinpath(name)


def _profile(args):
    if args.profile:
        return load_profile(args.profile)
    with ExitStack() as stack:
        path = stack.enter_context(resources.as_file(_bundled("reachy_like.json")))
        stack.enter_context(resources.as_file(_bundled("reachy_like.urdf")))
        return load_profile(path)


def _require(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).is_file():
        raise InputError(f"{what} file not found: {path}")
    return path


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args, out):
    body = load_body(args.body)
    poses = generate_corpus(body, args.count, args.rank, args.seed, args.noise, args.model_seed)
    meta = {"rank": args.rank, "seed": args.seed, "model_seed": args.model_seed, "noise": args.noise, "body_hash": body.source_hash}
    write_corpus(out, poses, body, meta)
    return {"count": args.count}


def cmd_train_prior(args, out):
    header, poses = read_corpus(_require(args.corpus, "corpus"))
    prior = PosePrior(
        latent_dim=args.latent_dim,
        hidden_dim=args.hidden_dim,
        beta=args.beta,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        random_state=args.seed,
    )
    prior.fit(poses.reshape(len(poses), -1))
    sha = prior.save(out)
    return {"prior_sha256": sha, "best_epoch": prior.best_epoch_, "train_mse": prior.train_mse_}


def _load_prior(args):
    return PosePrior.load(_require(args.prior, "prior"))


def cmd_search_theta(args, out):
    profile, body, prior = _profile(args), load_body(args.body), _load_prior(args)
    _, calibration = read_calibration(args.calibration)
    ranges = {}
    if args.scale_range:
        ranges["scale"] = list(args.scale_range)
    if args.translation_range:
        ranges["translation"] = [list(args.translation_range)] * 3
    theta, err, log = search_theta(calibration, profile, prior, body, args.trials, args.seed, ranges=ranges or None)
    with open(out, "w") as f:
        json.dump({"theta": theta.to_dict(), "error": err, "trials": log}, f, indent=1, sort_keys=True)
    print(f"theta: scale={theta.scale:.4f} translation={np.round(theta.translation, 4).tolist()} error={err:.4f} m")
    return {"theta": theta.to_dict(), "error": err}


def _theta(args, profile):
    if not args.theta:
        return ScaleTheta.from_dict(profile.theta)
    with open(_require(args.theta, "theta")) as f:
        doc = json.load(f)
    return ScaleTheta.from_dict(doc.get("theta", doc))


def cmd_pair(args, out):
    profile, body, prior = _profile(args), load_body(args.body), _load_prior(args)
    ik = IKConfig(max_iters=args.ik_iters)
    D, _ = generate_pairs(
        profile, prior, body, _theta(args, profile), args.count, args.seed, ik, args.chunk_size, args.start, args.workers
    )
    D.write(out)
    return {"count": len(D), "median_ik_residual": float(np.median(D.ik_residual))}


def cmd_filter(args, out):
    D = PairedDataset.read(_require(args.dataset, "dataset"))
    cap = None if args.ik_cap <= 0 else args.ik_cap
    kept, report = filter_extreme(D, ik_cap=cap)
    kept.write(out)
    print(f"tau={report.tau:.5f} kept {report.n_kept}/{report.n_total} ({report.removed_fraction:.1%} removed)")
    return report.to_dict()


def cmd_train(args, out):
    D = PairedDataset.read(_require(args.dataset, "dataset"))
    profile = _profile(args)
    cfg = TrainConfig(args.lr, args.batch_size, args.weight_decay, args.epochs, args.seed, resample=not args.no_resample)
    cls = OneStageRetargeter if args.one_stage else TwoStageRetargeter
    model, log = train(D, profile, cfg, model_cls=cls)
    sha = model.save(out)
    with open(str(out) + ".log.json", "w") as f:
        json.dump(log, f, indent=1, sort_keys=True)
    best = model.history_[model.best_epoch_ - 1] if model.best_epoch_ else {}
    print(f"best epoch {model.best_epoch_}: {best}")
    return {"model_sha256": sha, "best_epoch": model.best_epoch_, "iterations": model.n_iter_}


def cmd_eval(args, out):
    profile = _profile(args)
    model = load_model(_require(args.model, "model"), profile)
    D = PairedDataset.read(_require(args.dataset, "dataset"))
    report = evaluate_dataset(model, profile, D, {"model_path": str(args.model)})
    report.write_json(out)
    report.write_csv(str(out) + ".csv")
    print(f"joint {report.joint_error_rad:.4f} rad  link {report.link_error_cm:.3f} cm  (n={report.n_samples})")
    return {"joint_rad": report.joint_error_rad, "link_cm": report.link_error_cm}


def cmd_ablate(args, out):
    profile = _profile(args)
    raw = PairedDataset.read(_require(args.dataset, "dataset"))
    test = PairedDataset.read(args.test) if args.test else None
    cfg = AblationConfig(
        seeds=tuple(args.seeds), epochs=args.epochs, batch_size=args.batch_size, ik_cap=None if args.ik_cap <= 0 else args.ik_cap
    )
    result = run_ablation(raw, profile, cfg, test)
    result.write(out, str(out) + ".csv")
    print(result.format_table())
    return {"summary": result.summary(), "iteration_gap": result.iteration_gap()}


def cmd_retarget(args, out):
    profile = _profile(args)
    model = load_model(_require(args.model, "model"), profile)
    n = retarget_stream(model, _require(args.input, "input"), out)
    return {"frames": n}


def cmd_verify(args, out):
    D = PairedDataset.read(_require(args.dataset, "dataset"))
    profile = _profile(args)
    problems = verify_dataset(D, profile.chain)
    if args.prior:
        phi = recompute_phi(_load_prior(args), D)
        bad = np.flatnonzero(np.abs(phi - D.phi) > 1e-9 * np.maximum(1.0, np.abs(D.phi)))
        problems += [f"record {i}: stored phi differs from recomputed" for i in bad]
    if out is not None:
        with open(out, "w") as f:
            json.dump({"records": len(D), "problems": problems}, f, indent=1)
    for p in problems[:50]:
        print(p)
    print(f"{len(D)} records, {len(problems)} problems")
    if problems:
        raise InputError("dataset failed verification")
    return {"records": len(D), "problems": 0}


# ---------------------------------------------------------------- parser

COMMANDS = {
    "gen-corpus": (cmd_gen_corpus, "corpus.jsonl", ("body",)),
    "train-prior": (cmd_train_prior, "prior.json", ("corpus",)),
    "search-theta": (cmd_search_theta, "theta.json", ("profile", "prior", "body", "calibration")),
    "pair": (cmd_pair, "pairs.jsonl", ("profile", "prior", "body", "theta")),
    "filter": (cmd_filter, "filtered.jsonl", ("dataset",)),
    "train": (cmd_train, "model.json", ("dataset", "profile")),
    "eval": (cmd_eval, "report.json", ("model", "dataset", "profile")),
    "ablate": (cmd_ablate, "ablation.json", ("dataset", "test", "profile")),
    "retarget": (cmd_retarget, "motion.jsonl", ("model", "input", "profile")),
    "verify": (cmd_verify, None, ("dataset", "profile", "prior")),
}


def build_parser():
    p = argparse.ArgumentParser(prog="posepair", description="Robot/human pose pairing and retargeting pipeline.")
    p.add_argument("--version", action="version", version=f"posepair {__version__}")
    p.add_argument("--output-dir", help=f"directory for relative outputs (default: ${OUTPUT_DIR_ENV} or cwd)")
    p.add_argument("--from-manifest", metavar="FILE", help="re-run the command recorded in a manifest")
    p.add_argument("-o", "--output", dest="top_output", help="with --from-manifest: write to this path instead")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command")

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("-o", "--output", help=f"output path (default {COMMANDS[name][1]})")
        return s

    s = cmd("gen-corpus", "generate a synthetic natural-pose corpus")
    s.add_argument("--body")
    s.add_argument("--count", type=int, default=10000)
    s.add_argument("--rank", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--model-seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.05)

    s = cmd("train-prior", "train the body-pose prior on a corpus")
    s.add_argument("--corpus")
    s.add_argument("--latent-dim", type=int, default=32)
    s.add_argument("--hidden-dim", type=int, default=512)
    s.add_argument("--beta", type=float, default=0.005)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)

    s = cmd("search-theta", "random search for the robot-to-human scale/offset")
    for name in ("profile", "prior", "body", "calibration"):
        s.add_argument(f"--{name}")
    s.add_argument("--trials", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale-range", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--translation-range", type=float, nargs=2, metavar=("LO", "HI"))

    s = cmd("pair", "generate paired robot/human samples")
    for name in ("profile", "prior", "body", "theta"):
        s.add_argument(f"--{name}")
    s.add_argument("-n", "--count", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--chunk-size", type=int, default=128)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--ik-iters", type=int, default=IKConfig.max_iters)

    s = cmd("filter", "drop extreme poses (phi above mean + std)")
    s.add_argument("--dataset")
    s.add_argument("--ik-cap", type=float, default=DEFAULT_IK_CAP, help="IK residual cap in meters (<= 0 disables)")

    s = cmd("train", "train a retargeting network")
    s.add_argument("--dataset")
    s.add_argument("--profile")
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--weight-decay", type=float, default=1e-6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--one-stage", action="store_true")
    s.add_argument("--no-resample", action="store_true")

    s = cmd("eval", "evaluate a model on a paired dataset")
    for name in ("model", "dataset", "profile"):
        s.add_argument(f"--{name}")

    s = cmd("ablate", "run the filter / two-stage ablation")
    for name in ("dataset", "test", "profile"):
        s.add_argument(f"--{name}")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--ik-cap", type=float, default=DEFAULT_IK_CAP)

    s = cmd("retarget", "retarget a human-pose stream file")
    for name in ("model", "input", "profile"):
        s.add_argument(f"--{name}")

    s = cmd("verify", "check dataset self-consistency")
    for name in ("dataset", "profile", "prior"):
        s.add_argument(f"--{name}")
    return p


def _resolve_output(args, command):
    default = COMMANDS[command][1]
    path = args.output or default
    if path is None:
        return None
    path = Path(path)
    if not path.is_absolute():
        base = args.output_dir or os.environ.get(OUTPUT_DIR_ENV)
        if base:
            path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _config(args):
    skip = {"output_dir", "from_manifest", "top_output", "verbose", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _input_hashes(args, command):
    out = {}
    for name in COMMANDS[command][2]:
        path = getattr(args, name, None)
        if path:
            if not Path(path).is_file():
                raise InputError(f"{name} file not found: {path}")
            out[name] = {"path": str(path), "sha256": file_hash(path)}
    return out


def write_manifest(path, command, args, inputs, outputs, result):
    doc = {
        "format": MANIFEST_FORMAT,
        "tool": "posepair",
        "version": __version__,
        "command": command,
        "config": _config(args),
        "inputs": inputs,
        "outputs": outputs,
        "result": result,
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True, default=str)


def _from_manifest(path, output_override):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != MANIFEST_FORMAT or doc.get("command") not in COMMANDS:
        raise InputError(f"{path}: not a posepair manifest")
    for name, rec in doc["inputs"].items():
        if not Path(rec["path"]).is_file():
            raise InputError(f"manifest input {name} missing: {rec['path']}")
        if file_hash(rec["path"]) != rec["sha256"]:
            raise InputError(f"manifest input {name} changed since the recorded run: {rec['path']}")
    args = argparse.Namespace(**doc["config"])
    args.command = doc["command"]
    args.output_dir = None
    if output_override:
        args.output = output_override
    return args


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.from_manifest:
        if args.command:
            raise UsageError("--from-manifest does not take a subcommand")
        verbose = args.verbose
        args = _from_manifest(args.from_manifest, args.top_output)
        args.verbose = verbose
    elif not args.command:
        parser.print_usage(sys.stderr)
        raise UsageError("a subcommand is required")
    command = args.command
    func = COMMANDS[command][0]
    inputs = _input_hashes(args, command)
    out = _resolve_output(args, command)
    result = func(args, out)
    if out is not None:
        outputs = {"path": str(out), "sha256": file_hash(out)}
        write_manifest(str(out) + ".manifest.json", command, args, inputs, outputs, result)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"posepair: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"posepair: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError, ValueError, KeyError) as exc:
        print(f"posepair: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
