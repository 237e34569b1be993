"""Command-line front door: track generation/validation, system
identification, PPO training, and closed-loop evaluation.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.  Every
failure prints a single machine-parsable ``error:`` line.  APEX_SEED serves
as the seed fallback for all commands.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, envs, evalkit, sysid, track, trainer
from .configfile import read_kv
from .dynamics import VehicleParams, read_params, write_params
from .errors import ApexError, CheckpointError, ConfigError, ParseError

USAGE_EXIT = 2
FAILURE_EXIT = 1


def _seed_default(explicit):
    if explicit is not None:
        return explicit
    env = os.environ.get("APEX_SEED")
    return int(env) if env else 0


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config_snapshot, seed, inputs, outputs):
    """Record the resolved run configuration before the work starts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config_snapshot,
        "seed": seed,
        "version": __version__,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# track

def cmd_track(args):
    if args.track_cmd == "gen":
        seed = _seed_default(args.seed)
        if args.shape == "oval":
            pts, widths = track.generate_oval(args.length, args.width)
        elif args.shape == "lshape":
            pts, widths = track.generate_lshape(args.length, args.width)
        else:
            pts, widths = track.generate_random(args.length, args.width, seed)
        track.save_track_csv(args.out, pts, widths)
        trk = track.load_track(args.out)
        print(f"wrote {args.out}: {args.shape}, length {trk.total_length:.2f} m, "
              f"width {args.width:.2f} m")
        return 0
    if args.track_cmd == "validate":
        trk = track.load_track(args.file, resolution=args.resolution,
                               vehicle_width=args.vehicle_width)
        track.validate_track(trk)
        print(f"{args.file}: ok (length {trk.total_length:.2f} m, "
              f"{trk.n_segments} grid points)")
        return 0
    if args.track_cmd == "resample":
        trk = track.load_track(args.file, resolution=args.resolution,
                               vehicle_width=args.vehicle_width)
        track.export_resampled(args.out, trk)
        print(f"wrote {args.out}")
        return 0
    raise ConfigError(f"unknown track subcommand {args.track_cmd!r}")


# ---------------------------------------------------------------------------
# sysid

_SYSID_FILE_KEYS = {
    "horizon": int, "learning_rate": float, "weight_decay": float,
    "batch_size": int, "epochs": int, "gradient_mode": str,
    "fd_step": float, "max_grad_norm": float, "reject_grad_norm": float,
    "seed": int,
}


def cmd_sysid(args):
    seed = _seed_default(args.seed)
    kwargs = {"seed": seed}
    if args.config:
        raw = read_kv(args.config)
        for key, conv in _SYSID_FILE_KEYS.items():
            if key in raw:
                kwargs[key] = conv(raw.pop(key))
        if raw:
            raise ConfigError(f"{args.config}: unknown keys {sorted(raw)}")
    for key in ("horizon", "learning_rate", "epochs", "gradient_mode"):
        flag = getattr(args, key)
        if flag is not None:
            kwargs[key] = flag
    config = sysid.SysIdConfig(**kwargs)

    init = read_params(args.init) if args.init else VehicleParams.nominal()
    out_dir = Path(args.out)
    inputs = [args.log] + ([args.init] if args.init else []) \
        + ([args.config] if args.config else [])
    write_manifest(out_dir, "sysid", _config_dict(config), seed, inputs,
                   [out_dir / "fitted_params.txt", out_dir / "loss_history.csv"])

    log = sysid.ingest_log(args.log)
    velocities = sysid.estimate_velocities(log)
    segments = sysid.make_segments(log, velocities, config.horizon)
    if not segments:
        raise ConfigError(
            f"log too short: {len(log)} samples < horizon {config.horizon}")
    if config.epochs == 0:
        fitted, history = init, []
    else:
        fitted, history = sysid.fit(segments, init, config)
    write_params(out_dir / "fitted_params.txt", fitted,
                 header=f"fitted from {args.log} ({len(segments)} segments)")
    with open(out_dir / "loss_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for k, loss in enumerate(history):
            writer.writerow([k, f"{loss:.10g}"])
    print(f"wrote {out_dir / 'fitted_params.txt'} "
          f"({len(segments)} segments, {config.epochs} epochs)")
    return 0


def _config_dict(cfg):
    out = {}
    for key, val in vars(cfg).items():
        if isinstance(val, (str, int, float, bool, type(None))):
            out[key] = val
        elif isinstance(val, tuple):
            out[key] = list(val)
        elif isinstance(val, dict):
            out[key] = val
        else:
            out[key] = repr(val)
    return out


# ---------------------------------------------------------------------------
# train

_TRAIN_FILE_KEYS = {
    "gamma": float, "gae_lambda": float, "clip_epsilon": float,
    "n_envs": int, "n_steps": int, "batch_size": int,
    "epochs_per_update": int, "lr_start": float, "lr_end": float,
    "total_steps": float, "entropy_coef": float, "value_coef": float,
    "max_grad_norm": float, "init_log_std": float, "seed": int,
    "threads": int, "checkpoint_every": int,
}


def _load_ppo_config(args):
    kwargs = {}
    if args.ppo_config:
        raw = read_kv(args.ppo_config)
        for key, conv in _TRAIN_FILE_KEYS.items():
            if key in raw:
                kwargs[key] = conv(raw.pop(key))
        if raw:
            raise ConfigError(f"{args.ppo_config}: unknown keys {sorted(raw)}")
    for flag, key in (("steps", "total_steps"), ("n_envs", "n_envs"),
                      ("n_steps", "n_steps"), ("threads", "threads"),
                      ("checkpoint_every", "checkpoint_every")):
        val = getattr(args, flag)
        if val is not None:
            kwargs[key] = val
    kwargs["seed"] = _seed_default(
        args.seed if args.seed is not None else kwargs.get("seed"))
    return trainer.PpoConfig(**kwargs)


def cmd_train(args):
    trk, params, env_config = envs.load_env_setup(args.env_config)
    if args.ablation:
        env_config = envs.apply_ablation(env_config, args.ablation)
    config = _load_ppo_config(args)
    out_dir = Path(args.out)
    inputs = [args.env_config] + ([args.ppo_config] if args.ppo_config else []) \
        + ([args.resume] if args.resume else [])
    write_manifest(out_dir, "train",
                   {"env": _config_dict(env_config), "ppo": _config_dict(config),
                    "ablation": args.ablation},
                   config.seed, inputs,
                   [out_dir / "training_log.csv", out_dir / "ckpt_final.bin"])
    _, rows = trainer.train(trk, params, env_config, config,
                            out_dir=out_dir, resume=args.resume)
    final = rows[-1] if rows else None
    if final:
        print(f"trained {final['env_steps']:.0f} env steps over "
              f"{len(rows)} updates; mean episodic progress "
              f"{final['mean_ep_progress']:.2f} m")
    else:
        print("zero-step budget: wrote initialized checkpoint only")
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args):
    trk, params, env_config = envs.load_env_setup(args.env_config)
    if args.ablation:
        env_config = envs.apply_ablation(env_config, args.ablation)
    seed = _seed_default(args.seed)
    out_dir = Path(args.out)

    if args.baseline:
        controller = evalkit.BaselineController()
        ctrl_name = "baseline"
        inputs = [args.env_config]
    else:
        if not args.checkpoint:
            raise ConfigError("need --checkpoint or --baseline")
        env_probe = envs.RacingEnv(trk, params, env_config, seed=seed)
        meta = trainer.load_checkpoint(args.checkpoint,
                                       expected_obs_dim=env_probe.obs_dim)
        controller = evalkit.PolicyController(meta["net"])
        ctrl_name = str(args.checkpoint)
        inputs = [args.env_config, args.checkpoint]

    write_manifest(out_dir, "eval",
                   {"env": _config_dict(env_config), "laps": args.laps,
                    "controller": ctrl_name, "ablation": args.ablation},
                   seed, inputs,
                   [out_dir / "report.json", out_dir / "trajectory.csv"])
    env = envs.RacingEnv(trk, params, env_config, seed=seed)
    traj = evalkit.run_eval(controller, env, n_laps=args.laps,
                            max_steps=args.max_steps)
    report = evalkit.build_report(traj, trk)
    evalkit.export_report(traj, report, trk, out_dir)
    fastest = (f"{report.fastest_clean_lap:.3f} s"
               if report.fastest_clean_lap is not None else "none")
    print(f"laps {report.lap_count}, fastest clean {fastest}, "
          f"crash rate {report.crash_rate:.2f}, E_off {report.e_off:.5f} m*s")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="apex",
        description="Desk-scale autonomous racing toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_track = sub.add_parser("track", help="generate / validate / resample tracks")
    track_sub = p_track.add_subparsers(dest="track_cmd", required=True)
    p_gen = track_sub.add_parser("gen", help="emit a synthetic track CSV")
    p_gen.add_argument("--shape", choices=("oval", "lshape", "random"),
                       required=True)
    p_gen.add_argument("--length", type=float, default=17.0)
    p_gen.add_argument("--width", type=float, default=1.0)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--out", required=True)
    for name in ("validate", "resample"):
        p = track_sub.add_parser(name)
        p.add_argument("file")
        p.add_argument("--resolution", type=float, default=0.05)
        p.add_argument("--vehicle-width", type=float, default=0.0)
        if name == "resample":
            p.add_argument("--out", required=True)

    p_sysid = sub.add_parser("sysid", help="fit vehicle parameters from a drive log")
    p_sysid.add_argument("--log", required=True)
    p_sysid.add_argument("--init", default=None,
                         help="initial parameter file (default: nominal)")
    p_sysid.add_argument("--config", default=None, help="sysid config file")
    p_sysid.add_argument("--out", required=True)
    p_sysid.add_argument("--epochs", type=int, default=None)
    p_sysid.add_argument("--horizon", type=int, default=None)
    p_sysid.add_argument("--learning-rate", dest="learning_rate",
                         type=float, default=None)
    p_sysid.add_argument("--gradient-mode", dest="gradient_mode",
                         choices=("analytic", "fd"), default=None)
    p_sysid.add_argument("--seed", type=int, default=None)

    p_train = sub.add_parser("train", help="train the PPO racing policy")
    p_train.add_argument("--env-config", required=True)
    p_train.add_argument("--ppo-config", default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--steps", type=float, default=None,
                         help="override the total env-step budget")
    p_train.add_argument("--n-envs", type=int, default=None)
    p_train.add_argument("--n-steps", type=int, default=None)
    p_train.add_argument("--threads", type=int, default=None)
    p_train.add_argument("--checkpoint-every", type=int, default=None)
    p_train.add_argument("--resume", default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--ablation", default=None,
                         help="obs-s | wheel-speed | no-actuators | "
                              "dr-friction-<sigma> | dr-all-<sigma>")

    p_eval = sub.add_parser("eval", help="closed-loop evaluation")
    group = p_eval.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", default=None)
    group.add_argument("--baseline", action="store_true")
    p_eval.add_argument("--env-config", required=True)
    p_eval.add_argument("--laps", type=int, default=20)
    p_eval.add_argument("--max-steps", type=int, default=None)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--ablation", default=None)
    return parser


_HANDLERS = {"track": cmd_track, "sysid": cmd_sysid,
             "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except ApexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FAILURE_EXIT
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
