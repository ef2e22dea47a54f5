"""Batch command-line interface.

Commands map one-to-one onto the library operations: ``train`` runs the
pre-training loop, ``eval`` scores a checkpoint's probe, ``probe-*`` run the
analysis battery, and ``rf`` prints receptive-field tables and solved
configurations. Every run directory receives a manifest before any compute
starts, sufficient to reproduce the run.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, config as config_mod, probes, rf, trainer
from .probes import AttackSpec
from .trainer import TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

_FLAG_KEYS = [
    "dataset", "eval_dataset", "dataset_format", "image_size", "num_classes",
    "epochs", "batch_size", "base_lr", "lr_schedule", "warmup_frac",
    "optimizer", "momentum", "weight_decay", "seed", "w_s", "tau",
    "grid_target", "proj_hidden", "proj_out", "probe_lr", "eval_layer",
    "checkpoint_every",
]


def _add_config_flags(parser):
    parser.add_argument("--config", default=None, help="key=value config file")
    for key in _FLAG_KEYS:
        parser.add_argument("--" + key.replace("_", "-"), dest=f"cfg_{key}", default=None)
    parser.add_argument("--arch", action="append", default=[], metavar="KEY=VALUE",
                        help="arch.* override, e.g. --arch base=rf_resnet50")
    parser.add_argument("--aug", action="append", default=[], metavar="KEY=VALUE",
                        help="aug.* override, e.g. --aug c_min=0.3")


def _collect_overrides(args):
    overrides = {}
    for key in _FLAG_KEYS:
        val = getattr(args, f"cfg_{key}")
        if val is not None:
            overrides[key] = val
    for prefix, entries in (("arch.", args.arch), ("aug.", args.aug)):
        for entry in entries:
            if "=" not in entry:
                raise ValueError(f"expected KEY=VALUE after --{prefix[:-1]}, got {entry!r}")
            key, value = entry.split("=", 1)
            overrides[prefix + key.strip()] = value.strip()
    return overrides


def _resolved_config(args):
    return config_mod.parse_config(args.config, _collect_overrides(args))


def _make_run_dir(args, cfg, command):
    if args.run_dir:
        run_dir = args.run_dir
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = os.path.join(args.out, f"{stamp}-{cfg.config_hash()}")
    os.makedirs(run_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": {k: str(v) for k, v in sorted(cfg.to_flat_dict().items())},
        "seed": cfg.seed,
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "output_dir": run_dir,
    }
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run_dir


def _write_summary(run_dir, payload):
    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_trained(cfg, checkpoint):
    nets, probe, opt = trainer.build_state(cfg)
    trainer.load_checkpoint(checkpoint, nets, probe, opt, config=cfg)
    return nets, probe


def _eval_images(cfg):
    images, labels = trainer.load_dataset(cfg)
    return trainer._chw(images), np.asarray(labels)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    cfg = _resolved_config(args)
    run_dir = _make_run_dir(args, cfg, "train")
    nets, probe, history = trainer.fit(cfg, run_dir=run_dir, resume=args.resume,
                                       log=lambda s: print(
                                           f"epoch {s['epoch']:3d} loss {s['loss_total']:+.4f} "
                                           f"probe {s['probe_acc']:.3f}"))
    final = history[-1] if history else {}
    _write_summary(run_dir, {"command": "train", "config_hash": cfg.config_hash(),
                             "seed": cfg.seed, "final": final})
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _resolved_config(args)
    run_dir = _make_run_dir(args, cfg, "eval")
    nets, probe = _load_trained(cfg, args.checkpoint)
    images, labels = _eval_images(cfg)
    acc = trainer.probe_accuracy(nets, probe, images, labels, cfg.eval_layer)
    _write_summary(run_dir, {"command": "eval", "config_hash": cfg.config_hash(),
                             "eval_layer": cfg.eval_layer, "accuracy": acc})
    print(f"probe accuracy ({cfg.eval_layer}): {acc:.4f}")
    return EXIT_OK


def cmd_probe_mask(args):
    cfg = _resolved_config(args)
    run_dir = _make_run_dir(args, cfg, "probe-mask")
    nets, probe = _load_trained(cfg, args.checkpoint)
    images, labels = _eval_images(cfg)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    res = probes.masking_robustness(nets, probe, images, labels, fractions=fractions,
                                    rng=np.random.default_rng(cfg.seed),
                                    zero_fill=args.zero_fill)
    with open(os.path.join(run_dir, "mask.csv"), "w") as fh:
        fh.write("fraction,accuracy\n")
        fh.write(f"0.0,{res['clean']:.6f}\n")
        for frac, acc in sorted(res["per_fraction"].items()):
            fh.write(f"{frac},{acc:.6f}\n")
    _write_summary(run_dir, {"command": "probe-mask", "config_hash": cfg.config_hash(),
                             "seed": cfg.seed, "results": res})
    print(f"clean {res['clean']:.4f}  masked-average {res['average']:.4f}")
    return EXIT_OK


def cmd_probe_pgd(args):
    cfg = _resolved_config(args)
    run_dir = _make_run_dir(args, cfg, "probe-pgd")
    nets, probe = _load_trained(cfg, args.checkpoint)
    images, labels = _eval_images(cfg)
    logits_fn = probes.probe_logits_fn(nets, probe, cfg.eval_layer)
    if args.epsilon is not None:
        specs = [AttackSpec(epsilon=args.epsilon, gamma=args.epsilon / args.gamma_div,
                            iterations=args.iters)]
    else:
        specs = probes.default_attack_grid()
    rows = []
    for spec in specs:
        res = probes.pgd_attack(logits_fn, images, labels, spec)
        rows.append(res)
        print(f"eps {spec.epsilon:<6} gamma {spec.gamma:<9.5f} iters {spec.iterations} "
              f"-> accuracy {res['accuracy']:.4f}")
    with open(os.path.join(run_dir, "pgd.csv"), "w") as fh:
        fh.write("epsilon,gamma,iterations,accuracy,max_perturbation\n")
        for r in rows:
            fh.write(f"{r['epsilon']:g},{r['gamma']:.6g},{r['iterations']},"
                     f"{r['accuracy']:.6f},{r['max_perturbation']:.6g}\n")
    _write_summary(run_dir, {"command": "probe-pgd", "config_hash": cfg.config_hash(),
                             "seed": cfg.seed, "results": rows})
    return EXIT_OK


def cmd_probe_erf(args):
    cfg = _resolved_config(args)
    run_dir = _make_run_dir(args, cfg, "probe-erf")
    nets, probe = _load_trained(cfg, args.checkpoint)
    images, labels = _eval_images(cfg)
    images = images[: args.images]
    thresholds = tuple(float(t) for t in args.thresholds.split(","))
    res = probes.erf_stats(nets, images, thresholds=thresholds, stride2=args.stride2)
    with open(os.path.join(run_dir, "erf.csv"), "w") as fh:
        fh.write("threshold,mean_sqrt_pixels\n")
        for t in res["thresholds"]:
            fh.write(f"{t},{res['mean'][t]:.6f}\n")
    _write_summary(run_dir, {"command": "probe-erf", "config_hash": cfg.config_hash(),
                             "seed": cfg.seed,
                             "mean": {str(k): v for k, v in res["mean"].items()}})
    for t in res["thresholds"]:
        print(f"threshold {t}: mean sqrt pixel count {res['mean'][t]:.2f}")
    return EXIT_OK


def cmd_probe_sim(args):
    cfg = _resolved_config(args)
    run_dir = _make_run_dir(args, cfg, "probe-sim")
    nets, probe = _load_trained(cfg, args.checkpoint)
    images, labels = _eval_images(cfg)
    res = probes.similarity_correlation(nets, images, rng=np.random.default_rng(cfg.seed),
                                        max_pairs=args.pairs)
    with open(os.path.join(run_dir, "sim.csv"), "w") as fh:
        fh.write("global_sim,local_sim\n")
        for g, l in zip(res["global_sims"], res["local_sims"]):
            fh.write(f"{g:.6f},{l:.6f}\n")
    _write_summary(run_dir, {"command": "probe-sim", "config_hash": cfg.config_hash(),
                             "seed": cfg.seed, "pearson": res["pearson"],
                             "mean_intra_image_similarity": res["mean_intra_image_similarity"]})
    pearson = "undefined" if res["pearson"] is None else f"{res['pearson']:.4f}"
    print(f"pearson {pearson}  intra-image similarity {res['mean_intra_image_similarity']:.4f}")
    return EXIT_OK


def cmd_rf(args):
    base = args.base.replace("-", "_")
    if args.target is not None:
        cfg = rf.solve_rf_config(base, args.target, small_image_stem=args.small_image_stem)
        print(f"solved config for RF {args.target}:")
        for key, val in sorted(cfg.to_flat_dict().items()):
            print(f"  {key} = {val}")
    else:
        cfg = rf.ArchConfig(base=base, small_image_stem=args.small_image_stem)
    chain = rf.descriptor_chain(cfg)
    profile = rf.receptive_field_profile(chain)
    print(f"{'layer':<6} {'kind':<6} {'kernel':>6} {'stride':>6} {'rf':>6}")
    for i, (layer, r) in enumerate(zip(chain, profile)):
        print(f"{i:<6} {layer.kind:<6} {layer.kernel:>6} {layer.stride:>6} {r:>6}")
    print(f"final receptive field: {profile[-1] if profile else 1}")
    print(f"total stride: {rf.total_stride(chain)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="cooc", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def run_command(name, fn, needs_checkpoint=False):
        p = sub.add_parser(name)
        _add_config_flags(p)
        p.add_argument("--out", default="runs", help="root directory for run outputs")
        p.add_argument("--run-dir", default=None, help="exact output directory (overrides --out)")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True)
        p.set_defaults(fn=fn)
        return p

    p_train = run_command("train", cmd_train)
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    run_command("eval", cmd_eval, needs_checkpoint=True)

    p_mask = run_command("probe-mask", cmd_probe_mask, needs_checkpoint=True)
    p_mask.add_argument("--fractions", default="0.5,0.6,0.7,0.8,0.9")
    p_mask.add_argument("--zero-fill", action="store_true")

    p_pgd = run_command("probe-pgd", cmd_probe_pgd, needs_checkpoint=True)
    p_pgd.add_argument("--epsilon", type=float, default=None,
                       help="single attack budget; omit to run the full grid")
    p_pgd.add_argument("--gamma-div", type=float, default=10.0,
                       help="step size is epsilon / gamma-div")
    p_pgd.add_argument("--iters", type=int, default=1)

    p_erf = run_command("probe-erf", cmd_probe_erf, needs_checkpoint=True)
    p_erf.add_argument("--thresholds", default="0.05,0.32")
    p_erf.add_argument("--stride2", action="store_true",
                       help="probe every other grid cell")
    p_erf.add_argument("--images", type=int, default=8)

    p_sim = run_command("probe-sim", cmd_probe_sim, needs_checkpoint=True)
    p_sim.add_argument("--pairs", type=int, default=500)

    p_rf = sub.add_parser("rf")
    p_rf.add_argument("--base", default="rf_resnet50")
    p_rf.add_argument("--target", type=int, default=None)
    p_rf.add_argument("--small-image-stem", action="store_true")
    p_rf.set_defaults(fn=cmd_rf)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.fn(args)
    except trainer.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        message = str(exc)
        print(f"error: {message}", file=sys.stderr)
        data_markers = ("record", "checkpoint", "truncated", "shape", "dataset",
                        "image", "missing tensor", "class subdirectories")
        if any(m in message for m in data_markers):
            return EXIT_DATA
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
