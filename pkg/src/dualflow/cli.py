"""Command-line entry point: ``dualflow <subcommand> [options]``.

Every option can also be given in a ``key = value`` config file passed with
``--config``; explicit flags win over the file.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .attack import IMAGE_RANGE, AdvSample, AttackConfig, sample_dataset, train_dual_flow
from .data import Dataset, gmm_dataset, load_dataset, save_dataset, shapes_dataset
from .evaluate import (DEFAULT_DEFENSES, compute_asr, defense_sweep, perturbation_asr, split_asr,
                       split_confidence_interval, transfer_matrix)
from .flow import FlowSchedule, NoiseSpec
from .io import ConfigError, load_config, write_metrics_csv
from .models_io import emit_visualization, load_model, save_model
from .morse import PROBLEMS, get_problem, verify_morse_flow
from .nn import VelocityConfig, VelocityModel
from .train import TrainConfig, pretrain_flow_matching, train_classifier

log = logging.getLogger("dualflow")


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s) -> tuple[int, ...]:
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def _floats(s) -> tuple[float, ...]:
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _strs(s) -> tuple[str, ...]:
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


# key: (parser, default, help)
KEYS = {
    "dataset": (str, "shapes", "dataset name: shapes or gmm2d"),
    "n": (int, 4000, "number of generated samples"),
    "data_seed": (int, None, "dataset seed (defaults to --seed)"),
    "eval_split": (float, 0.2, "held-out fraction"),
    "epochs": (int, 30, "training epochs"),
    "batch_size": (int, 64, "minibatch size"),
    "lr": (float, None, "learning rate"),
    "optimizer": (str, "adam", "sgd or adam"),
    "width": (int, 128, "velocity hidden width"),
    "blocks": (int, 3, "velocity residual blocks"),
    "lora_rank": (int, 4, "LoRA rank"),
    "lora_alpha": (float, None, "LoRA scale alpha (defaults to the rank)"),
    "arch": (str, "small-conv", "classifier architecture: mlp or small-conv"),
    "activation": (str, "relu", "classifier activation"),
    "hidden": (int, 128, "classifier hidden width"),
    "name": (str, None, "model name used in file names and tables"),
    "epsilon": (float, 16 / 255, "l-inf budget"),
    "steps": (int, 300, "attack training iterations"),
    "variant": (str, "co", "co, cs or rs"),
    "tau": (float, 0.25, "terminal flow time"),
    "n_steps": (int, 6, "Euler steps"),
    "gamma": (float, 0.0, "reverse-step noise scale"),
    "train_clip": (_bool, True, "clip x_hat0 during training"),
    "l2_weight": (float, 0.0, "trajectory L2 weight"),
    "targets": (_ints, tuple(range(8)), "comma-separated target classes"),
    "n_eval": (int, 400, "evaluation images"),
    "splits": (int, 5, "evaluation splits for confidence intervals"),
    "use_lora": (_bool, True, "use the adapters when sampling"),
    "problem": (str, "all", "Morse problem name or 'all'"),
    "grid": (int, 21, "grid points per axis"),
    "flow_time": (float, 0.5, "Morse flow time"),
    "t": (float, 0.25, "cascade check time"),
    "delta": (float, 0.25 / 64, "cascade check step"),
    "n_samples": (int, 200, "cascade check samples"),
    "index": (int, 0, "sample index to visualize"),
}

COMMANDS = {
    "gen-data": ("dataset", "n"),
    "pretrain": ("dataset", "n", "data_seed", "eval_split", "epochs", "batch_size", "lr", "optimizer",
                 "width", "blocks", "lora_rank", "lora_alpha"),
    "train-classifier": ("dataset", "n", "data_seed", "eval_split", "epochs", "batch_size", "lr", "optimizer",
                         "arch", "activation", "hidden", "name"),
    "attack-train": ("dataset", "n", "data_seed", "eval_split", "epsilon", "lr", "steps", "batch_size", "variant",
                     "tau", "n_steps", "gamma", "train_clip", "l2_weight", "lora_rank", "targets", "optimizer",
                     "n_eval"),
    "attack-sample": ("dataset", "n", "data_seed", "eval_split", "epsilon", "tau", "n_steps", "gamma", "targets",
                      "n_eval", "use_lora"),
    "eval": ("dataset", "n", "data_seed", "eval_split", "epsilon", "tau", "n_steps", "gamma", "targets", "n_eval",
             "splits"),
    "ablate": ("dataset", "n", "data_seed", "eval_split", "epsilon", "lr", "steps", "batch_size", "tau",
               "train_clip", "l2_weight", "targets", "optimizer", "n_eval", "gamma"),
    "verify-morse": ("problem", "grid", "flow_time"),
    "verify-cascade": ("dataset", "n", "data_seed", "lr", "t", "delta", "tau", "n_samples"),
    "viz": ("index",),
}
SEED_REQUIRED = {"gen-data", "pretrain", "train-classifier", "attack-train", "ablate"}
MODEL_FLAGS = {
    "pretrain": (),
    "train-classifier": (),
    "attack-train": ("velocity", "classifier"),
    "attack-sample": ("attack",),
    "eval": ("attack", "samples", "victims", "source"),
    "ablate": ("velocity", "classifier"),
    "verify-cascade": ("velocity", "classifier"),
    "viz": ("samples",),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualflow", description="Dual-flow adversarial attack workbench")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for cmd, keys in COMMANDS.items():
        p = sub.add_parser(cmd, help=cmd.replace("-", " "))
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, required=cmd in SEED_REQUIRED, default=None, help="run seed")
        if cmd not in ("gen-data", "verify-morse", "viz", "eval", "attack-sample"):
            p.add_argument("--data", help="dataset cache file (generated when missing)")
        elif cmd in ("gen-data", "eval", "attack-sample"):
            p.add_argument("--data", help="dataset cache file")
        for flag in MODEL_FLAGS.get(cmd, ()):
            p.add_argument(f"--{flag}", help=f"{flag} checkpoint" if flag not in ("victims", "source") else None)
        if cmd == "ablate":
            p.add_argument("--variants", default="co,rs", help="comma-separated training variants")
            p.add_argument("--steps", dest="sweep_steps", default="1,2,4,8", help="inference step counts N")
            p.add_argument("--gammas", default="0", help="sampler noise scales")
        if cmd == "eval":
            p.add_argument("--defenses", action="store_true", help="also sweep input defenses")
        for key in keys:
            if cmd == "ablate" and key == "steps":
                p.add_argument("--train-steps", dest="steps", default=None, help=KEYS[key][2])
                continue
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help=KEYS[key][2])
    return parser


def resolve(args, keys) -> dict:
    """Merge built-in defaults, the config file and explicit flags."""
    file_cfg = load_config(args.config) if args.config else {}
    out = {}
    for key in keys:
        parse, default, _ = KEYS[key]
        raw = getattr(args, key, None)
        if raw is None:
            raw = file_cfg.get(key)
        out[key] = default if raw is None else parse(raw)
    if args.seed is None and "seed" in file_cfg:
        args.seed = int(file_cfg["seed"])
    if args.seed is None:
        args.seed = 0
    if "data_seed" in out and out["data_seed"] is None:
        out["data_seed"] = args.seed
    return out


def get_data(args, cfg) -> Dataset:
    name = cfg.get("dataset", "shapes")
    seed = cfg.get("data_seed", args.seed)
    path = getattr(args, "data", None)
    if path and Path(path).exists():
        return load_dataset(path, name)
    if name == "shapes":
        data = shapes_dataset(seed, cfg["n"])
    elif name == "gmm2d":
        data = gmm_dataset(seed, cfg["n"])
    else:
        raise ValueError(f"unknown dataset {name!r}")
    if path:
        save_dataset(path, data)
    return data


def _splits(args, cfg, data):
    return data.split(cfg.get("eval_split", 0.2), cfg.get("data_seed", args.seed))


def _need(args, flag):
    val = getattr(args, flag, None)
    if not val:
        raise ValueError(f"--{flag} is required for {args.command}")
    return val


def _value_range(cfg):
    # only image data is clamped to [0, 1]
    return IMAGE_RANGE if cfg.get("dataset", "shapes") == "shapes" else None


def _attack_cfg(args, cfg, **over) -> AttackConfig:
    kw = dict(
        epsilon=cfg["epsilon"], steps=cfg["steps"], batch_size=cfg.get("batch_size", 32),
        variant=cfg.get("variant", "co"), sched=FlowSchedule(cfg["tau"], cfg.get("n_steps", 6)),
        train_clip=cfg["train_clip"], l2_weight=cfg["l2_weight"], noise=NoiseSpec(cfg["gamma"], args.seed),
        targets=tuple(cfg["targets"]), seed=args.seed, optimizer=cfg["optimizer"],
        value_range=_value_range(cfg),
    )
    if cfg.get("lr") is not None:
        kw["lr"] = cfg["lr"]
    kw.update(over)
    return AttackConfig(**kw)


def cmd_gen_data(args, cfg, out: Path) -> int:
    data = get_data(argparse.Namespace(data=None, seed=args.seed), {**cfg, "data_seed": args.seed})
    path = Path(args.data) if args.data else out / "data.bin"
    save_dataset(path, data)
    print(f"wrote {len(data)} samples to {path}")
    return 0


def cmd_pretrain(args, cfg, out: Path) -> int:
    train, _ = _splits(args, cfg, get_data(args, cfg))
    rank = cfg["lora_rank"]
    vcfg = VelocityConfig(train.sample_shape, train.n_classes, width=cfg["width"], blocks=cfg["blocks"],
                          lora_rank=rank, lora_alpha=cfg["lora_alpha"] or float(rank), seed=args.seed)
    model = VelocityModel(vcfg)
    tcfg = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"] or 1e-3, cfg["optimizer"], args.seed, cfg["eval_split"])
    res = pretrain_flow_matching(model, train, tcfg)
    write_metrics_csv(out / "pretrain_metrics.csv", ["epoch", "loss"], list(enumerate(res.epoch_loss)))
    save_model(model, out / "velocity.ckpt", seed=args.seed, epochs=cfg["epochs"])
    print(f"final flow-matching loss {res.epoch_loss[-1] if res.epoch_loss else float('nan'):.6f}")
    return 0


def cmd_train_classifier(args, cfg, out: Path) -> int:
    data = get_data(args, cfg)
    tcfg = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"] or 2e-3, cfg["optimizer"], cfg["data_seed"], cfg["eval_split"])
    model, res = train_classifier(cfg["arch"], data, tcfg, activation=cfg["activation"], model_seed=args.seed,
                                  hidden=cfg["hidden"])
    name = cfg["name"] or cfg["arch"]
    rows = [(i, loss, "") for i, loss in enumerate(res.epoch_loss)] + [("test", "", res.test_accuracy)]
    write_metrics_csv(out / f"classifier_{name}_metrics.csv", ["epoch", "loss", "accuracy"], rows)
    save_model(model, out / f"classifier_{name}.ckpt", seed=args.seed, name=name, test_accuracy=res.test_accuracy)
    print(f"{name} test accuracy {res.test_accuracy:.4f}")
    return 0


def cmd_attack_train(args, cfg, out: Path) -> int:
    model, _ = load_model(_need(args, "velocity"), "velocity")
    clf, cmeta = load_model(_need(args, "classifier"), "classifier")
    if cfg["lora_rank"] != model.cfg.lora_rank:
        raise ValueError("lora_rank must match the pretrained velocity checkpoint")
    train, test = _splits(args, cfg, get_data(args, cfg))
    acfg = _attack_cfg(args, cfg)
    ev = test.subset(np.arange(min(cfg["n_eval"], len(test))))
    res = train_dual_flow(model, clf, train, acfg, eval_data=ev)
    rows = [(i, loss, asr) for i, (loss, asr) in enumerate(zip(res.loss, res.batch_asr))]
    write_metrics_csv(out / "attack_metrics.csv", ["update", "loss", "batch_asr"], rows)
    write_metrics_csv(out / "attack_eval.csv", ["source", "asr"], [(cmeta.get("name", "source"), res.final_asr)])
    meta = {"seed": args.seed, "updates": res.updates, "epsilon": acfg.epsilon, "variant": acfg.variant,
            "tau": acfg.sched.tau, "n_steps": acfg.sched.n_steps, "targets": list(acfg.targets)}
    save_model(model, out / "attack.ckpt", **meta)
    print(f"white-box ASR {res.final_asr:.4f} after {res.updates} updates")
    return 0


def _sample(args, cfg, model, data) -> AdvSample:
    _, test = _splits(args, cfg, data)
    ev = test.subset(np.arange(min(cfg["n_eval"], len(test))))
    noise = NoiseSpec(cfg["gamma"], args.seed) if cfg["gamma"] > 0 else None
    return sample_dataset(model, ev, cfg["targets"], FlowSchedule(cfg["tau"], cfg["n_steps"]), cfg["epsilon"],
                          noise, use_lora=cfg.get("use_lora", True), seed=args.seed, value_range=_value_range(cfg))


def _save_samples(path, s: AdvSample) -> None:
    np.savez(path, x=s.x, pre_clip=s.pre_clip, adv=s.adv, target=s.target)


def _load_samples(path) -> AdvSample:
    with np.load(path) as z:
        return AdvSample(z["x"], z["pre_clip"], z["adv"], z["target"])


def cmd_attack_sample(args, cfg, out: Path) -> int:
    model, _ = load_model(_need(args, "attack"), "velocity")
    s = _sample(args, cfg, model, get_data(args, cfg))
    _save_samples(out / "samples.npz", s)
    print(f"wrote {len(s)} adversarial samples to {out / 'samples.npz'}")
    return 0


def cmd_eval(args, cfg, out: Path) -> int:
    victims = {}
    for item in _strs(_need(args, "victims")):
        name, _, path = item.partition("=")
        if not path:
            raise ValueError("victims are given as name=checkpoint pairs")
        victims[name], _ = load_model(path, "classifier")
    source = _need(args, "source")
    if args.samples:
        samples = _load_samples(args.samples)
    else:
        model, _ = load_model(_need(args, "attack"), "velocity")
        samples = _sample(args, cfg, model, get_data(args, cfg))
    table = transfer_matrix(victims, source, samples, args.seed)
    print(table.format())
    rows = []
    for name, white, asr in table.rows():
        mean, half = split_confidence_interval(split_asr(victims[name], samples, cfg["splits"]))
        rows.append((name, white, asr, mean, half, perturbation_asr(victims[name], samples)))
    rows.append(("black-box-mean", False, table.black_box_mean, "", "", ""))
    write_metrics_csv(out / "eval.csv", ["victim", "white_box", "asr", "split_mean", "ci_half_width", "perturbation_asr"], rows)
    if args.defenses:
        drows = []
        for name, clf in victims.items():
            for label, asr in defense_sweep(clf, samples, DEFAULT_DEFENSES).items():
                drows.append((name, label, asr))
        write_metrics_csv(out / "defenses.csv", ["victim", "defense", "asr"], drows)
    return 0


def cmd_ablate(args, cfg, out: Path) -> int:
    model, _ = load_model(_need(args, "velocity"), "velocity")
    clf, _ = load_model(_need(args, "classifier"), "classifier")
    train, test = _splits(args, cfg, get_data(args, cfg))
    ev = test.subset(np.arange(min(cfg["n_eval"], len(test))))
    variants = _strs(args.variants)
    sweep = _ints(args.sweep_steps)
    gammas = _floats(args.gammas)
    rows = []
    for variant in variants:
        acfg = _attack_cfg(args, cfg, variant=variant, noise=NoiseSpec(cfg["gamma"] or 0.5, args.seed))
        train_dual_flow(model, clf, train, acfg)
        for gamma in gammas:
            for n in sweep:
                noise = NoiseSpec(gamma, args.seed) if gamma > 0 else None
                s = sample_dataset(model, ev, acfg.targets, FlowSchedule(acfg.sched.tau, n), acfg.epsilon, noise,
                                   seed=args.seed, value_range=acfg.value_range)
                rows.append((variant, gamma, n, compute_asr(clf, s).mean))
    write_metrics_csv(out / "ablate.csv", ["variant", "gamma", "n_steps", "asr"], rows)
    print(f"wrote {len(rows)} ablation rows")
    return 0


def cmd_verify_morse(args, cfg, out: Path) -> int:
    names = sorted(PROBLEMS) if cfg["problem"] == "all" else [cfg["problem"]]
    rows, ok = [], True
    for name in names:
        rep = verify_morse_flow(get_problem(name), cfg["grid"], cfg["flow_time"])
        ok &= rep.passed()
        rows.append((name, rep.monotone_fraction, rep.strict_fraction, rep.min_mu, rep.min_endpoint_distance,
                     rep.min_abs_det, rep.passed()))
        print(f"{name}: monotone {rep.monotone_fraction:.6f} min_mu {rep.min_mu:.3e} "
              f"min_dist {rep.min_endpoint_distance:.3e} min_det {rep.min_abs_det:.3e} {'ok' if rep.passed() else 'FAILED'}")
    write_metrics_csv(out / "morse.csv", ["problem", "monotone_fraction", "strict_fraction", "min_mu",
                                          "min_endpoint_distance", "min_abs_det", "passed"], rows)
    return 0 if ok else 1


def cmd_verify_cascade(args, cfg, out: Path) -> int:
    from .cascade import CascadeCheckConfig, verify_cascade

    model, _ = load_model(_need(args, "velocity"), "velocity")
    clf, _ = load_model(_need(args, "classifier"), "classifier")
    data = get_data(args, cfg)
    ccfg = CascadeCheckConfig(cfg["n_samples"], cfg["t"], cfg["delta"], cfg["tau"],
                              1e-4 if cfg["lr"] is None else cfg["lr"], seed=args.seed)
    rep = verify_cascade(model, clf, data, ccfg)
    write_metrics_csv(out / "cascade.csv", ["lr", "improvement_fraction", "mean_delta_ce", "n_samples"],
                      [(ccfg.lr, rep.improvement_fraction, rep.mean_delta_ce, rep.n_samples)])
    print(f"improvement fraction {rep.improvement_fraction:.4f} mean dCE {rep.mean_delta_ce:.3e}")
    return 0


def cmd_viz(args, cfg, out: Path) -> int:
    samples = _load_samples(_need(args, "samples"))
    paths = emit_visualization(samples[cfg["index"]], out / f"sample{cfg['index']}")
    for p in paths:
        print(p)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train-classifier": cmd_train_classifier,
    "attack-train": cmd_attack_train, "attack-sample": cmd_attack_sample, "eval": cmd_eval, "ablate": cmd_ablate,
    "verify-morse": cmd_verify_morse, "verify-cascade": cmd_verify_cascade, "viz": cmd_viz,
}


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve(args, COMMANDS[args.command])
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](args, cfg, out)
    except (ValueError, ConfigError, OSError, KeyError) as exc:
        print(f"dualflow {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
