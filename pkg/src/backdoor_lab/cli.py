"""Command-line entry point: ``backdoor-lab <subcommand> ...``.

Every subcommand prints one JSON object on success.  Failures print
``{"error": ..., "message": ...}`` on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import attack as atk
from .checks import gradient_check, switch_bruteforce, pattern_is_optimal, random_model
from .container import load_model, save_model
from .data import Dataset, load_idx, synth_split, triggered
from .defenses import DefenseReport, oracle_gradient_consistency, oracle_output_consistency
from .harness import (EXAMPLE_CONFIG, ExperimentConfig, apply_defense, merge_reports, monte_carlo_activation,
                      run_ablation, summarize, write_csv, write_run)
from .metrics import AttackProbe, metric_asr, metric_ca_ba
from .nn import build_model
from .trainer import TrainConfig, train

IDX_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / (stem + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_data(args):
    """IDX files from ``--data-dir`` (or $BACKDOOR_LAB_DATA_DIR), else the synthetic set."""
    d = args.data_dir or os.environ.get("BACKDOOR_LAB_DATA_DIR")
    if d:
        d = Path(d)
        tri, trl, tei, tel = (_find(d, s) for s in IDX_NAMES)
        return load_idx(tri, trl, name="train"), load_idx(tei, tel, name="test")
    return synth_split(train_per_class=args.train_per_class, test_per_class=args.test_per_class,
                       seed=args.data_seed)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "_asdict"):
        return o._asdict()
    raise TypeError(type(o).__name__)


def _size(s: str) -> tuple:
    h, _, w = s.lower().partition("x")
    return int(h), int(w or h)


def _location(s: str):
    if ":" in s:
        top, left = s.split(":")
        return int(top), int(left)
    return s


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> None:
    train_ds, test = load_data(args)
    model = build_model(args.arch, train_ds.image_shape, train_ds.num_classes, seed=args.seed)
    model, curve = train(model, train_ds, TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                                      learning_rate=args.lr, seed=args.seed))
    save_model(model, args.out)
    _emit({"model": str(args.out), "architecture": args.arch, "loss_curve": curve,
           "test_accuracy": float(np.mean(_predict(model, test) == test.labels))})


def _predict(model, ds: Dataset):
    from .nn import predict
    return predict(model, ds.images)


def _variant(args):
    if args.variant == "fineprune":
        return atk.FinePruneEvasion(sigma=args.sigma if args.sigma is not None else 4000.0)
    if args.variant == "lipschitz":
        return atk.LipschitzEvasion(gamma_mid=args.gamma_mid, out_gain=args.out_gain)
    if args.variant == "obfuscate":
        return atk.ZeroWeightObfuscation(sigma=args.sigma if args.sigma is not None else 0.001)
    return atk.Standard()


def cmd_inject(args) -> None:
    model = load_model(args.model)
    cfg = atk.AttackConfig(lam=args.lam, gamma=args.gamma, target=args.target,
                           trigger_size=_size(args.trigger_size), trigger_location=_location(args.trigger_location),
                           seed=args.seed, variant=_variant(args))
    res = atk.inject(model, cfg)
    save_model(res.model, args.out)
    _emit({"model": str(args.out), "variant": res.variant, "path": res.path.to_dict(), "gamma": res.gamma,
           "lambda": res.lam, "param_changes": res.param_changes, "surgery_ms": res.surgery_seconds * 1e3,
           "trigger_pattern": res.trigger.pattern.reshape(-1)[res.trigger.gamma]})


def cmd_eval(args) -> None:
    _, test = load_data(args)
    bd = load_model(args.model)
    trigger, path, info = atk.recover_attack(bd)
    target = int(info.get("target", 0))
    out = {"ASR": metric_asr(bd, test, trigger, target), "target": target}
    census = atk.activation_census(bd, path, test, trigger)
    out.update(clean_activations=census.clean, backdoored_activations=census.backdoored, inputs=census.total)
    if args.clean:
        ca, ba, gap = metric_ca_ba(load_model(args.clean), bd, test)
        out.update(CA=ca, BA=ba, gap=gap)
    else:
        out["BA"] = float(np.mean(_predict(bd, test) == test.labels))
    _emit(out)


def cmd_defend(args) -> None:
    train_ds, test = load_data(args)
    model = load_model(args.model)
    trigger, path, info = atk.recover_attack(model)
    probe = AttackProbe(test, trigger, int(info.get("target", 0)))
    rep: DefenseReport = apply_defense(args.defense, model, train_ds, probe, path.neurons, seed=args.seed)
    if args.report:
        rep.write(args.report)
    if args.out and rep.model is not None:
        save_model(rep.model, args.out)
    _emit(rep.to_dict())


def cmd_oracle(args) -> None:
    if args.check == "switch":
        rng = np.random.default_rng(args.seed)
        r = switch_bruteforce(rng.normal(0, 1, args.e), lam=args.lam, grid=args.grid)
        _emit({"check": "switch", "ok": r.agree == r.points, **r._asdict()})
        return
    if args.check == "trigger":
        ok = [pattern_is_optimal(np.random.default_rng(args.seed + s).normal(0, 1, args.e)) for s in range(20)]
        _emit({"check": "trigger", "ok": all(ok), "seeds": len(ok)})
        return
    if args.check == "gradcheck":
        worst = {}
        for s in range(args.seed, args.seed + 10):
            for kind in ("dense", "conv"):
                m = random_model(s, kind)
                rng = np.random.default_rng(s)
                x = rng.random((4,) + m.input_shape)
                worst[f"{kind}-{s}"] = max(gradient_check(m, x, rng.integers(0, m.num_classes, 4)).values())
        _emit({"check": "gradcheck", "ok": max(worst.values()) <= 1e-4, "max_rel_error": worst})
        return
    if args.model is None:
        raise ValueError(f"--model is required for the {args.check} check")
    bd = load_model(args.model)
    trigger, path, info = atk.recover_attack(bd)
    pruned = atk.build_pruned(bd, path)
    train_ds, test = load_data(args)
    ds = triggered(test, trigger) if args.triggered else test
    if args.check == "output":
        r = oracle_output_consistency(bd, pruned, ds, path)
        _emit({"check": "output", **r._asdict()})
    elif args.check == "gradient":
        r = oracle_gradient_consistency(bd, pruned, ds.head(args.limit), path)
        _emit({"check": "gradient", **r._asdict()})
    elif args.check == "finetune":
        probe = AttackProbe(test, trigger, int(info.get("target", 0)))
        rep = apply_defense(f"fine-tune:{args.epochs}", bd, train_ds, probe, path.neurons, seed=args.seed)
        m = rep.metrics
        _emit({"check": "finetune", "ok": m["path_param_delta"] == 0.0, "path_param_delta": m["path_param_delta"],
               "asr_after": m["asr_after"], "acc_after": m["acc_after"]})


def cmd_mc(args) -> None:
    rng = np.random.default_rng(args.seed)
    w = args.alpha * rng.choice([-1.0, 1.0], args.e) * (1 + rng.random(args.e) * args.spread)
    delta = atk.closed_form_pattern(w, 0.0, 1.0)
    r = monte_carlo_activation(delta, args.lam, w, e=args.e, alpha=args.alpha, num_samples=args.samples,
                               seed=args.seed)
    _emit({"lambda": args.lam, "alpha": args.alpha, "e": args.e, **r._asdict()})


def cmd_ablate(args) -> None:
    if args.example_config:
        sys.stdout.write(EXAMPLE_CONFIG)
        return
    if not args.config:
        raise ValueError("--config is required (use --example-config for a template)")
    cfg = ExperimentConfig.load(args.config)
    if args.out_dir:
        cfg.output_dir = args.out_dir
    result = run_ablation(cfg)
    csv_path, json_path = write_run(result, cfg.output_dir)
    _emit({"csv": str(csv_path), "summary": str(json_path), "config_hash": result.summary["config_hash"],
           "rows": len(result.rows)})


def cmd_report(args) -> None:
    rows = merge_reports(args.csv)
    if args.out:
        write_csv(rows, args.out)
    if args.text:
        sys.stdout.write(summarize(rows))
    else:
        _emit({"merged": str(args.out) if args.out else None, "rows": len(rows), "inputs": args.csv})


# ---------------------------------------------------------------------------


def _data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data-dir", help="directory with MNIST-style IDX files (default: $BACKDOOR_LAB_DATA_DIR, else synthetic)")
    g.add_argument("--train-per-class", type=int, default=600)
    g.add_argument("--test-per-class", type=int, default=200)
    g.add_argument("--data-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="backdoor-lab", description="Data-free backdoor injection and defense harness")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a clean baseline")
    p.add_argument("--arch", default="fcn", help="fcn, cnn or a layer list")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inject", help="install a backdoor by parameter surgery")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=None, help="default: solve lam * gamma^(L-1) = 100")
    p.add_argument("--target", type=int, default=0)
    p.add_argument("--trigger-size", default="4x4")
    p.add_argument("--trigger-location", default="bottom-right", help="corner name or TOP:LEFT")
    p.add_argument("--variant", choices=sorted(atk.VARIANTS), default="standard")
    p.add_argument("--sigma", type=float, default=None, help="noise scale for fineprune/obfuscate")
    p.add_argument("--gamma-mid", type=float, default=None)
    p.add_argument("--out-gain", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("eval", help="CA/BA/ASR and activation census")
    p.add_argument("--model", required=True, help="backdoored model")
    p.add_argument("--clean", help="clean model, for CA")
    _data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("defend", help="run one defense")
    p.add_argument("--model", required=True)
    p.add_argument("--defense", required=True,
                   help="fine-tune[:EPOCHS] fine-prune[:FRACTION] fine-prune-sweep[:BUDGET] lipschitz[:U] "
                        "neural-cleanse[:STEPS]")
    p.add_argument("--report", help="write the DefenseReport JSON here")
    p.add_argument("--out", help="write the defended model here")
    p.add_argument("--seed", type=int, default=0)
    _data_args(p)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("oracle", help="consistency and correctness checks")
    p.add_argument("check", choices=["output", "gradient", "finetune", "switch", "trigger", "gradcheck"])
    p.add_argument("--model")
    p.add_argument("--triggered", action="store_true", help="feed triggered test inputs (the oracle must fail)")
    p.add_argument("--limit", type=int, default=200, help="inputs for the gradient oracle")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--e", type=int, default=2)
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--seed", type=int, default=0)
    _data_args(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("mc", help="Monte Carlo switch-activation study")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--e", type=int, default=16)
    p.add_argument("--spread", type=float, default=0.0, help="|w| drawn from [alpha, alpha*(1+spread)]")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("ablate", help="run the sweeps of an INI experiment config")
    p.add_argument("--config")
    p.add_argument("--out-dir")
    p.add_argument("--example-config", action="store_true", help="print a commented config template")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge run CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out")
    p.add_argument("--text", action="store_true", help="print a human-readable table instead of JSON")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 -- surface every failure as a JSON record
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
