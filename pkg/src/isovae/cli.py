"""Command-line entry point. Exit codes: 0 success, 1 run failure, 2 config error."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runner
from .config import ConfigError, RunConfig
from .distributions import verify_theorem1
from .downstream import ClassifierConfig

log = logging.getLogger("isovae")


def _kv(items) -> dict[str, str]:
    out = {}
    for it in items or ():
        if "=" not in it:
            raise ConfigError(f"override {it!r} is not key=value")
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _load_config(args) -> RunConfig:
    overrides = _kv(args.set)
    for flag in ("data", "synthetic", "run_id", "output_dir", "seed"):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[flag] = str(val)
    if getattr(args, "labeled", False):
        overrides["labeled"] = "true"
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig.from_mapping(overrides)


def _classifier_config(args) -> ClassifierConfig:
    return ClassifierConfig(repetitions=args.repetitions, epochs=args.clf_epochs)


def _run_flags(p, output=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="config overrides")
    p.add_argument("--data", help="training corpus, one sentence per line")
    p.add_argument("--labeled", action="store_true", help="corpus lines are '<label>\\t<sentence>'")
    p.add_argument("--synthetic", help="key=value spec for the synthetic corpus")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--seed", type=int)
    if output:
        p.add_argument("--output-dir", dest="output_dir", help="output root (else $ISOVAE_OUTPUT_ROOT or ./runs)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")


def _clf_flags(p):
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--clf-epochs", dest="clf_epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isovae", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    _run_flags(sub.add_parser("train", help="train one configuration"))

    p = sub.add_parser("eval", help="re-evaluate a run on its test split")
    p.add_argument("run_dir")
    p.add_argument("--which", choices=("best", "final"), default="best")

    p = sub.add_parser("generate", help="decode sentences from prior samples")
    p.add_argument("run_dir")
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--which", choices=("best", "final"), default="best")

    p = sub.add_parser("impute", help="reconstruct test sentences from their prefixes")
    p.add_argument("run_dir")
    p.add_argument("--keep", type=float, default=0.25)
    p.add_argument("--out")

    for name, hlp in (("classify", "MLP probes on posterior means"),
                      ("robustness", "probe accuracy under word deletion"),
                      ("fewshot", "retrain on nested subsamples and probe")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("run_dir")
        _clf_flags(p)
        if name != "fewshot":
            p.add_argument("--split", choices=("train", "dev", "test"), default="train",
                           help="labeled split whose representations are probed")
        if name == "robustness":
            p.add_argument("--rate", type=float, default=0.3)
        if name == "fewshot":
            p.add_argument("--fractions", type=_floats, default=[0.001, 0.01, 0.1, 1.0])

    p = sub.add_parser("agreement", help="label agreement between originals and reconstructions")
    p.add_argument("run_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=5)

    p = sub.add_parser("perplexity", help="forward and reverse perplexity of generated text")
    p.add_argument("run_dir")
    p.add_argument("-n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep", help="run a grid of configurations over several seeds")
    _run_flags(p)
    p.add_argument("--axis", action="append", required=True, metavar="KEY=V1,V2",
                   help="grid axis; repeat for a product grid")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--parallel", type=int, default=1)

    p = sub.add_parser("warmstart", help="untie an isotropic run and train it as diagonal")
    p.add_argument("run_dir")
    p.add_argument("--target-c", dest="target_c", type=float, default=5.0)
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--epochs", type=int)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("verify-theorem1", help="randomized check of the tied-variance inequalities")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--dims", default="1,8,32")
    p.add_argument("--eps", type=_floats, default=[0.1, 1.0])
    p.add_argument("--seed", type=int, default=0)
    return ap


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=str))


def run(args) -> int:
    cmd = args.command
    if cmd == "train":
        rec = runner.train(_load_config(args), force=args.force)
        _emit({"run_dir": rec.run_dir, "best_epoch": rec.best_epoch, "test": rec.test_best})
    elif cmd == "eval":
        print(runner.eval_command(args.run_dir, args.which).to_json())
    elif cmd == "generate":
        if args.n < 0:
            raise ConfigError("-n must be >= 0")
        out = args.out or str(Path(args.run_dir) / "generated.txt")
        lines = runner.generate(args.run_dir, args.n, args.seed, out, args.which)
        _emit({"out": out, "n": len(lines)})
    elif cmd == "impute":
        rows, score = runner.impute_command(args.run_dir, args.keep, args.out)
        _emit({"rows": len(rows), "bleu2": score})
    elif cmd == "classify":
        res = runner.classify_command(args.run_dir, _classifier_config(args), args.seed, split=args.split)
        _emit({"accuracy": res.mean, "std": res.std})
    elif cmd == "robustness":
        acc = runner.robustness_command(args.run_dir, args.rate, _classifier_config(args), args.seed,
                                         split=args.split)
        _emit({"robustness_acc": acc})
    elif cmd == "fewshot":
        res = runner.fewshot_command(args.run_dir, args.fractions, _classifier_config(args), args.seed)
        _emit({str(f): {"accuracy": r.mean, "std": r.std} for f, r in res.items()})
    elif cmd == "agreement":
        _emit({"agreement": runner.agreement_command(args.run_dir, args.seed, args.epochs)})
    elif cmd == "perplexity":
        fwd, rev = runner.perplexity_command(args.run_dir, args.n, args.seed)
        _emit({"fwd_ppl": fwd, "rev_ppl": rev})
    elif cmd == "sweep":
        axes = {}
        for spec in args.axis:
            k, _, vals = spec.partition("=")
            if not vals:
                raise ConfigError(f"axis {spec!r} is not KEY=V1,V2")
            axes[k.strip()] = [v.strip() for v in vals.split(",")]
        seeds = [int(s) for s in args.seeds.split(",")]
        base = _load_config(args)
        base.replace(**{k: v[0] for k, v in axes.items()})  # reject bad keys/values before running
        res = runner.sweep(base, axes, seeds, force=args.force, parallel=args.parallel)
        _emit({"out_dir": res.out_dir, "failures": res.failures})
        if res.failures:
            return 1
    elif cmd == "warmstart":
        rec = runner.warm_start_command(args.run_dir, args.target_c, args.run_id, args.epochs, args.force)
        _emit({"run_dir": rec.run_dir, "warm_start_from": rec.warm_start_from, "test": rec.test_best})
    elif cmd == "verify-theorem1":
        ok = True
        for d in (int(x) for x in args.dims.split(",")):
            report = verify_theorem1(args.trials, d, seed=args.seed, eps_values=tuple(args.eps))
            print(report.line())
            ok &= report.passed
        return 0 if ok else 1
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except runner.RunExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # run failure
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
