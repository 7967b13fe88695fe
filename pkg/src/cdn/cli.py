"""``cdn`` command line: gen, featurize, train, predict, baseline, eval."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("cdn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
EVAL_METHODS = ("cdn", "mbci", "dge", "analytic-hard", "analytic-soft")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _setup_logging() -> None:
    level = os.environ.get("CDN_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"CDN_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdn", description="Intervention-target identification with causal differential networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, config=True):
        if config:
            sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--workers", type=int, help="worker processes")

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    common(g)
    g.add_argument("--out", required=True)

    f = sub.add_parser("featurize", help="cache correlation and local FCI features")
    common(f)
    f.add_argument("--corpus", required=True)
    f.add_argument("--overwrite", action="store_true")

    t = sub.add_parser("train", help="train a model on a corpus")
    common(t)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=["diff", "cat"])
    t.add_argument("--no-featurize", action="store_true", help="fail instead of computing missing features")

    def pair_inputs(sp):
        sp.add_argument("--obs", help="observational matrix (.npy or .csv)")
        sp.add_argument("--int", dest="int_", help="interventional matrix (.npy or .csv)")
        sp.add_argument("--corpus", help="corpus directory (with --dataset and --regime)")
        sp.add_argument("--dataset")
        sp.add_argument("--regime", type=int)
        sp.add_argument("--out", help="output CSV (default: stdout)")

    pr = sub.add_parser("predict", help="target probabilities for one obs/int pair")
    common(pr)
    pr.add_argument("--ckpt", required=True)
    pair_inputs(pr)

    b = sub.add_parser("baseline", help="baseline node scores for one obs/int pair")
    common(b)
    b.add_argument("--method", required=True, choices=["mbci", "dge", "analytic-hard", "analytic-soft"])
    b.add_argument("--ckpt", help="structure learner used to estimate graphs for analytic-hard")
    b.add_argument("--oracle-graphs", action="store_true")
    pair_inputs(b)

    e = sub.add_parser("eval", help="benchmark a checkpoint or baseline over a corpus")
    common(e)
    e.add_argument("--method", required=True, choices=EVAL_METHODS)
    e.add_argument("--corpus", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--variant", choices=["diff", "cat"])
    e.add_argument("--report", required=True)
    e.add_argument("--oracle-graphs", action="store_true")
    e.add_argument("--metric-aggregation", choices=["per-regime", "pooled"])
    return p


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _config(args):
    from .config import load_run_config

    rc = load_run_config(getattr(args, "config", None))
    seed = args.seed if args.seed is not None else (rc.seed if rc.seed is not None else 0)
    workers = args.workers if args.workers is not None else rc.workers
    if workers < 1:
        raise UsageError("--workers must be positive")
    return rc, seed, workers


def _read_matrix(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        D = np.load(p)
    else:
        text = p.read_text()
        first = text.splitlines()[0] if text else ""
        skip = 1 if any(c.isalpha() for c in first.replace("e", "").replace("E", "")) else 0
        D = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=skip, ndmin=2)
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise ValueError(f"{p}: expected a 2-D matrix, got shape {D.shape}")
    return D


def _pair_inputs(args):
    """(obs, int, regime record or None)."""
    if args.corpus:
        if args.dataset is None or args.regime is None:
            raise UsageError("--corpus needs --dataset and --regime")
        from .corpus import Corpus

        ds = next((d for d in Corpus(args.corpus).datasets if d.id == args.dataset), None)
        if ds is None:
            raise ValueError(f"dataset {args.dataset!r} not in corpus {args.corpus}")
        reg = next((r for r in ds.regimes if r.index == args.regime), None)
        if reg is None:
            raise ValueError(f"{args.dataset} has no regime {args.regime}")
        return ds.load_obs(), reg.load_int(), reg
    if not (args.obs and args.int_):
        raise UsageError("give --obs and --int, or --corpus/--dataset/--regime")
    return _read_matrix(args.obs), _read_matrix(args.int_), None


def _write_scores(out: str | None, scores: np.ndarray, column: str) -> None:
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["node_index", column])
        for i, s in enumerate(scores):
            w.writerow([i, repr(float(s))])
    finally:
        if out:
            fh.close()


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> None:
    from .scm_sim import generate_corpus

    rc, seed, workers = _config(args)
    cfg = rc.corpus.model_copy(update={"seed": seed}) if args.seed is not None else rc.corpus
    manifest = generate_corpus(cfg, args.out, workers=workers)
    print(f"wrote {len(manifest['datasets'])} datasets to {args.out}")


def cmd_featurize(args) -> None:
    from .corpus import Corpus
    from .training import featurize_corpus

    rc, seed, workers = _config(args)
    n = featurize_corpus(Corpus(args.corpus), rc.model, seed=seed, workers=workers, overwrite=args.overwrite)
    print(f"featurized {n} dataset sides")


def _missing_features(corpus) -> int:
    return sum(
        (not d.features_path.exists()) + sum(not r.features_path.exists() for r in d.regimes) for d in corpus.datasets
    )


def cmd_train(args) -> None:
    import torch

    from .cdn_model import CdnConfig
    from .corpus import Corpus
    from .training import FeaturesMissing, featurize_corpus, train

    rc, seed, workers = _config(args)
    cfg = rc.model
    if args.variant:
        # re-derive the default layer count for the chosen variant unless set explicitly
        layers = cfg.diff_layers if "diff_layers" in cfg.model_fields_set else None
        cfg = CdnConfig(**{**cfg.model_dump(), "variant": args.variant, "diff_layers": layers})
    corpus = Corpus(args.corpus)
    missing = _missing_features(corpus)
    if missing:
        if args.no_featurize:
            raise FeaturesMissing(f"{missing} dataset sides lack features and --no-featurize is set")
        featurize_corpus(corpus, cfg, seed=seed, workers=workers)
    torch.set_num_threads(1)
    summary = train(corpus, cfg, rc.train, args.out, seed=seed)
    print(json.dumps(summary, sort_keys=True))


def cmd_predict(args) -> None:
    from .cdn_model import predict_targets

    _, seed, _ = _config(args)
    obs, int_, _ = _pair_inputs(args)
    probs = predict_targets(obs, int_, args.ckpt, seed=seed)
    _write_scores(args.out, probs, "probability")


def _estimated_graphs(model, obs, int_, seed: int) -> tuple[np.ndarray, np.ndarray]:
    from .cdn_model import ensemble_predict, featurize_pair, predicted_adjacency

    f_seed, p_seed = _derived_seed(seed, 0), _derived_seed(seed, 1)
    bundle = featurize_pair(obs, int_, model.cfg, f_seed)
    pred = ensemble_predict(model, bundle, p_seed)
    n = obs.shape[1]
    return predicted_adjacency(pred.edge_probs_obs, n), predicted_adjacency(pred.edge_probs_int, n)


def cmd_baseline(args) -> None:
    from . import baselines as bl

    rc, seed, _ = _config(args)
    obs, int_, reg = _pair_inputs(args)
    if args.method == "mbci":
        scores = bl.mb_ci_scores(obs, int_, rc.eval.mbci_lambda)
    elif args.method == "dge":
        scores = bl.dge_scores(obs, int_)
    elif args.method == "analytic-soft":
        scores = bl.soft_scores(obs, int_, rc.eval.soft_bootstrap, seed)
    else:
        if args.oracle_graphs:
            if reg is None:
                raise UsageError("--oracle-graphs needs --corpus/--dataset/--regime")
            a_obs, a_int = reg.dataset.g_obs().adjacency(), reg.g_int().adjacency()
        else:
            if not args.ckpt:
                raise UsageError("analytic-hard needs --oracle-graphs or --ckpt")
            from .cdn_model import load_model

            a_obs, a_int = _estimated_graphs(load_model(args.ckpt), obs, int_, seed)
        scores = bl.analytic_hard_detector(a_obs, a_int)
    _write_scores(args.out, scores.scores, "score")


def make_scorer(method: str, rc, seed: int, ckpt: str | None = None, oracle_graphs: bool = False, variant: str | None = None):
    """Per-regime scorer used by ``cdn eval``; all randomness derives from ``seed``
    and the dataset/regime identity."""
    from . import baselines as bl

    if method in ("cdn", "analytic-hard") and not (method == "analytic-hard" and oracle_graphs):
        if not ckpt:
            raise UsageError(f"--method {method} needs --ckpt")
        from .cdn_model import FeatureBundle, ensemble_predict, featurize_pair, load_model, predicted_adjacency
        from .training import load_side

        model = load_model(ckpt)
        if variant and model.cfg.variant != variant:
            raise UsageError(f"checkpoint variant {model.cfg.variant!r} differs from --variant {variant!r}")

        def features(reg):
            ds = reg.dataset
            obs, int_ = ds.load_obs(), reg.load_int()
            if ds.features_path.exists() and reg.features_path.exists():
                return FeatureBundle(load_side(ds.features_path, obs), load_side(reg.features_path, int_))
            return featurize_pair(obs, int_, model.cfg, _derived_seed(seed, ds.entry["seed"], reg.index, 0))

        def predict(reg):
            return ensemble_predict(model, features(reg), _derived_seed(seed, reg.dataset.entry["seed"], reg.index, 1),
                                    rc.eval.ensemble)

        if method == "cdn":
            return lambda reg: predict(reg).target_probs

        def hard_est(reg):
            pred = predict(reg)
            n = reg.dataset.n
            return bl.analytic_hard_detector(predicted_adjacency(pred.edge_probs_obs, n),
                                             predicted_adjacency(pred.edge_probs_int, n)).scores

        return hard_est
    if method == "analytic-hard":
        return lambda reg: bl.analytic_hard_detector(reg.dataset.g_obs().adjacency(), reg.g_int().adjacency()).scores
    if method == "mbci":
        return lambda reg: bl.mb_ci_scores(reg.dataset.load_obs(), reg.load_int(), rc.eval.mbci_lambda).scores
    if method == "dge":
        return lambda reg: bl.dge_scores(reg.dataset.load_obs(), reg.load_int()).scores
    if method == "analytic-soft":
        return lambda reg: bl.soft_scores(reg.dataset.load_obs(), reg.load_int(), rc.eval.soft_bootstrap,
                                          _derived_seed(seed, reg.dataset.entry["seed"], reg.index)).scores
    raise UsageError(f"unknown method {method!r}")


def cmd_eval(args) -> None:
    import torch

    from .corpus import Corpus
    from .evaluation import default_grid, evaluate_suite, write_outputs

    rc, seed, _ = _config(args)
    torch.set_num_threads(1)
    scorer = make_scorer(args.method, rc, seed, args.ckpt, args.oracle_graphs, args.variant)
    aggregation = args.metric_aggregation or rc.eval.aggregation
    report, results = evaluate_suite(scorer, Corpus(args.corpus), args.method, default_grid(rc.eval.grid_points), aggregation)
    write_outputs(report, results, args.report)
    for g in report.groups:
        print(f"{g.family:15s} {g.intervention:6s} |I|={g.n_targets} n={g.count:4d} mAP={g.mAP:.3f} AUC={g.AUC:.3f}")
    if report.n_failed:
        print(f"{report.n_failed} regimes failed", file=sys.stderr)


COMMANDS = {
    "gen": cmd_gen,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "predict": cmd_predict,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging()
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"cdn: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
