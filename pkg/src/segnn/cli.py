"""``segnn`` command-line interface.

Every command validates its configuration before doing any work, writes its
outputs under ``--out`` and prints its JSON report to stdout. Failures exit
with 2 (configuration), 3 (data) or 4 (numerical) and a JSON error object on
stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import RunConfig, digest_view, dump_config, load_config
from .encoder import Encoder
from .evaluate import EvalResult, eval_stream, evaluate_classification, label_space, train_stream
from .exceptions import ConfigError, DataError, NumericalError
from .fewshot import make_featurizer, segnn_predict, write_predictions
from .metrics import config_digest, dumps_report, metrics_report
from .pointcloud import normalize_cloud
from .quest import AdamW, init_params, load_checkpoint, save_checkpoint, segpn_predict, train, write_trace
from .synth import build_corpus, dominant_label, object_corpus, read_corpus, write_corpus

log = logging.getLogger("segnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CKPT_NAME = "segpn.ckpt"


def _threads() -> int:
    raw = os.environ.get("SEGNN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SEGNN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("SEGNN_THREADS must be >= 1")
    return n


def _out_dir(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise ConfigError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus(cfg: RunConfig):
    if cfg.corpus is None:
        raise ConfigError("--corpus is required")
    return read_corpus(cfg.corpus)


def _finish(out: Path, name: str, cfg: RunConfig, report: Dict) -> Dict:
    (out / "config.txt").write_text(dump_config(cfg))
    (out / name).write_text(dumps_report(report))
    return report


def _digest(cfg: RunConfig, command: str, inputs=("corpus", "ckpt")) -> str:
    return config_digest({"command": command, **digest_view(cfg, inputs)})


def _run_episodes(episodes, predict, featurizer, n_labels, threads, dump_dir=None) -> EvalResult:
    """Predict every episode (optionally on a thread pool) and accumulate in stream order."""
    episodes = list(episodes)
    if threads > 1:
        # fill the feature cache up front so workers only read it
        seen = set()
        for ep in episodes:
            for c in [c for shots in ep.support for c in shots] + ep.queries:
                if c.id not in seen:
                    seen.add(c.id)
                    featurizer(c)
        with ThreadPoolExecutor(threads) as pool:
            outputs = list(pool.map(predict, episodes))
    else:
        outputs = (predict(ep) for ep in episodes)
    result = EvalResult(n_labels)
    for i, (ep, res) in enumerate(zip(episodes, outputs)):
        result.add(ep, res)
        if dump_dir is not None:
            for j, r in enumerate(res):
                write_predictions(dump_dir / f"ep{i:05d}_q{j}_{r.cloud_id}.txt", r)
    return result


def _segmentation_report(cfg: RunConfig, corpus, result: EvalResult, digest: str, method: str) -> Dict:
    classes = list(corpus.test_classes)
    if cfg.include_background:
        classes = [0] + classes
    miou = result.miou(classes, cfg.aggregate)
    report = metrics_report(
        result.total, result.episodes, {}, corpus.class_names, classes, cfg.include_background, miou,
        extra={"majority_accuracy": None if result.majority_accuracy is None else round(result.majority_accuracy, 12),
               "method": method, "seed": cfg.seed, "aggregate": cfg.aggregate},
    )
    report["config_digest"] = digest
    return report


# -- commands ---------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> Dict:
    out = _out_dir(cfg)
    corpus = build_corpus(cfg.scene_spec(), cfg.n_scenes, seed=cfg.seed)
    write_corpus(corpus, out, cfg.format)
    counts = {split: sum(1 for s in corpus.splits if s == split) for split in ("train", "test")}
    report = {
        "scenes": len(corpus.clouds),
        "train_scenes": counts["train"],
        "test_scenes": counts["test"],
        "train_classes": [corpus.class_names[c] for c in corpus.train_classes],
        "test_classes": [corpus.class_names[c] for c in corpus.test_classes],
        "min_points": min(c.n_points for c in corpus.clouds),
        "seed": cfg.seed,
        "config_digest": _digest(cfg, "synth", inputs=()),
    }
    return _finish(out, "synth.json", cfg, report)


def cmd_eval_segnn(cfg: RunConfig) -> Dict:
    cfg = cfg.with_defaults("segnn")
    out = _out_dir(cfg)
    corpus = _corpus(cfg)
    featurizer = make_featurizer(cfg.encoder_config(), cfg.n_points, cfg.seed, np.float32)
    dump = None
    if cfg.dump_predictions:
        dump = out / "predictions"
        dump.mkdir(exist_ok=True)
    episodes = eval_stream(corpus, cfg.ways, cfg.shots, cfg.n_query, cfg.episodes_per_combo, cfg.seed)
    result = _run_episodes(
        episodes, lambda ep: segnn_predict(ep, featurizer, cfg.gamma), featurizer, label_space(corpus), _threads(), dump
    )
    report = _segmentation_report(cfg, corpus, result, _digest(cfg, "eval-nn", ("corpus",)), "seg-nn")
    return _finish(out, "metrics.json", cfg, report)


def _ckpt_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.ckpt) if cfg.ckpt else out / CKPT_NAME


def cmd_train_segpn(cfg: RunConfig) -> Dict:
    cfg = cfg.with_defaults("segpn")
    out = _out_dir(cfg)
    corpus = _corpus(cfg)
    qcfg = cfg.quest_config()
    enc = cfg.encoder_config()
    featurizer = make_featurizer(enc, cfg.n_points, cfg.seed, np.float32)
    params = init_params(enc.output_dim, qcfg.hidden, cfg.seed)
    opt = AdamW(params, qcfg)
    ckpt = _ckpt_path(cfg, out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    def progress(step, loss, lr):
        if step % 100 == 0:
            log.info("step %d loss %.4f lr %.2e (%.0fs)", step, loss, lr, time.perf_counter() - start)

    stream = train_stream(corpus, cfg.ways, cfg.shots, cfg.n_query, cfg.episodes, cfg.seed)
    params, trace = train(stream, params, opt, qcfg, featurizer, ckpt, progress)
    save_checkpoint(ckpt, params, opt)
    write_trace(out / "loss.csv", trace)
    tail = [l for _, l, _ in trace[-100:]]
    report = {
        "episodes": len(trace),
        "final_loss": round(float(np.mean(tail)), 12) if tail else None,
        "first_loss": round(float(trace[0][1]), 12) if trace else None,
        "parameters": params.n_learnable(),
        "checkpoint": ckpt.name,
        "seed": cfg.seed,
        "config_digest": _digest(cfg, "train-pn", ("corpus",)),
    }
    return _finish(out, "train.json", cfg, report)


def cmd_eval_segpn(cfg: RunConfig) -> Dict:
    cfg = cfg.with_defaults("segpn")
    out = _out_dir(cfg)
    corpus = _corpus(cfg)
    if cfg.ckpt is None:
        raise ConfigError("--ckpt is required")
    if not Path(cfg.ckpt).exists():
        raise DataError(f"{cfg.ckpt}: checkpoint not found")
    qcfg = cfg.quest_config()
    params, _ = load_checkpoint(cfg.ckpt, qcfg)
    enc = cfg.encoder_config()
    if params.D != enc.output_dim or params.H != qcfg.hidden:
        raise ConfigError(
            f"checkpoint has D={params.D}, H={params.H}; config expects D={enc.output_dim}, H={qcfg.hidden}"
        )
    featurizer = make_featurizer(enc, cfg.n_points, cfg.seed, np.float32)
    dump = None
    if cfg.dump_predictions:
        dump = out / "predictions"
        dump.mkdir(exist_ok=True)
    episodes = eval_stream(corpus, cfg.ways, cfg.shots, cfg.n_query, cfg.episodes_per_combo, cfg.seed)
    result = _run_episodes(
        episodes, lambda ep: segpn_predict(ep, params, qcfg, featurizer), featurizer, label_space(corpus),
        _threads(), dump,
    )
    report = _segmentation_report(cfg, corpus, result, _digest(cfg, "eval-pn"), "seg-pn")
    return _finish(out, "metrics.json", cfg, report)


def cmd_classify(cfg: RunConfig) -> Dict:
    """Few-shot classification by global-feature matching.

    Uses ``--corpus`` when given (each cloud's class is its dominant label),
    otherwise a generated set of single-primitive clouds.
    """
    cfg = cfg.with_defaults("segnn")
    out = _out_dir(cfg)
    corpus = _corpus(cfg) if cfg.corpus else object_corpus(cfg.objects_per_class, 1024, cfg.seed)
    enc = Encoder(cfg.encoder_config())
    feats = [enc.encode_global(normalize_cloud(c)) for c in corpus.clouds]
    labels = [dominant_label(c) for c in corpus.clouds]
    acc, per_episode = evaluate_classification(
        feats, labels, cfg.ways, cfg.shots, cfg.n_query, cfg.episodes, cfg.seed, cfg.gamma
    )
    report = {
        "accuracy": None if acc is None else round(acc, 12),
        "episodes": len(per_episode),
        "clouds": len(corpus.clouds),
        "classes": len(set(labels)),
        "seed": cfg.seed,
        "config_digest": _digest(cfg, "classify", ("corpus",)),
    }
    return _finish(out, "classify.json", cfg, report)


def cmd_gradcheck(cfg: RunConfig) -> Dict:
    from .gradcheck import run_suite

    out = _out_dir(cfg)
    worst, details = run_suite(range(cfg.seed, cfg.seed + cfg.seeds))
    per_tensor: Dict[str, float] = {}
    kinks = checked = 0
    for _, checks in details:
        for c in checks:
            per_tensor[c.name] = max(per_tensor.get(c.name, 0.0), c.rel_error)
            kinks += c.kinks
            checked += c.checked
    report = {
        "max_rel_error": float(f"{worst:.6e}"),
        "per_tensor": {k: float(f"{v:.6e}") for k, v in per_tensor.items()},
        "seeds": len(details),
        "entries_checked": checked,
        "entries_at_kinks": kinks,
        "passed": bool(worst <= 1e-4),
        "config_digest": _digest(cfg, "gradcheck", ()),
    }
    if not np.isfinite(worst):
        raise NumericalError("gradient check produced a non-finite error")
    return _finish(out, "gradcheck.json", cfg, report)


COMMANDS = {
    "synth": cmd_synth,
    "eval-nn": cmd_eval_segnn,
    "train-pn": cmd_train_segpn,
    "eval-pn": cmd_eval_segpn,
    "classify": cmd_classify,
    "gradcheck": cmd_gradcheck,
}

HELP = {
    "synth": "generate a synthetic scene corpus",
    "eval-nn": "evaluate the training-free model on the test episode stream",
    "train-pn": "train the parametric head on training-split episodes",
    "eval-pn": "evaluate a trained head on the test episode stream",
    "classify": "few-shot classification with global features",
    "gradcheck": "finite-difference check of the head's gradients",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error(ConfigError(message), EXIT_CONFIG)
        raise SystemExit(EXIT_CONFIG)


def _add_flags(p: argparse.ArgumentParser):
    a = p.add_argument
    a("--config", help="key=value config file; flags override it")
    a("--d", type=int, help="frequencies per axis (default 20, or 10 for the head)")
    a("--theta", type=float)
    a("--layers", type=int)
    a("--gamma", type=float)
    a("--k-neigh", dest="k_neigh", type=int)
    a("--k-up", dest="k_up", type=int)
    a("--variance", type=float)
    a("--freq-mode", dest="freq_mode", choices=("abs", "truncate"), help="how negative filter frequencies are made positive")
    a("--ways", type=int)
    a("--shots", type=int)
    a("--n-query", dest="n_query", type=int)
    a("--episodes-per-combo", dest="episodes_per_combo", type=int)
    a("--episodes", type=int, help="training episodes (train-pn) or classification episodes")
    a("--seeds", type=int, help="number of toy episodes for gradcheck")
    a("--objects-per-class", dest="objects_per_class", type=int)
    a("--kernel", type=int)
    a("--hidden", type=int)
    a("--lr", type=float)
    a("--seed", type=int)
    a("--n-points", dest="n_points", type=int)
    a("--n-scenes", dest="n_scenes", type=int)
    a("--aggregate", choices=("global", "episode"))
    a("--include-background", dest="include_background", action="store_const", const=True)
    a("--color-shuffle", dest="color_shuffle", action="store_const", const=True)
    a("--dump-predictions", dest="dump_predictions", action="store_const", const=True)
    a("--ckpt-every", dest="ckpt_every", type=int)
    a("--format", choices=("binary", "text"))
    a("--corpus")
    a("--ckpt")
    a("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        _add_flags(sub.add_parser(name, help=HELP[name]))
    return parser


def _emit_error(err: Exception, code: int):
    payload = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def run(argv: Optional[List[str]] = None) -> Dict:
    """Parse ``argv``, run the command and return its report (exceptions propagate)."""
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    cfg = load_config(args.config, overrides)
    cfg.validate()
    log.info("%s: seed=%d digest=%s", args.command, cfg.seed, _digest(cfg, args.command, ()))
    return COMMANDS[args.command](cfg)


def main(argv: Optional[List[str]] = None) -> int:
    verbose = argv is not None and ("-v" in argv or "--verbose" in argv) or "-v" in sys.argv or "--verbose" in sys.argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        report = run(argv)
    except ConfigError as e:
        _emit_error(e, EXIT_CONFIG)
        return EXIT_CONFIG
    except DataError as e:
        _emit_error(e, EXIT_DATA)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        _emit_error(e, EXIT_NUMERIC)
        return EXIT_NUMERIC
    except OSError as e:
        _emit_error(DataError(str(e)), EXIT_DATA)
        return EXIT_DATA
    except SystemExit as e:
        # argparse usage errors (already reported) and --help
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    sys.stdout.write(dumps_report(report))
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
