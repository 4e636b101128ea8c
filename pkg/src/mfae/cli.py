"""Command-line entry point: ``mfae <command> [--config FILE] [--key value ...]``.

Every command reads its parameters from built-in defaults, then an optional
``key=value`` config file, then command-line flags, in that order.  Failures
are reported as one JSON line on stderr and a process exit code:

    64  unknown command
    65  bad configuration or input values
    66  missing, unreadable or malformed files
    70  training diverged
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import data as D
from . import evaluation as E
from . import model as M
from . import selfcheck
from . import training as T
from .errors import ConfigError, DivergenceError, FormatError

log = logging.getLogger("mfae")

EXIT_USAGE = 64
EXIT_CONFIG = 65
EXIT_IO = 66
EXIT_DIVERGED = 70

# ----------------------------------------------------------------- parameters

IN, OUT, DIR = "input", "output", "dir"


@dataclass(frozen=True)
class Param:
    key: str
    kind: Any  # int, float, str, bool, IN, OUT or DIR
    default: Any = None
    help: str = ""
    required: bool = False
    choices: tuple | None = None


COMMON = [
    Param("seed", int, 0, "random seed"),
    Param("workers", int, 1, "threads for per-utterance inference"),
]

_TRAIN_DEFAULTS = T.TrainConfig()
TRAIN_PARAMS = [
    Param(f.name, type(getattr(_TRAIN_DEFAULTS, f.name)) if f.name != "grad_clip" else float,
          getattr(_TRAIN_DEFAULTS, f.name), f"training {f.name}")
    for f in dataclasses.fields(T.TrainConfig) if f.name != "seed"
]
TRAIN_PARAMS = [dataclasses.replace(p, choices=T.VARIANTS) if p.key == "variant" else p for p in TRAIN_PARAMS]

_ARCH_DEFAULTS = M.ArchConfig(feat_dim=1)
ARCH_PARAMS = [
    Param("feat_dim", int, 0, "input dimension (0 = take it from the features)"),
    Param("n_mixtures", int, _ARCH_DEFAULTS.n_mixtures, "number of mixtures K"),
    Param("embed_dim", int, _ARCH_DEFAULTS.embed_dim, "sequence vector dimension"),
    Param("tdnn_hidden", int, _ARCH_DEFAULTS.tdnn_hidden, "TDNN layer width"),
    Param("ff_hidden", int, _ARCH_DEFAULTS.ff_hidden, "feed-forward layer width"),
    Param("decoder_hidden", int, _ARCH_DEFAULTS.decoder_hidden, "decoder layer width"),
    Param("frame_contexts", str, "-2..2;-2,0,2;-3,0,3;0", "TDNN contexts, ';' between layers"),
    Param("decoder_context", str, "-1,0,1", "decoder mixture-indicator context"),
]

COMMANDS: dict[str, tuple[str, list[Param]]] = {
    "gen-synth": ("write a synthetic two-factor corpus with labels and trials", [
        Param("out", DIR, required=True, help="output directory"),
        Param("k_true", int, 8, "true number of mixtures"),
        Param("n_classes", int, 20, "number of sequence classes"),
        Param("utts_per_class", int, 30, "utterances per class"),
        Param("frames_per_utt", int, 200, "frames per utterance"),
        Param("feat_dim", int, 20, "feature dimension"),
        Param("noise_scale", float, 0.3, "observation noise standard deviation"),
        Param("latent_dim", int, 4, "sequence vector dimension of the generator"),
        Param("label_scale", float, D.SYNTH_LABEL_SCALE, "scale of the one-hot label input"),
        Param("n_trials", int, 2000, "number of verification trials"),
    ]),
    "train": ("train a model on a feature archive", [
        Param("features", IN, required=True, help="training feature archive"),
        Param("out", DIR, required=True, help="checkpoint directory"),
        Param("resume", bool, False, "continue from the last checkpoint in --out"),
        *TRAIN_PARAMS,
        *ARCH_PARAMS,
    ]),
    "extract-embeddings": ("write mu_omega per utterance as 1 x E archive rows", [
        Param("model", IN, required=True, help="checkpoint"),
        Param("features", IN, required=True, help="feature archive"),
        Param("out", OUT, required=True, help="embedding archive"),
    ]),
    "tokenize": ("write per-frame mixture posteriors", [
        Param("model", IN, required=True, help="checkpoint"),
        Param("features", IN, required=True, help="feature archive"),
        Param("out", OUT, required=True, help="posterior archive (T x K rows)"),
        Param("labels_out", OUT, None, "optional text file of argmax labels"),
    ]),
    "reconstruct": ("decode features from soft posteriors", [
        Param("model", IN, required=True, help="checkpoint"),
        Param("features", IN, required=True, help="feature archive"),
        Param("out", OUT, required=True, help="reconstructed feature archive"),
        Param("setting", str, "per_utt", "conditioning vector", choices=("per_utt", "unified")),
        Param("train_features", IN, None, "training archive averaged by the unified setting"),
    ]),
    "eval-sv": ("score verification trials and write EER / mDCF", [
        Param("embeddings", IN, required=True, help="embedding archive"),
        Param("trials", IN, required=True, help="trial list"),
        Param("out", OUT, required=True, help="report file"),
        Param("backend", str, "cosine", "scoring backend", choices=("cosine", "plda")),
        Param("train_embeddings", IN, None, "labelled embeddings for fitting the PLDA backend"),
        Param("lda_dim", int, 150, "LDA output dimension"),
        Param("p_target", float, 0.01, "target prior of the detection cost"),
        Param("scores_out", OUT, None, "optional score file"),
    ]),
    "eval-abx": ("ABX error rates from DTW distances", [
        Param("features", IN, required=True, help="frame representations, one sequence per item"),
        Param("task", IN, required=True, help="ABX task file"),
        Param("categories", IN, None, "optional 'item category' file"),
        Param("out", OUT, required=True, help="report file"),
    ]),
    "selfcheck": ("run the built-in verification suites", []),
}


def params_for(command: str) -> list[Param]:
    return COMMANDS[command][1] + COMMON


# ----------------------------------------------------------------- run configuration


@dataclass(frozen=True)
class RunConfig:
    command: str
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def canonical(self) -> str:
        return json.dumps({"command": self.command, **self.values}, sort_keys=True, default=str)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def to_text(self) -> str:
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in sorted(self.values.items()))


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; blank lines are ignored."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
    items = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{n}: expected key=value")
        items[key.strip().replace("-", "_")] = value.strip()
    return items


def convert(param: Param, raw) -> Any:
    if raw is None:
        return None
    if param.kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{param.key}: expected a boolean, got {raw!r}")
    if param.kind in (IN, OUT, DIR):
        text = str(raw).strip()
        return text or None
    try:
        value = param.kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{param.key}: expected {param.kind.__name__}, got {raw!r}") from None
    if param.choices and value not in param.choices:
        raise ConfigError(f"{param.key}: must be one of {', '.join(param.choices)}")
    return value


def build_run_config(command: str, file_items: dict[str, str], flags: dict[str, Any]) -> RunConfig:
    """Merge defaults, config-file entries and flags, then check values and paths."""
    known = {p.key: p for p in params_for(command)}
    unknown = sorted(set(file_items) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    values = {k: p.default for k, p in known.items()}
    for key, raw in file_items.items():
        values[key] = convert(known[key], raw)
    for key, raw in flags.items():
        if raw is not None:
            values[key] = convert(known[key], raw)
    for key, p in known.items():
        if p.required and values[key] is None:
            raise ConfigError(f"{command}: missing required parameter {key}")
    if values["workers"] < 1:
        raise ConfigError("workers must be at least 1")
    for key, p in known.items():
        if values[key] is not None and p.kind == IN and not Path(values[key]).is_file():
            raise FileNotFoundError(f"{key}: no such file {values[key]}")
        if values[key] is not None and p.kind == OUT:
            parent = Path(values[key]).resolve().parent
            if not parent.is_dir():
                raise FileNotFoundError(f"{key}: directory {parent} does not exist")
    return RunConfig(command, values)


# ----------------------------------------------------------------- helpers


def ordered_map(fn: Callable, items, workers: int) -> list:
    """``map`` with results in input order regardless of thread count."""
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def arch_from(cfg: RunConfig, feat_dim: int) -> M.ArchConfig:
    items = {p.key: str(cfg[p.key]) for p in ARCH_PARAMS}
    if cfg["feat_dim"] == 0:
        items["feat_dim"] = str(feat_dim)
    try:
        return M.ArchConfig.from_mapping(items)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_from(cfg: RunConfig) -> T.TrainConfig:
    kwargs = {p.key: cfg[p.key] for p in TRAIN_PARAMS}
    return T.TrainConfig(seed=cfg["seed"], **kwargs)


def embeddings_by_id(path) -> dict[str, np.ndarray]:
    out = {}
    for seq in D.load_features(path):
        if seq.frames.shape[0] != 1:
            raise FormatError(f"{path}: {seq.utt_id} is not a 1 x E embedding row")
        out[seq.utt_id] = seq.frames[0].astype(np.float64)
    return out


# ----------------------------------------------------------------- commands


def cmd_gen_synth(cfg: RunConfig) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset, oracle = D.synth_generate(
        cfg["k_true"], cfg["n_classes"], cfg["utts_per_class"], cfg["frames_per_utt"],
        cfg["feat_dim"], cfg["noise_scale"], seed=cfg["seed"], latent_dim=cfg["latent_dim"],
        label_scale=cfg["label_scale"],
    )
    D.save_features(out / "features.feat", dataset)
    D.write_labels(out / "labels.txt", oracle, [s.utt_id for s in dataset])
    trials = E.make_trials([s.utt_id for s in dataset], oracle.utt_classes, cfg["n_trials"], seed=cfg["seed"])
    E.write_trials(out / "trials.txt", trials)
    np.savez(out / "oracle.npz", sequence_vectors=oracle.sequence_vectors,
             **{f"generator/{k}": v for k, v in oracle.generator.items()})
    log.info("wrote %d utterances and %d trials to %s", len(dataset), len(trials), out)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    dataset = D.load_features(cfg["features"])
    if not dataset:
        raise ConfigError(f"{cfg['features']}: empty archive")
    arch = arch_from(cfg, dataset[0].frames.shape[1])
    train_config = train_from(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(cfg.to_text())
    if cfg["workers"] > 1:
        log.info("batch norm couples the frames of a batch; training runs on one thread")
    result = T.train(train_config, arch, dataset, out_dir=out, resume=cfg["resume"])
    log.info("final loss/frame %.5f", result.log[-1]["total"] if result.log else float("nan"))
    return 0


def _load_model_and_features(cfg: RunConfig):
    params = M.load_params(cfg["model"])
    dataset = D.load_features(cfg["features"])
    dims = {s.frames.shape[1] for s in dataset}
    if dims and dims != {params.config.feat_dim}:
        raise ConfigError(f"feature dimension {sorted(dims)} does not match model feat_dim {params.config.feat_dim}")
    return params, dataset


def cmd_extract_embeddings(cfg: RunConfig) -> int:
    params, dataset = _load_model_and_features(cfg)
    vecs = ordered_map(lambda s: M.embed_utterance(params, s.frames).mu_omega, dataset, cfg["workers"])
    D.save_features(cfg["out"], [D.FeatureSequence(s.utt_id, v[None, :], s.spk_id) for s, v in zip(dataset, vecs)])
    return 0


def cmd_tokenize(cfg: RunConfig) -> int:
    params, dataset = _load_model_and_features(cfg)
    posts = ordered_map(lambda s: M.tokenize_frames(params, s.frames), dataset, cfg["workers"])
    D.save_features(cfg["out"], [s.replace(p.probs) for s, p in zip(dataset, posts)])
    if cfg["labels_out"]:
        lines = [f"{s.utt_id} " + " ".join(str(int(v)) for v in p.labels) for s, p in zip(dataset, posts)]
        Path(cfg["labels_out"]).write_text("\n".join(lines) + "\n")
    return 0


def cmd_reconstruct(cfg: RunConfig) -> int:
    params, dataset = _load_model_and_features(cfg)
    train_corpus = None
    if cfg["setting"] == "unified":
        if not cfg["train_features"]:
            raise ConfigError("the unified setting needs train_features")
        train_corpus = D.load_features(cfg["train_features"])
        if not train_corpus:
            raise ConfigError(f"{cfg['train_features']}: empty archive")
    out = ordered_map(lambda s: E.reconstruct(params, [s], cfg["setting"], train_corpus)[0], dataset, cfg["workers"])
    D.save_features(cfg["out"], out)
    return 0


def cmd_eval_sv(cfg: RunConfig) -> int:
    embeddings = embeddings_by_id(cfg["embeddings"])
    trials = E.read_trials(cfg["trials"])
    missing = sorted({u for a, b, _ in trials.trials for u in (a, b)} - set(embeddings))
    if missing:
        raise FormatError(f"{len(missing)} trial utterances have no embedding, e.g. {missing[0]}")
    backend = None
    if cfg["backend"] == "plda":
        if not cfg["train_embeddings"]:
            raise ConfigError("the plda backend needs train_embeddings")
        train = D.load_features(cfg["train_embeddings"])
        if any(s.spk_id is None for s in train):
            raise FormatError(f"{cfg['train_embeddings']}: every row needs a speaker id")
        x = np.stack([s.frames[0] for s in train]).astype(np.float64)
        backend = E.backend_fit(x, [s.spk_id for s in train], lda_dim=cfg["lda_dim"])
        scores = E.score_trials(trials, embeddings, backend)
    else:
        center = np.mean(np.stack(list(embeddings.values())), axis=0)
        scores = E.score_trials(trials, embeddings, center=center)
    metrics = E.trial_metrics(trials, scores, cfg["p_target"])
    E.write_report(cfg["out"], {**metrics, "n_trials": len(trials)})
    if cfg["scores_out"]:
        E.write_scores(cfg["scores_out"], trials, scores)
    print(f"eer={metrics['eer']:.6g} mdcf={metrics['mdcf']:.6g}")
    return 0


def cmd_eval_abx(cfg: RunConfig) -> int:
    reps = {s.utt_id: s.frames.astype(np.float64) for s in D.load_features(cfg["features"])}
    task = E.read_abx_task(cfg["task"], cfg["categories"])
    missing = sorted({u for t in task.triples for u in t[:3]} - set(reps))
    if missing:
        raise FormatError(f"{len(missing)} task items have no representation, e.g. {missing[0]}")
    pairs = sorted({(a, x) for a, b, x, _ in task.triples} | {(b, x) for a, b, x, _ in task.triples})
    dists = ordered_map(lambda p: E.dtw_distance(reps[p[0]], reps[p[1]]), pairs, cfg["workers"])
    table = dict(zip(pairs, dists))
    rates = E.abx_error_rate(task, reps, distance=None, table=table)
    E.write_report(cfg["out"], {f"abx_{cond}": v for cond, v in sorted(rates.items())})
    print(" ".join(f"abx_{cond}={v:.6g}" for cond, v in sorted(rates.items())))
    return 0


def cmd_selfcheck(cfg: RunConfig) -> int:
    ok = True
    for name, suite in selfcheck.SUITES.items():
        result = suite(cfg["seed"])
        ok &= result.passed
        print(f"{name}: {'PASS' if result.passed else 'FAIL'} ({result.detail})", flush=True)
    return 0 if ok else 1


HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "extract-embeddings": cmd_extract_embeddings,
    "tokenize": cmd_tokenize,
    "reconstruct": cmd_reconstruct,
    "eval-sv": cmd_eval_sv,
    "eval-abx": cmd_eval_abx,
    "selfcheck": cmd_selfcheck,
}


# ----------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def usage() -> str:
    rows = [f"  {name:<20}{desc}" for name, (desc, _) in COMMANDS.items()]
    return "usage: mfae <command> [--config FILE] [options]\n\ncommands:\n" + "\n".join(rows) + "\n"


def command_parser(command: str) -> argparse.ArgumentParser:
    parser = _Parser(prog=f"mfae {command}", description=COMMANDS[command][0])
    parser.add_argument("--config", help="key=value file; flags given here take precedence")
    parser.add_argument("--quiet", action="store_true", help="only log warnings")
    for p in params_for(command):
        flag = "--" + p.key.replace("_", "-")
        if p.kind is bool:
            parser.add_argument(flag, dest=p.key, nargs="?", const="true", default=None, help=p.help)
        else:
            parser.add_argument(flag, dest=p.key, default=None, choices=p.choices,
                                help=f"{p.help} (default: {p.default})" if p.default is not None else p.help)
    return parser


def emit_error(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


def run(command: str, args: list[str]) -> int:
    """Execute one command; returns the process exit code."""
    if command not in HANDLERS:
        sys.stderr.write(usage())
        return emit_error(EXIT_USAGE, "usage", f"unknown command {command!r}")
    try:
        ns = command_parser(command).parse_args(args)
        file_items = read_config_file(ns.config) if ns.config else {}
        flags = {p.key: getattr(ns, p.key) for p in params_for(command)}
        cfg = build_run_config(command, file_items, flags)
        logging.basicConfig(level=logging.WARNING if ns.quiet else logging.INFO,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        log.info("%s run config %s", command, cfg.digest())
        return HANDLERS[command](cfg)
    except DivergenceError as exc:
        return emit_error(EXIT_DIVERGED, "divergence", str(exc))
    except ConfigError as exc:
        return emit_error(EXIT_CONFIG, "config", str(exc))
    except (FormatError, OSError, EOFError) as exc:
        return emit_error(EXIT_IO, "io", str(exc))
    except (ValueError, KeyError) as exc:
        return emit_error(EXIT_CONFIG, "config", str(exc))


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] in ("-h", "--help"):
        sys.stdout.write(usage())
        return 0 if argv else EXIT_USAGE
    return run(argv[0], argv[1:])


if __name__ == "__main__":
    sys.exit(main())
