"""Command-line entry point: ``airglyph <subcommand> [options]``.

Settings resolve in this order, later layers winning: built-in defaults, the
JSON file given by ``--config``, environment variables (LLM endpoint only),
command-line flags. The resolved settings are echoed into every artifact,
minus the output path and the API key.

Exit status: 0 success, 2 configuration error, 3 file error, 4 transport
error, 5 validation failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRANSPORT, EXIT_VALIDATION = 0, 2, 3, 4, 5

log = logging.getLogger("airglyph")

DEFAULTS: dict = {
    "seed": 0,
    "jobs": 1,
    "paths": {
        "dataset": "airglyph_data.jsonl",
        "bundle": "airglyph_mapper.json",
        "lexicon": None,
        "reports": "reports",
        "pairs": "airglyph_pairs.jsonl",
        "mock_script": None,
        "checkpoint": None,
    },
    "gen": {"subjects": 2, "reps_per_letter": 10, "modes": ["2D", "3D"], "rate_hz": 100.0, "duration_s": 2.0},
    "split": {"train": "S1", "test": "S2"},
    "mapper": {"margin": 1.0, "epochs": 40, "batch_size": 32, "triplets_per_epoch": 1024, "lr": 1e-3,
               "mining": "semihard", "embed_dim": 32, "target_len": 128, "encoder_head": "flatten"},
    "cnn": {"epochs": 30, "batch_size": 32, "lr": 1e-3, "head": "flatten"},
    "eval": {"predictor": "pipeline3d", "modes": ["2D", "3D"], "k": 1, "band": None, "constant_letter": "A",
             "words_per_cell": 50, "lengths": [3, 4, 5, 6], "ks": [2, 3, 4, 5], "alpha": 1.0, "val_reps": 5,
             "decoder": "lexicon"},
    "llm": {"client": "mock", "base_url": None, "api_key": None, "model": "", "temperature": 0.0,
            "max_tokens": 512, "variations": 3, "few_shot": 0, "budget": 16000, "decimals": 3},
    "gradcheck": {"h": 1e-4, "tol": 1e-4, "linear_h": 1.0, "linear_tol": 1e-10, "max_per_array": 256},
}

ENV_KEYS = {"AIRGLYPH_LLM_BASE_URL": ("llm", "base_url"), "AIRGLYPH_LLM_API_KEY": ("llm", "api_key"),
            "AIRGLYPH_LLM_MODEL": ("llm", "model")}

# argparse dest -> config location
FLAG_KEYS = {
    "seed": ("seed",), "jobs": ("jobs",),
    "subjects": ("gen", "subjects"), "reps": ("gen", "reps_per_letter"), "gen_modes": ("gen", "modes"),
    "rate_hz": ("gen", "rate_hz"), "duration_s": ("gen", "duration_s"),
    "dataset": ("paths", "dataset"), "bundle": ("paths", "bundle"), "lexicon": ("paths", "lexicon"),
    "mock_script": ("paths", "mock_script"), "checkpoint": ("paths", "checkpoint"),
    "train_subject": ("split", "train"), "test_subject": ("split", "test"),
    "epochs": ("mapper", "epochs"), "lr": ("mapper", "lr"), "margin": ("mapper", "margin"),
    "mining": ("mapper", "mining"), "triplets_per_epoch": ("mapper", "triplets_per_epoch"),
    "cnn_epochs": ("cnn", "epochs"),
    "predictor": ("eval", "predictor"), "eval_modes": ("eval", "modes"), "k": ("eval", "k"),
    "band": ("eval", "band"), "words_per_cell": ("eval", "words_per_cell"), "decoder": ("eval", "decoder"),
    "alpha": ("eval", "alpha"),
    "client": ("llm", "client"), "few_shot": ("llm", "few_shot"), "variations": ("llm", "variations"),
    "h": ("gradcheck", "h"), "tol": ("gradcheck", "tol"),
}


class ConfigError(Exception):
    pass


class ValidationFailure(Exception):
    pass


# -- configuration -----------------------------------------------------------

def _check_keys(layer: dict, schema: dict, where: str):
    for key, value in layer.items():
        if key not in schema:
            raise ConfigError(f"unknown setting {where}{key!r}")
        if isinstance(schema[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"setting {where}{key!r} must be an object")
            _check_keys(value, schema[key], f"{where}{key}.")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set(d: dict, path: tuple, value):
    for key in path[:-1]:
        d = d.setdefault(key, {})
    d[path[-1]] = value


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    _check_keys(data, DEFAULTS, "")
    return data


def resolve_config(args: argparse.Namespace, env=None) -> dict:
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        cfg = _merge(cfg, load_config_file(args.config))
    for var, path in ENV_KEYS.items():
        if env.get(var):
            _set(cfg, path, env[var])
    for dest, path in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set(cfg, path, value)
    if not isinstance(cfg["seed"], int) or not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        raise ConfigError("seed must be an integer and jobs a positive integer")
    return cfg


def echo(cfg: dict, command: str) -> dict:
    """The settings as recorded in artifacts: secrets masked."""
    out = copy.deepcopy(cfg)
    if out["llm"].get("api_key"):
        out["llm"]["api_key"] = "***"
    out["command"] = command
    out["version"] = __version__
    return out


def _section(cfg: dict, name: str, cls):
    try:
        return cls(**cfg[name])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} settings: {exc}") from exc


# -- helpers -----------------------------------------------------------------

def _gen_spec(cfg: dict):
    from .synth import GenSpec, KinematicsConfig, default_subjects

    g = cfg["gen"]
    try:
        return GenSpec(subjects=tuple(default_subjects(int(g["subjects"]))), reps_per_letter=int(g["reps_per_letter"]),
                       modes=tuple(g["modes"]), seed=cfg["seed"],
                       kinematics=KinematicsConfig(duration_s=float(g["duration_s"]), rate_hz=float(g["rate_hz"])))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid gen settings: {exc}") from exc


def _mapper_config(cfg: dict):
    from .metricmap import MapperConfig

    return _section({"mapper": {**cfg["mapper"], "seed": cfg["seed"]}}, "mapper", MapperConfig)


def _cnn_config(cfg: dict):
    from .classify import CnnConfig

    return _section({"cnn": {**cfg["cnn"], "seed": cfg["seed"], "target_len": cfg["mapper"]["target_len"]}},
                    "cnn", CnnConfig)


def _load_split(cfg: dict):
    from .core import load_dataset

    ds = load_dataset(cfg["paths"]["dataset"])
    train_s, test_s = cfg["split"]["train"], cfg["split"]["test"]
    if train_s == test_s:
        raise ConfigError("train and test subjects must differ")
    if train_s not in ds.subjects:
        raise ConfigError(f"train subject {train_s!r} not in dataset (subjects: {', '.join(ds.subjects)})")
    train = ds.filter(subject=train_s)
    test = ds.filter(subject=test_s) if test_s in ds.subjects else None
    return ds, train, test


def _client(cfg: dict):
    from .llm import HttpClient, MockClient, MockScript

    llm = cfg["llm"]
    if llm["client"] == "mock":
        return MockClient(MockScript.load(cfg["paths"]["mock_script"]))
    if llm["client"] == "http":
        if not llm["base_url"]:
            raise ConfigError("llm.base_url (or AIRGLYPH_LLM_BASE_URL) is required for the http client")
        return HttpClient(llm["base_url"], llm["model"], llm["api_key"])
    raise ConfigError(f"unknown llm client {llm['client']!r}")


def _write_json(path: Path, body: dict):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _out(args, default) -> Path:
    return Path(getattr(args, "out", None) or default)


def _load_bundle(cfg: dict):
    from .metricmap import MapperBundle

    path = Path(cfg["paths"]["bundle"])
    if not path.is_file():
        raise FileNotFoundError(f"mapper bundle not found: {path} (run train-mapper first)")
    return MapperBundle.load(path)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    from .core import Dataset, save_dataset
    from .synth import synth_dataset

    ds = synth_dataset(_gen_spec(cfg))
    prov = ds.provenance + " config=" + json.dumps(echo(cfg, "gen-data"), sort_keys=True, separators=(",", ":"))
    out = _out(args, cfg["paths"]["dataset"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(Dataset(ds.recordings, prov), out)
    print(f"wrote {len(ds)} recordings to {out}")
    return EXIT_OK


def cmd_train_mapper(args, cfg) -> int:
    from .classify import train_cnn_classifier
    from .core import WritingMode
    from .metricmap import MapperBundle, build_gallery, mapping_accuracy, train_mapper

    _, train, test = _load_split(cfg)
    mcfg = _mapper_config(cfg)
    flat, air = train.filter(mode=WritingMode.FLAT_2D), train.filter(mode=WritingMode.MID_AIR_3D)
    res = train_mapper(flat, air, mcfg, log=log.info)
    gallery = build_gallery(res.encoder2d, flat, mcfg.target_len)
    cnn = train_cnn_classifier(flat, _cnn_config(cfg), log=log.info)
    meta = {"config": echo(cfg, "train-mapper"), "cnn_history": cnn.history,
            "train_mapping_accuracy": mapping_accuracy(res.encoder3d, air, gallery)}
    if test is not None and len(test.filter(mode=WritingMode.MID_AIR_3D)):
        meta["test_mapping_accuracy"] = mapping_accuracy(res.encoder3d, test.filter(mode=WritingMode.MID_AIR_3D),
                                                         gallery)
    bundle = MapperBundle(res.encoder2d, res.encoder3d, mcfg, gallery, res.history, cnn.net, meta)
    out = _out(args, cfg["paths"]["bundle"])
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle.save(out)
    summary = ", ".join(f"{k} {v:.4f}" for k, v in meta.items() if k.endswith("accuracy"))
    print(f"wrote mapper bundle to {out} ({summary})")
    return EXIT_OK


class _ByMode:
    """Route each recording to the predictor for its writing mode."""

    def __init__(self, table):
        self.table = table

    def __call__(self, rec):
        return self.table[rec.mode.value](rec)


def _letter_predictor(cfg: dict, name: str, train, *, bundle=None):
    from .classify import CnnClassifier, DtwKnnClassifier, Pipeline3D
    from .evalharness import constant_predictor, oracle_predictor
    from .llm import LlmLetterPredictor, window_for

    ev = cfg["eval"]
    if name == "oracle":
        return oracle_predictor
    if name == "constant":
        return constant_predictor(ev["constant_letter"])
    if name == "dtw":
        if train is None:
            raise ConfigError("the dtw predictor needs a dataset with the training subject")
        table = {}
        for mode in ("2D", "3D"):
            part = train.filter(mode=mode)
            if len(part):
                table[mode] = DtwKnnClassifier(part, ev["k"], ev["band"], cfg["mapper"]["target_len"])
        return _ByMode(table)
    if name in ("cnn", "pipeline3d"):
        bundle = bundle or _load_bundle(cfg)
        if bundle.letter_model is None:
            raise ConfigError("the mapper bundle holds no letter model")
        cnn = CnnClassifier(bundle.letter_model)
        if name == "cnn":
            return cnn
        # flat recordings need no mapping; they go straight to the CNN
        return _ByMode({"2D": cnn, "3D": Pipeline3D(bundle, cnn)})
    if name == "llm":
        llm = cfg["llm"]
        exemplars = []
        if llm["few_shot"] > 0:
            if train is None:
                raise ConfigError("few-shot prompting needs the training subject's recordings")
            rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 7]))
            pool = list(train.recordings)
            for i in rng.permutation(len(pool))[: llm["few_shot"]]:
                exemplars.append((window_for(pool[i]), pool[i].letter))
        return LlmLetterPredictor(_client(cfg), exemplars, llm["budget"], decimals=llm["decimals"],
                                  temperature=llm["temperature"], max_tokens=llm["max_tokens"], seed=cfg["seed"])
    raise ConfigError(f"unknown predictor {name!r}")


def cmd_eval_letters(args, cfg) -> int:
    from .core import Dataset
    from .evalharness import emit_report, run_letter_eval

    _, train, test = _load_split(cfg)
    if test is None:
        raise ConfigError(f"test subject {cfg['split']['test']!r} not in dataset")
    modes = set(cfg["eval"]["modes"])
    test = Dataset(tuple(r for r in test if r.mode.value in modes), test.provenance)
    predictor = _letter_predictor(cfg, cfg["eval"]["predictor"], train)
    results = run_letter_eval(predictor, test, jobs=cfg["jobs"])
    out = _out(args, Path(cfg["paths"]["reports"]) / "letters.json")
    emit_report(results, out, echo(cfg, "eval-letters"))
    for mode, ev in results.items():
        print(f"{mode}: accuracy {ev.metrics.accuracy:.4f} macro-F1 {ev.metrics.macro_f1:.4f} (n={ev.metrics.n})")
    return EXIT_OK


def _word_decoder(cfg, name, lexicon, model):
    from .evalharness import lexicon_decoder
    from .worddecode import NoWordFound, PositionObservations, llm_decode_word, majority_string

    if name == "lexicon":
        return lexicon_decoder(lexicon, model)

    def obs_of(positions):
        kept = [[o for o in p if o != "?"] for p in positions]
        k = min(len(p) for p in kept)
        return PositionObservations(tuple(tuple(p[:k]) for p in kept)) if k else None

    if name == "majority":
        return lambda positions: (lambda o: majority_string(o) if o else None)(obs_of(positions))
    if name == "llm":
        client = _client(cfg)

        def decode(positions):
            o = obs_of(positions)
            if o is None:
                return None
            try:
                return llm_decode_word(client, o, cfg["llm"]["temperature"], cfg["llm"]["max_tokens"],
                                       cfg["seed"]).word
            except NoWordFound:
                return None

        return decode
    raise ConfigError(f"unknown decoder {name!r}")


def cmd_eval_words(args, cfg) -> int:
    from .core import WritingMode
    from .evalharness import WordSynth, confusion, emit_report, run_word_grid
    from .synth import GenSpec, synth_dataset
    from .worddecode import fit_confusion_model, load_lexicon

    ev = cfg["eval"]
    spec = _gen_spec(cfg)
    train_s, test_s = cfg["split"]["train"], cfg["split"]["test"]
    for s in (train_s, test_s):
        if s not in spec.subjects:
            raise ConfigError(f"subject {s!r} is not generated by the gen settings ({', '.join(spec.subjects)})")
    bundle = _load_bundle(cfg) if ev["predictor"] in ("cnn", "pipeline3d") else None
    lexicon = load_lexicon(cfg["paths"]["lexicon"])
    predictor = _letter_predictor(cfg, ev["predictor"], None, bundle=bundle)
    # confusion model from fresh training-subject reps the mapper never saw
    val = synth_dataset(GenSpec(subjects=spec.subjects, reps_per_letter=int(ev["val_reps"]),
                                modes=(WritingMode.MID_AIR_3D,), kinematics=spec.kinematics, seed=spec.seed,
                                rep_offset=spec.reps_per_letter)).filter(subject=train_s)
    val_preds = [predictor(r) for r in val]
    val_cm = confusion(val_preds, [r.letter for r in val])
    model = fit_confusion_model(val_cm, float(ev["alpha"]))
    synth = WordSynth(test_s, spec.noise_for(test_s), spec.kinematics)
    grid = run_word_grid(predictor, lexicon, model, synth, int(ev["words_per_cell"]), tuple(ev["ks"]),
                         tuple(ev["lengths"]), seed=cfg["seed"], jobs=cfg["jobs"],
                         decoder=_word_decoder(cfg, ev["decoder"], lexicon, model))
    out = _out(args, Path(cfg["paths"]["reports"]) / "words.json")
    report_cfg = echo(cfg, "eval-words")
    report_cfg["validation_letter_accuracy"] = val_cm.accuracy()
    emit_report(grid, out, report_cfg)
    print(grid.table(), end="")
    print(f"mean accuracy for lengths <= 5: {grid.mean_for_lengths(5):.4f}")
    return EXIT_OK


def cmd_build_pairs(args, cfg) -> int:
    from .llm import build_pair_dataset, export_pairs

    _, train, _ = _load_split(cfg)
    pairs = build_pair_dataset(_client(cfg), train, int(cfg["llm"]["variations"]), jobs=cfg["jobs"],
                               checkpoint=cfg["paths"]["checkpoint"], decimals=int(cfg["llm"]["decimals"]),
                               seed=cfg["seed"])
    out = _out(args, cfg["paths"]["pairs"])
    out.parent.mkdir(parents=True, exist_ok=True)
    export_pairs(pairs, out)
    digest = hashlib.sha256(out.read_bytes()).hexdigest()
    _write_json(out.with_name(out.name + ".manifest.json"),
                {"config": echo(cfg, "build-pairs"), "pairs": len(pairs), "recordings": len(train),
                 "sha256": digest})
    print(f"wrote {len(pairs)} pairs from {len(train)} recordings to {out}")
    return EXIT_OK


def gradcheck_suite(cfg: dict, corrupt: bool = False) -> list[dict]:
    """Finite-difference checks over the network shapes the package trains."""
    from .metricmap import init_encoders, triplet_grad_check
    from .nn import Dense, NetSpec, Network, encoder_spec, grad_check

    gc = cfg["gradcheck"]
    T = cfg["mapper"]["target_len"]
    rng = np.random.default_rng(cfg["seed"])
    x = rng.normal(size=(2, T, 3))
    bad = None
    if corrupt:
        def bad(net, cache, grad):
            pg, xg = net.backward(cache, grad)
            return [{k: v * 1.01 for k, v in p.items()} for p in pg], xg

    # a linear map has exact central differences at any step; a large step
    # keeps cancellation error far below the tight tolerance
    cases = [
        ("encoder_flatten", encoder_spec(32, T, head="flatten"), gc["h"], gc["tol"]),
        ("encoder_gap", encoder_spec(32, T, head="gap"), gc["h"], gc["tol"]),
        ("cnn_classifier", encoder_spec(26, T, head=cfg["cnn"]["head"]), gc["h"], gc["tol"]),
        ("linear_dense", NetSpec((Dense(8),), input_shape=(16, 3)), gc["linear_h"], gc["linear_tol"]),
    ]
    results = []
    for name, spec, h, tol in cases:
        net = Network(spec, seed=cfg["seed"])
        xin = x if spec.input_shape[0] == T else rng.normal(size=(2,) + tuple(spec.input_shape))
        r = grad_check(net, xin, h, include_input=True, grad_fn=bad, max_per_array=gc["max_per_array"],
                       seed=cfg["seed"])
        results.append({"name": name, "max_rel_error": r.max_rel_error, "checked": r.n_checked,
                        "skipped": r.n_skipped, "tolerance": tol, "passed": r.max_rel_error <= tol})
    enc2d, enc3d = init_encoders(_mapper_config(cfg))
    xs = rng.normal(size=(3, 4, T, 3))
    r = triplet_grad_check(enc2d, enc3d, xs[0], xs[1], xs[2], cfg["mapper"]["margin"], gc["h"],
                           max_per_array=min(128, gc["max_per_array"]), seed=cfg["seed"],
                           analytic_scale=1.01 if corrupt else 1.0)
    results.append({"name": "triplet_loss", "max_rel_error": r.max_rel_error, "checked": r.n_checked,
                    "skipped": r.n_skipped, "tolerance": gc["tol"], "passed": r.max_rel_error <= gc["tol"]})
    return results


def cmd_grad_check(args, cfg) -> int:
    results = gradcheck_suite(cfg, corrupt=bool(getattr(args, "corrupt", False)))
    ok = all(r["passed"] for r in results)
    out = _out(args, Path(cfg["paths"]["reports"]) / "gradcheck.json")
    _write_json(out, {"config": echo(cfg, "grad-check"), "checks": results, "passed": ok})
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['name']}: max relative error {r['max_rel_error']:.3e} "
              f"(tolerance {r['tolerance']:.0e}, {r['checked']} checked, {r['skipped']} at kinks)")
    if not ok:
        raise ValidationFailure("gradient check failed")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train-mapper": cmd_train_mapper, "eval-letters": cmd_eval_letters,
            "eval-words": cmd_eval_words, "build-pairs": cmd_build_pairs, "grad-check": cmd_grad_check}


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="JSON settings file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    g.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker cap")
    g.add_argument("--out", default=argparse.SUPPRESS, help="output artifact path")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="progress logging")

    parser = argparse.ArgumentParser(prog="airglyph", parents=[common],
                                     description="Synthetic air-writing recognition experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="synthesize a dataset")
    p.add_argument("--subjects", type=int)
    p.add_argument("--reps", type=int, help="recordings per letter, mode and subject")
    p.add_argument("--modes", dest="gen_modes", nargs="+", choices=["2D", "3D"])
    p.add_argument("--rate-hz", type=float)
    p.add_argument("--duration-s", type=float)

    def data_opts(p):
        p.add_argument("--dataset")
        p.add_argument("--train-subject")
        p.add_argument("--test-subject")

    p = sub.add_parser("train-mapper", parents=[common], help="train the 3D-to-2D mapper and the CNN")
    data_opts(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--mining", choices=["random", "semihard"])
    p.add_argument("--triplets-per-epoch", type=int)
    p.add_argument("--cnn-epochs", type=int)

    predictors = ["oracle", "constant", "dtw", "cnn", "pipeline3d", "llm"]
    p = sub.add_parser("eval-letters", parents=[common], help="per-mode letter accuracy on the test subject")
    data_opts(p)
    p.add_argument("--bundle")
    p.add_argument("--predictor", choices=predictors)
    p.add_argument("--modes", dest="eval_modes", nargs="+", choices=["2D", "3D"])
    p.add_argument("--k", type=int)
    p.add_argument("--band", type=int)
    p.add_argument("--client", choices=["mock", "http"])
    p.add_argument("--few-shot", type=int)
    p.add_argument("--mock-script")

    p = sub.add_parser("eval-words", parents=[common], help="word accuracy by length and repetitions")
    p.add_argument("--bundle")
    p.add_argument("--predictor", choices=["oracle", "constant", "cnn", "pipeline3d", "llm"])
    p.add_argument("--decoder", choices=["lexicon", "majority", "llm"])
    p.add_argument("--words-per-cell", type=int)
    p.add_argument("--lexicon")
    p.add_argument("--alpha", type=float)
    p.add_argument("--train-subject")
    p.add_argument("--test-subject")
    p.add_argument("--client", choices=["mock", "http"])
    p.add_argument("--mock-script")

    p = sub.add_parser("build-pairs", parents=[common], help="generate instruction-answer pairs")
    data_opts(p)
    p.add_argument("--variations", type=int)
    p.add_argument("--client", choices=["mock", "http"])
    p.add_argument("--mock-script")
    p.add_argument("--checkpoint")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--h", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--corrupt", action="store_true", help="scale analytic gradients by 1.01 (must fail)")
    return parser


def main(argv=None) -> int:
    from .core import DatasetError
    from .llm import PairGenerationError, TransportError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except PairGenerationError as exc:
        print(f"pair generation stopped: {exc} ({exc.completed} recordings saved"
              f"{' to ' + exc.checkpoint if exc.checkpoint else ''})", file=sys.stderr)
        return EXIT_TRANSPORT if isinstance(exc.__cause__, TransportError) else EXIT_VALIDATION
    except OSError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationFailure as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DatasetError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
