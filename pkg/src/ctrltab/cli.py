"""Command-line entrypoint orchestrating the pipeline.

Every artifact is written atomically (temp file + rename) and accompanied by
a manifest recording the resolved configuration hash, seed, and input
digests, so identical invocations are byte-reproducible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import corpus as corpus_mod
from . import metrics as metrics_mod
from .data import corpus_stats, pair_to_dict, read_pairs
from .errors import CtrltabError, ValidationError
from .generator import GenerationConfig, GeneratorModel, generate_many, train_generator
from .nn import ModelConfig, TrainConfig, cross_entropy, gradient_check
from .retriever import RetrieverModel, retrieve_topn, train_retriever
from .service import serve as build_server

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out_path: str | Path, command: str, config: dict,
                   inputs: list[str | Path], seed: int | None = None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode("utf-8")
        ).hexdigest(),
        "seed": seed,
        "inputs": {str(p): _sha256_file(p) for p in sorted(map(str, inputs))},
    }
    atomic_write_bytes(
        str(out_path) + ".manifest.json",
        (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"),
    )


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text("utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    config = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"config line {line!r} is not key=value")
        key, value = line.split("=", 1)
        config[key.strip().replace("-", "_")] = json.loads(value.strip()) if value.strip()[:1] in "0123456789-.[{tf\"" else value.strip()
    return config


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Explicit flags win over the config file, which wins over defaults."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        for key, value in file_cfg.items():
            if key in merged:
                merged[key] = value
    for key in merged:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


def _require_seed(args) -> int:
    if args.seed is None:
        raise ValidationError("--seed is required for this subcommand")
    return args.seed


def _validate_out(path: str) -> None:
    parent = Path(path).parent
    if str(parent) and not parent.is_dir():
        raise ValidationError(f"output directory {parent} does not exist")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _read_table_sources(path: str) -> list[corpus_mod.TableSource]:
    from .data import Cell, Table

    sources = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                table = Table(
                    id=obj["id"],
                    caption=obj.get("caption", ""),
                    n_rows=obj["n_rows"],
                    n_cols=obj["n_cols"],
                    cells=tuple(
                        Cell(c["row"], c["col"], c["attribute"], c["value"],
                             bool(c.get("is_header", False)))
                        for c in obj["cells"]
                    ),
                )
                table.validate()
                sources.append(
                    corpus_mod.TableSource(table, obj["article_id"], obj["description"])
                )
            except (KeyError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
    return sources


def cmd_build_corpus(args) -> int:
    cfg = _merge_config(args, {
        "theta_overlap": corpus_mod.DEFAULT_THETA_OVERLAP,
        "theta_dup": corpus_mod.DEFAULT_THETA_DUP,
        "cap": corpus_mod.DEFAULT_CAP,
    })
    _validate_out(args.out)
    xml_dir = Path(args.xml)
    xml_files = sorted(xml_dir.glob("*.xml"))
    if not xml_files:
        raise ValidationError(f"no .xml files under {xml_dir}")
    articles = {}
    for path in xml_files:
        article = corpus_mod.parse_article_xml(path.read_bytes())
        articles[article.id] = article
    sources = _read_table_sources(args.tables)
    pairs = corpus_mod.build_pairs(
        sources, articles,
        theta_overlap=cfg["theta_overlap"], theta_dup=cfg["theta_dup"], cap=cfg["cap"],
    )
    lines = "".join(
        json.dumps(pair_to_dict(p), ensure_ascii=False, separators=(",", ":")) + "\n"
        for p in pairs
    )
    atomic_write_bytes(args.out, lines.encode("utf-8"))
    write_manifest(args.out, "build-corpus", cfg, [args.tables, *xml_files], seed=args.seed)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    pairs = read_pairs(args.pairs)
    stats = corpus_stats(pairs)
    body = json.dumps(stats.as_dict(), indent=2) + "\n"
    if args.out:
        atomic_write_bytes(args.out, body.encode("utf-8"))
        write_manifest(args.out, "stats", {}, [args.pairs], seed=args.seed)
    print(body, end="")
    return EXIT_OK


def _model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(
        d_model=cfg["d_model"],
        n_heads=cfg["n_heads"],
        n_layers_enc=cfg["n_layers_enc"],
        n_layers_dec=cfg["n_layers_dec"],
        max_input_len=cfg["max_input_len"],
        max_output_len=cfg["max_output_len"],
    )


def _train_config_from(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        grad_clip_norm=cfg["grad_clip_norm"],
        seed=seed,
        noise_ratio=cfg.get("noise_ratio", 0.6),
    )


_RETRIEVER_DEFAULTS = {
    "d_model": 128, "n_heads": 4, "n_layers_enc": 1, "n_layers_dec": 1,
    "max_input_len": 256, "max_output_len": 64,
    "learning_rate": 2e-3, "batch_size": 64, "epochs": 60,
    "grad_clip_norm": 1.0, "noise_ratio": 0.6,
}

_GENERATOR_DEFAULTS = {
    "d_model": 128, "n_heads": 4, "n_layers_enc": 2, "n_layers_dec": 2,
    "max_input_len": 512, "max_output_len": 64,
    "learning_rate": 1e-3, "batch_size": 32, "epochs": 300,
    "grad_clip_norm": 1.0, "n_kb": 3,
}


def cmd_train_retriever(args) -> int:
    seed = _require_seed(args)
    _validate_out(args.out)
    cfg = _merge_config(args, dict(_RETRIEVER_DEFAULTS))
    pairs = read_pairs(args.pairs)
    model = train_retriever(pairs, _model_config_from(cfg), _train_config_from(cfg, seed))
    model.save(args.out)
    write_manifest(args.out, "train-retriever", cfg, [args.pairs], seed=seed)
    print(f"final loss {model.train_losses[-1]:.4f} over {cfg['epochs']} epochs -> {args.out}")
    return EXIT_OK


def cmd_train_generator(args) -> int:
    seed = _require_seed(args)
    _validate_out(args.out)
    cfg = _merge_config(args, dict(_GENERATOR_DEFAULTS))
    pairs = read_pairs(args.pairs)
    use_bkg = not args.no_bkg
    if use_bkg and not args.retriever:
        raise ValidationError("--retriever is required unless --no-bkg is set")
    retriever = RetrieverModel.load(args.retriever) if use_bkg else None
    model = train_generator(
        pairs, retriever, cfg["n_kb"], _model_config_from(cfg),
        _train_config_from(cfg, seed), use_bkg=use_bkg,
    )
    model.save(args.out)
    write_manifest(args.out, "train-generator", {**cfg, "use_bkg": use_bkg},
                   [args.pairs] + ([args.retriever] if use_bkg else []), seed=seed)
    print(f"final loss {model.train_losses[-1]:.4f} over {cfg['epochs']} epochs -> {args.out}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    _validate_out(args.out)
    pairs = read_pairs(args.pairs)
    model = RetrieverModel.load(args.model)
    lines = []
    for pair in pairs:
        if not pair.kb.sentences:
            results = []
        else:
            results = retrieve_topn(model, pair, n=args.n_kb)
        lines.append(json.dumps({
            "pair_id": pair.id,
            "results": [{"sentence_id": r.sentence_id, "score": r.score} for r in results],
        }, ensure_ascii=False, separators=(",", ":")))
    atomic_write_bytes(args.out, ("\n".join(lines) + "\n").encode("utf-8"))
    write_manifest(args.out, "retrieve", {"n_kb": args.n_kb}, [args.pairs, args.model],
                   seed=args.seed)
    return EXIT_OK


def cmd_generate(args) -> int:
    seed = _require_seed(args)
    _validate_out(args.out)
    pairs = read_pairs(args.pairs)
    model = GeneratorModel.load(args.model)
    retriever = RetrieverModel.load(args.retriever) if args.retriever else None
    if model.use_bkg and retriever is None:
        raise ValidationError("--retriever is required for a knowledge-conditioned generator")
    gen_cfg = GenerationConfig(
        strategy="beam" if args.beam and args.beam > 1 else "greedy",
        beam_width=args.beam or 1,
        max_output_len=args.max_len or model.config.max_output_len,
    )
    results = generate_many(model, retriever, pairs, args.n_kb, gen_cfg, threads=args.threads or 1)
    lines = "".join(
        json.dumps(r.as_dict(), ensure_ascii=False, separators=(",", ":")) + "\n" for r in results
    )
    atomic_write_bytes(args.out, lines.encode("utf-8"))
    write_manifest(
        args.out, "generate",
        {"n_kb": args.n_kb, "beam": args.beam or 1, "max_len": gen_cfg.max_output_len},
        [args.pairs, args.model] + ([args.retriever] if args.retriever else []),
        seed=seed,
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pairs = read_pairs(args.pairs)
    outputs = {}
    with open(args.gen, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                obj = json.loads(line)
                outputs[obj["pair_id"]] = obj["output"]
    report = metrics_mod.score_outputs(outputs, pairs)
    body = json.dumps(report.as_dict(), indent=2) + "\n"
    if args.out:
        atomic_write_bytes(args.out, body.encode("utf-8"))
        write_manifest(args.out, "evaluate", {}, [args.gen, args.pairs], seed=args.seed)
    print(json.dumps({"bleu": report.bleu, "meteor": report.meteor,
                      "cell_recall": report.cell_recall, "n_pairs": report.n_pairs}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    import numpy as np

    from .nn import encoder_forward, decoder_forward, init_seq2seq_params, tied_logits
    from .nn import tensor as T

    seed = args.seed if args.seed is not None else 42
    worst = 0.0
    for kind, (n_enc, n_dec) in (("retriever", (1, 1)), ("generator", (2, 2))):
        cfg = ModelConfig(d_model=16, n_heads=4, n_layers_enc=n_enc, n_layers_dec=n_dec,
                          max_input_len=16, max_output_len=8, vocab_size=13)
        params = init_seq2seq_params(cfg, seed)
        rng = np.random.default_rng(seed)
        enc_ids = rng.integers(7, 13, size=(2, 6))
        enc_mask = np.array([[1] * 6, [1] * 4 + [0] * 2], dtype=bool)
        dec_ids = rng.integers(7, 13, size=(2, 4))
        targets = rng.integers(7, 13, size=(2, 4))
        dec_mask = np.ones((2, 4), dtype=bool)

        if kind == "retriever":
            def model_fn(params=params, cfg=cfg):
                enc = encoder_forward(params, cfg, enc_ids, enc_mask)
                pooled = T.masked_mean(enc, enc_mask, axis=1)
                memory = T.reshape(pooled, (2, 1, cfg.d_model))
                hidden = decoder_forward(params, cfg, dec_ids, memory, np.ones((2, 1), dtype=bool))
                return cross_entropy(tied_logits(params, hidden), targets, dec_mask)
        else:
            def model_fn(params=params, cfg=cfg):
                memory = encoder_forward(params, cfg, enc_ids, enc_mask)
                hidden = decoder_forward(params, cfg, dec_ids, memory, enc_mask)
                return cross_entropy(tied_logits(params, hidden), targets, dec_mask)

        err = gradient_check(model_fn, params, eps=1e-5, n_sample=16, seed=seed)
        print(f"{kind}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < 1e-4 else EXIT_RUNTIME


def cmd_agreement(args) -> int:
    from .service import AnnotationState, VerdictLog

    pairs = read_pairs(args.pairs)
    state = AnnotationState(pairs, VerdictLog(args.log))
    report = state.agreement(args.a, args.b)
    body = json.dumps({
        "n_samples": report.n_samples,
        "cell_agreement": report.cell_agreement,
        "kb_agreement": report.kb_agreement,
    }, indent=2) + "\n"
    if args.out:
        atomic_write_bytes(args.out, body.encode("utf-8"))
        write_manifest(args.out, "agreement", {"a": args.a, "b": args.b},
                       [args.pairs, args.log], seed=args.seed)
    print(body, end="")
    return EXIT_OK


def cmd_serve(args) -> int:
    server = build_server(
        args.pairs, args.log,
        bind_address=("127.0.0.1", args.port),
        static_dir=args.static,
    )
    host, port = server.server_address[:2]
    print(f"annotation service listening on http://{host}:{port}/")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="ctrltab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--config", type=str, default=None)

    p = sub.add_parser("build-corpus", help="build pairs JSONL from article XML and tables")
    p.add_argument("--xml", required=True, help="directory of article .xml files")
    p.add_argument("--tables", required=True, help="tables+descriptions JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--theta-overlap", dest="theta_overlap", type=float, default=None)
    p.add_argument("--theta-dup", dest="theta_dup", type=float, default=None)
    p.add_argument("--cap", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_stats)

    for name, fn in (("train-retriever", cmd_train_retriever), ("train-generator", cmd_train_generator)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on the train split")
        p.add_argument("--pairs", required=True)
        p.add_argument("--out", required=True)
        if name == "train-generator":
            p.add_argument("--retriever", default=None)
            p.add_argument("--no-bkg", dest="no_bkg", action="store_true")
            p.add_argument("--n-kb", dest="n_kb", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--d-model", dest="d_model", type=int, default=None)
        p.add_argument("--n-heads", dest="n_heads", type=int, default=None)
        p.add_argument("--max-len", dest="max_input_len", type=int, default=None)
        if name == "train-retriever":
            p.add_argument("--noise-ratio", dest="noise_ratio", type=float, default=None)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("retrieve", help="rank knowledge sentences per pair")
    p.add_argument("--pairs", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-kb", dest="n_kb", type=int, default=3)
    common(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("generate", help="decode descriptions for pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--retriever", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n-kb", dest="n_kb", type=int, default=3)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generations against references")
    p.add_argument("--gen", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("agreement", help="pairwise annotator agreement from a verdict log")
    p.add_argument("--pairs", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("serve", help="run the annotation verification service")
    p.add_argument("--pairs", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--port", type=int, default=8040)
    p.add_argument("--static", default=None, help="directory of built UI assets")
    common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def run(argv: list[str]) -> int:
    logging.basicConfig(level=os.environ.get("CTRLTAB_LOG", "WARNING"))
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except CtrltabError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run(sys.argv[1:]))
