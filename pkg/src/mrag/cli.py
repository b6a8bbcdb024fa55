"""Command-line entry point: ``mrag <command> [options]``.

Settings resolve as command-line flags > environment > ``--config`` TOML
file > built-in defaults.  Exit codes: 0 success, 2 usage/config/unreadable
input, 3 data error, 4 provider error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__, embedio, fixtures, mapping, metrics, pipeline
from .errors import ConfigError, DataError, FormatError, MragError, ProviderError
from .genclient import ProviderConfig, PromptShape, embed_text, make_embedder, make_llm

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("mrag")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER = 0, 2, 3, 4


@dataclass
class RunConfig:
    dataset: str | None = None
    splits: str | None = None
    map: str | None = None
    center: bool = True
    normalize: bool = True
    method: str = "ols"
    lam: float = 0.0
    k: int = 4
    prefix: str = "Show similar images: "
    suffix: str = " The image describes: "
    separator: str = "\n"
    ordering: str = pipeline.D2S
    metric: str = "cider_d"
    max_iters: int = 3
    num_samples: int = 5
    refit_stats: bool = False
    cutoff: int = 10
    endpoint: str = "http://127.0.0.1:8000"
    timeout: float = 30.0
    max_retries: int = 2
    max_in_flight: int = 4
    offline: bool = False
    seed: int = 0
    threads: int = 1

    def validate(self) -> "RunConfig":
        if self.method not in mapping.METHODS:
            raise ConfigError(f"method must be one of {mapping.METHODS}")
        if not isinstance(self.lam, (int, float)) or self.lam < 0:
            raise ConfigError(f"lambda must be a non-negative number, got {self.lam}")
        if self.method == "ridge" and self.lam <= 0:
            raise ConfigError("ridge needs lambda > 0")
        if not 1 <= self.k <= 10:
            raise ConfigError("k must be in 1..10")
        if self.ordering not in (pipeline.S2D, pipeline.D2S):
            raise ConfigError(f"ordering must be {pipeline.S2D} or {pipeline.D2S}")
        if self.metric not in metrics.TEXT_METRICS:
            raise ConfigError(f"metric must be one of {metrics.TEXT_METRICS}")
        if self.max_iters < 0 or self.num_samples < 1 or self.cutoff < 1:
            raise ConfigError("max_iters >= 0, num_samples >= 1 and cutoff >= 1 are required")
        if self.threads < 1 or self.max_in_flight < 1 or self.timeout <= 0:
            raise ConfigError("threads and max_in_flight must be >= 1, timeout > 0")
        return self

    @property
    def template(self) -> pipeline.PromptTemplate:
        return pipeline.PromptTemplate(self.prefix, self.suffix, self.separator, self.ordering)

    @property
    def provider(self) -> ProviderConfig:
        return ProviderConfig(self.endpoint, self.timeout, self.max_retries, self.max_in_flight)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_FLAG_ALIASES = {"lambda": "lam"}


def _coerce(name: str, value):
    want = _FIELDS[name].type
    if "bool" in want and not isinstance(value, bool):
        raise ConfigError(f"{name} must be a boolean")
    if "int" in want and "float" not in want and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{name} must be an integer")
    if "float" in want and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{name} must be a number")
    if want.startswith("str") and value is not None and not isinstance(value, str):
        raise ConfigError(f"{name} must be a string")
    return value


def load_config(path, flags: dict) -> RunConfig:
    values: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for key, value in raw.items():
            name = _FLAG_ALIASES.get(key, key).replace("-", "_")
            if name not in _FIELDS:
                raise ConfigError(f"{path}: unknown key {key!r}")
            values[name] = _coerce(name, value)
    if os.environ.get("MRAG_ENDPOINT"):
        values["endpoint"] = os.environ["MRAG_ENDPOINT"]
    if os.environ.get("MRAG_OFFLINE", "") in ("1", "true", "yes"):
        values["offline"] = True
    values.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig(**values).validate()


# -- data helpers ------------------------------------------------------------

def _load(cfg: RunConfig):
    if not cfg.dataset:
        raise ConfigError("--dataset is required")
    records = embedio.load_dataset(cfg.dataset)
    if not cfg.splits:
        return {"train": records, "val": records, "test": records, "all": records}
    try:
        raw = json.loads(Path(cfg.splits).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{cfg.splits}: {exc}") from None
    if not isinstance(raw, dict):
        raise FormatError(f"{cfg.splits}: expected an object of split name -> index list")
    out = {"all": records}
    for name, idx in raw.items():
        if not isinstance(idx, list) or not all(isinstance(i, int) and 0 <= i < len(records)
                                                for i in idx):
            raise FormatError(f"{cfg.splits}: split {name!r} must list record indices")
        out[name] = [records[i] for i in idx]
    for name in ("train", "val", "test"):
        out.setdefault(name, [])
    return out


def _model(cfg: RunConfig, train) -> mapping.MappingModel:
    if cfg.map:
        return mapping.load_model(cfg.map)
    return pipeline.build_system(train, cfg.method, cfg.lam, cfg.center, cfg.normalize).model


def _system(cfg: RunConfig, train) -> pipeline.System:
    system = pipeline.build_system(train, cfg.method, cfg.lam, cfg.center, cfg.normalize)
    if cfg.map:
        model = mapping.load_model(cfg.map)
        if model.dim != system.model.dim:
            raise DataError(f"map has d={model.dim}, dataset has d={system.model.dim}")
        system = dataclasses.replace(system, model=model)
    return system


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _llm(cfg: RunConfig):
    shape = PromptShape(cfg.prefix, cfg.suffix, cfg.separator)
    return make_llm(cfg.provider, cfg.offline, cfg.seed, shape)


def _embedder(cfg: RunConfig, dim: int):
    # the offline embedder's seed is fixed so it matches fixture text vectors
    return make_embedder(cfg.provider, dim, cfg.offline)


# -- commands ----------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, args) -> int:
    records = embedio.load_dataset(cfg.dataset) if cfg.dataset else None
    if records is None:
        raise ConfigError("--dataset is required")
    dim = records[0].image_emb.shape[0] if records else _manifest_dim(cfg.dataset)
    _emit({"n": len(records), "d": int(dim),
           "images": len({r.image_id for r in records}),
           "checksum": embedio.dataset_checksum(records)}, args.out)
    return EXIT_OK


def _manifest_dim(path) -> int:
    with open(path, encoding="utf-8") as fh:
        return int(json.loads(fh.readline())["dim"])


def cmd_fit_map(cfg: RunConfig, args) -> int:
    data = _load(cfg)
    train = data["train"]
    if not train:
        raise DataError("training split is empty")
    system = pipeline.build_system(train, cfg.method, cfg.lam, cfg.center, cfg.normalize)
    model = system.model
    v = embedio.apply_preprocess_matrix(embedio.stack(train, "image"), system.stats, "image")
    e = embedio.apply_preprocess_matrix(embedio.stack(train, "text"), system.stats, "text")
    mapping.save_model(args.out, model)
    report = {"method": model.method, "lambda": model.lam, "d": model.dim,
              "n_pairs": len(train), "n_params": model.n_params,
              "residual": mapping.residual(model, (v, e)), "out": str(args.out)}
    if model.method == "procrustes":
        err = mapping.orthogonality_error(model)
        report["orthogonality_error"] = err
        report["orthogonal"] = err <= 1e-5
    _emit(report)
    return EXIT_OK


def cmd_retrieve(cfg: RunConfig, args) -> int:
    data = _load(cfg)
    system = _system(cfg, data["train"])
    queries = data[args.split]
    ids, vecs = pipeline.unique_images(queries)
    hits = pipeline.retrieve(vecs, system.model, system.store, cfg.k)
    _write_jsonl(args.out, ({"image_id": i, "retrieved": [
        {"text": h.caption, "score": h.similarity, "index": h.index} for h in hs]}
        for i, hs in zip(ids, hits)))
    if args.store_out:
        system.store.save(args.store_out)
    _emit({"queries": len(ids), "k": cfg.k, "store_size": len(system.store), "out": args.out})
    return EXIT_OK


def cmd_caption(cfg: RunConfig, args) -> int:
    data = _load(cfg)
    system = _system(cfg, data["train"])
    ids, vecs = pipeline.unique_images(data[args.split])
    if not ids:
        raise DataError(f"split {args.split!r} is empty")
    llm = _llm(cfg)
    try:
        outputs = pipeline.caption(ids, vecs, system.model, system.store, cfg.template, cfg.k,
                                   llm, seed=cfg.seed, workers=cfg.threads)
    except pipeline.CaptionError as exc:
        _write_jsonl(args.out, (o.to_json() for o in exc.outputs))
        raise
    _write_jsonl(args.out, (o.to_json() for o in outputs))
    _emit({"captions": len(outputs), "out": args.out})
    return EXIT_OK


def cmd_refine(cfg: RunConfig, args) -> int:
    if cfg.map:
        raise ConfigError("refine fits its own mapping; --map is not supported here")
    data = _load(cfg)
    train, val = data["train"], data["val"]
    if not train or not val:
        raise DataError("refine needs non-empty train and val splits")
    dim = train[0].image_emb.shape[0]
    rc = pipeline.RefineConfig(
        metric=cfg.metric, k=cfg.k, max_iters=cfg.max_iters, num_samples=cfg.num_samples,
        method=cfg.method, lam=cfg.lam, center=cfg.center, normalize=cfg.normalize,
        refit_stats=cfg.refit_stats, template=cfg.template, seed=cfg.seed, workers=cfg.threads)
    state = pipeline.refine(train, val, _llm(cfg), _embedder(cfg, dim), rc,
                            checkpoint_dir=args.checkpoint_dir, resume=args.resume)
    ckpt = pipeline.latest_checkpoint(args.checkpoint_dir)
    if ckpt is not None:
        _, synthetic, _ = pipeline.load_checkpoint(ckpt)
        final = pipeline.refine_system(train, synthetic, rc)
        mapping.save_model(Path(args.checkpoint_dir) / "final.map", final.model)
        final.store.save(Path(args.checkpoint_dir) / "final_store")
    _emit(state.to_json() | {"checkpoint_dir": args.checkpoint_dir}, args.out)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    data = _load(cfg)
    records = data["all"]
    refs = pipeline.references_by_image(records)
    with open(args.captions, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    outputs = [pipeline.CaptionOutput(r["image_id"], r["caption"], [], r.get("prompt", ""))
               for r in rows]
    report = pipeline.evaluate_all(outputs, refs)
    report["spice"] = "n/a"
    if args.clip:
        dim = records[0].image_emb.shape[0]
        cand = embed_text(_embedder(cfg, dim), [o.generated for o in outputs], dim)
        img = {r.image_id: r.image_emb for r in records}
        ref_embs = {}
        for r in records:
            ref_embs.setdefault(r.image_id, []).append(r.text_emb)
        pairs = [metrics.clip_scores(img[o.image_id], cand[t], ref_embs[o.image_id])
                 for t, o in enumerate(outputs)]
        for name, col in (("clip_score", 0), ("ref_clip", 1)):
            m, s = metrics.mean_stderr([p[col] for p in pairs])
            report[name] = {"mean": m, "stderr": s}
    _emit(report, args.out)
    return EXIT_OK


def cmd_rank_tokens(cfg: RunConfig, args) -> int:
    data = _load(cfg)
    train, test = data["train"], data[args.split]
    model = _model(cfg, train)
    vocab = sorted({t for r in train for t in metrics.tokenize(r.caption)})
    if not vocab:
        raise DataError("training captions have no tokens")
    raw = embed_text(_embedder(cfg, model.dim), vocab, model.dim)
    if model.stats is not None:
        raw = embedio.apply_preprocess_matrix(raw, model.stats, "text")
    pairs = list(zip(vocab, raw))
    refs = pipeline.references_by_image(test)
    ids, vecs = pipeline.unique_images(test)
    scores = [pipeline.rank_tokens(model, pairs, v, refs[i], cfg.cutoff) for i, v in zip(ids, vecs)]
    if not scores:
        raise DataError(f"split {args.split!r} is empty")
    m, s = metrics.mean_stderr(scores)
    _emit({"ndcg": {"mean": m, "stderr": s}, "cutoff": cfg.cutoff, "images": len(ids),
           "vocab": len(vocab)}, args.out)
    return EXIT_OK


def cmd_make_fixture(cfg: RunConfig, args) -> int:
    records = fixtures.caption_dataset(args.images, args.captions_per_image, args.dim,
                                       seed=cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    embedio.write_dataset(out, records, args.dim)
    splits = fixtures.split_indices(records)
    split_path = out.with_name(out.name.replace(".jsonl", "") + ".splits.json")
    split_path.write_text(json.dumps(splits) + "\n", encoding="utf-8")
    _emit({"dataset": str(out), "splits": str(split_path), "n": len(records), "d": args.dim})
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def _bool_flag(p, name: str, dest: str, help_on: str):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_on)
    g.add_argument(f"--no-{name}", dest=dest, action="store_false", default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--offline", action="store_true", default=None,
                        help="use deterministic mock providers")
    common.add_argument("--threads", type=int, help="concurrent generation requests")
    common.add_argument("--endpoint")
    common.add_argument("--dataset", help="dataset manifest (.jsonl)")
    common.add_argument("--splits", help="JSON {train,val,test: [record indices]}")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--out")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--method", choices=mapping.METHODS)
    model_opts.add_argument("--lambda", dest="lam", type=float)
    model_opts.add_argument("--map", help="saved .map model; fitted on the fly if omitted")
    _bool_flag(model_opts, "center", "center", "mean-center embeddings")
    _bool_flag(model_opts, "normalize", "normalize", "scale embeddings to unit length")

    prompt_opts = argparse.ArgumentParser(add_help=False)
    prompt_opts.add_argument("--k", type=int)
    prompt_opts.add_argument("--ordering", choices=(pipeline.S2D, pipeline.D2S))
    prompt_opts.add_argument("--split", default="test")

    parser = argparse.ArgumentParser(prog="mrag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate a dataset and summarise it")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit-map", parents=[common, model_opts], help="fit and save the mapping")
    p.set_defaults(func=cmd_fit_map)

    p = sub.add_parser("retrieve", parents=[common, model_opts, prompt_opts],
                       help="top-k caption retrieval for images")
    p.add_argument("--store-out", help="write a store snapshot to this prefix")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("caption", parents=[common, model_opts, prompt_opts],
                       help="retrieval-augmented caption generation")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("refine", parents=[common, model_opts, prompt_opts],
                       help="continuous refinement loop")
    p.add_argument("--metric", choices=metrics.TEXT_METRICS)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--num-samples", dest="num_samples", type=int)
    _bool_flag(p, "refit-stats", "refit_stats", "refit preprocessing after augmentation")
    p.add_argument("--checkpoint-dir", default="checkpoints")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="score a captions JSONL file")
    p.add_argument("--captions", required=True)
    p.add_argument("--clip", action="store_true", help="also report CLIP-score / RefCLIP")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rank-tokens", parents=[common, model_opts], help="token-ranking nDCG")
    p.add_argument("--cutoff", type=int)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_rank_tokens)

    p = sub.add_parser("make-fixture", parents=[common], help="write a synthetic dataset")
    p.add_argument("--images", type=int, default=20)
    p.add_argument("--captions-per-image", type=int, default=2)
    p.add_argument("--dim", type=int, default=8)
    p.set_defaults(func=cmd_make_fixture)
    return parser


_CONFIG_FLAGS = set(_FIELDS)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k in _CONFIG_FLAGS}
    try:
        cfg = load_config(args.config, flags)
        if args.command == "make-fixture" and not args.out:
            raise ConfigError("--out is required")
        if args.command in ("fit-map", "retrieve", "caption") and not args.out:
            raise ConfigError("--out is required")
        if getattr(args, "split", None) and args.split not in ("train", "val", "test", "all"):
            raise ConfigError("--split must be train, val, test or all")
        return args.func(cfg, args)
    except (ConfigError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProviderError, pipeline.CaptionError, pipeline.RefinementAborted) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (DataError, MragError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
