"""Retrieval-augmented captioning and the continuous-refinement loop.

``caption`` maps each image vector into text space, retrieves the k
nearest stored captions, renders them into a prompt and asks the language
model for a new caption.  ``refine`` repeatedly samples captions for the
training images, keeps those scoring at least the current validation
average, adds them to the store and to the mapping's training pairs,
refits, and stops once the validation average stops improving.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import metrics
from .embedio import (
    PairRecord,
    PreprocessStats,
    apply_preprocess_matrix,
    fit_preprocess,
    stack,
)
from .errors import EmptyVocabularyError, MragError, ProviderError, ReferenceError
from .genclient import (
    CAPTION_TEMPERATURE,
    DEFAULT_MAX_TOKENS,
    SAMPLE_TEMPERATURE,
    GenerationRequest,
    Provider,
    _digest_seed,
    embed_text,
    generate_many,
)
from .mapping import MappingModel, apply_map, fit
from .store import ORIGINAL, SYNTHETIC, Hit, StoreEntry, VectorStore

logger = logging.getLogger(__name__)

S2D = "S2d"
D2S = "d2S"


@dataclass(frozen=True)
class PromptTemplate:
    prefix: str = "Show similar images: "
    suffix: str = " The image describes: "
    separator: str = "\n"
    ordering: str = D2S

    def __post_init__(self):
        if self.ordering not in (S2D, D2S):
            raise ValueError(f"ordering must be {S2D!r} or {D2S!r}, got {self.ordering!r}")


def _ordered(descriptions) -> list[tuple[str, float]]:
    items = [(h.caption, h.similarity) if isinstance(h, Hit) else (h[0], float(h[1]))
             for h in descriptions]
    # stable: equal similarities keep retrieval order
    return sorted(items, key=lambda x: -x[1])


def build_prompt(template: PromptTemplate, descriptions) -> str:
    """Render descriptions (Hits or (text, similarity) pairs) into the prompt.

    S2d lists the most similar first; d2S is the exact reverse.
    """
    items = _ordered(descriptions)
    if template.ordering == D2S:
        items.reverse()
    return template.prefix + template.separator.join(t for t, _ in items) + template.suffix


@dataclass(frozen=True)
class CaptionOutput:
    image_id: str
    generated: str
    retrieved: list[Hit]
    prompt: str

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "caption": self.generated,
                "retrieved": [{"text": h.caption, "score": h.similarity} for h in self.retrieved],
                "prompt": self.prompt}


class CaptionError(MragError):
    """Some images failed; ``outputs`` holds the successes in dataset order."""

    def __init__(self, outputs: list[CaptionOutput], failures: list[tuple[str, Exception]]):
        self.outputs = outputs
        self.failures = failures
        ids = ", ".join(i for i, _ in failures[:5])
        super().__init__(f"{len(failures)} image(s) failed: {ids}: {failures[0][1]}")


def unique_images(records: Sequence[PairRecord]) -> tuple[list[str], np.ndarray]:
    """Image ids in first-seen order and their stacked raw vectors."""
    seen: dict[str, np.ndarray] = {}
    for r in records:
        seen.setdefault(r.image_id, r.image_emb)
    ids = list(seen)
    if not ids:
        return [], np.zeros((0, 0))
    return ids, np.stack([seen[i] for i in ids]).astype(np.float64)


def references_by_image(records: Sequence[PairRecord]) -> dict[str, list[str]]:
    refs: dict[str, list[str]] = {}
    for r in records:
        refs.setdefault(r.image_id, []).append(r.caption)
    return refs


def map_queries(model: MappingModel, image_vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(image_vectors, dtype=np.float64)
    if model.stats is not None:
        v = apply_preprocess_matrix(v, model.stats, "image")
    return apply_map(model, v)


def retrieve(image_vectors, model: MappingModel, store: VectorStore, k: int) -> list[list[Hit]]:
    if len(image_vectors) == 0:
        return []
    idx, sims = store.top_k_batch(map_queries(model, image_vectors), k)
    return [store.hits(i, s) for i, s in zip(idx, sims)]


def caption(image_ids: Sequence[str], image_vectors, model: MappingModel, store: VectorStore,
            template: PromptTemplate, k: int, llm: Provider, *, seed: int = 0,
            temperature: float = CAPTION_TEMPERATURE, num_samples: int = 1,
            max_tokens: int = DEFAULT_MAX_TOKENS, workers: int = 1,
            _return_all: bool = False):
    """Retrieve, prompt and generate for a batch of images; outputs keep input order.

    Provider failures do not stop the batch; they are collected and raised
    together as :class:`CaptionError` at the end.
    """
    if len(store) == 0:
        raise ValueError("caption needs a non-empty store")
    if k < 1:
        raise ValueError("k must be >= 1")
    retrieved = retrieve(image_vectors, model, store, k)
    prompts = [build_prompt(template, hits) for hits in retrieved]
    requests = [GenerationRequest(p, max_tokens, temperature, _digest_seed(seed, i) % 2 ** 31,
                                  num_samples)
                for p, i in zip(prompts, image_ids)]
    responses = generate_many(llm, requests, workers=workers, on_error="return")

    outputs, failures, samples = [], [], []
    for image_id, hits, prompt, resp in zip(image_ids, retrieved, prompts, responses):
        if isinstance(resp, Exception):
            failures.append((image_id, resp))
            continue
        outputs.append(CaptionOutput(image_id, resp.texts[0].strip(), hits, prompt))
        samples.append(resp.texts)
    if failures:
        raise CaptionError(outputs, failures)
    return (outputs, samples) if _return_all else outputs


# -- evaluation --------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    metric: str
    tau_bar: float
    stderr: float
    per_item: list[float]


def evaluate(outputs: Sequence[CaptionOutput], references: Mapping[str, Sequence[str]],
             metric: str = "cider_d") -> EvalResult:
    if not outputs:
        raise ReferenceError("nothing to evaluate")
    missing = [o.image_id for o in outputs if not references.get(o.image_id)]
    if missing:
        raise ReferenceError(f"no references for {missing[:5]}")
    ref_toks = {o.image_id: [metrics.tokenize(r) for r in references[o.image_id]]
                for o in outputs}
    stats = metrics.CorpusStats.build(ref_toks.values()) if metric == "cider_d" else None
    scores = [metrics.score(metric, metrics.tokenize(o.generated), ref_toks[o.image_id], stats)
              for o in outputs]
    mean, err = metrics.mean_stderr(scores)
    return EvalResult(metric, mean, err, scores)


def evaluate_all(outputs: Sequence[CaptionOutput], references: Mapping[str, Sequence[str]],
                 names: Sequence[str] = metrics.TEXT_METRICS) -> dict[str, dict]:
    """Mean and stderr per metric; BLEU also reports its corpus-level value."""
    report = {}
    for name in names:
        res = evaluate(outputs, references, name)
        report[name] = {"mean": res.tau_bar, "stderr": res.stderr}
        if name.startswith("bleu@"):
            cands = [metrics.tokenize(o.generated) for o in outputs]
            refs = [[metrics.tokenize(r) for r in references[o.image_id]] for o in outputs]
            report[name]["corpus"] = metrics.corpus_bleu(cands, refs, int(name[5:]))
    return report


# -- the engine: stats + mapping + store built from original and synthetic pairs

@dataclass(frozen=True)
class Synthetic:
    iteration: int
    image_id: str
    caption: str
    score: float
    text_emb: np.ndarray  # raw provider output


@dataclass(frozen=True)
class System:
    stats: PreprocessStats
    model: MappingModel
    store: VectorStore


def build_system(train: Sequence[PairRecord], method: str = "ols", lam: float = 0.0,
                 center: bool = True, normalize: bool = True,
                 synthetic: Sequence[Synthetic] = (), base_stats: PreprocessStats | None = None,
                 refit_stats: bool = False) -> System:
    """Fit preprocessing and mapping, and build the store.

    Synthetic captions pair the raw vector of their source image with their
    own text vector.  Preprocessing statistics come from ``train`` alone
    unless ``refit_stats`` is set.
    """
    image_raw = stack(train, "image")
    text_raw = stack(train, "text")
    if synthetic:
        img_of = {r.image_id: r.image_emb for r in train}
        image_raw = np.concatenate([image_raw, np.stack([img_of[s.image_id] for s in synthetic])])
        text_raw = np.concatenate([text_raw, np.stack([s.text_emb for s in synthetic])])
    if refit_stats:
        stats = PreprocessStats(image_raw.mean(axis=0), text_raw.mean(axis=0), center, normalize)
    else:
        stats = base_stats or fit_preprocess(train, center, normalize)
    v = apply_preprocess_matrix(image_raw, stats, "image")
    e = apply_preprocess_matrix(text_raw, stats, "text")
    model = fit((v, e), method, lam, stats=stats)
    entries = [StoreEntry(e[t], r.caption, ORIGINAL, None, r.image_id)
               for t, r in enumerate(train)]
    off = len(train)
    entries += [StoreEntry(e[off + t], s.caption, SYNTHETIC, s.iteration, s.image_id)
                for t, s in enumerate(synthetic)]
    return System(stats, model, VectorStore.build(entries, dim=v.shape[1]))


# -- refinement --------------------------------------------------------------

@dataclass
class RefineConfig:
    metric: str = "cider_d"
    k: int = 4
    max_iters: int = 3
    num_samples: int = 5
    method: str = "ols"
    lam: float = 0.0
    center: bool = True
    normalize: bool = True
    refit_stats: bool = False
    template: PromptTemplate = field(default_factory=PromptTemplate)
    seed: int = 0
    temperature: float = SAMPLE_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    tol: float = 1e-4
    workers: int = 1

    def __post_init__(self):
        if self.metric not in metrics.TEXT_METRICS:
            raise ValueError(f"refinement metric must be one of {metrics.TEXT_METRICS}")
        if not 1 <= self.k <= 10:
            raise ValueError("k must be in 1..10")
        if self.max_iters < 0 or self.num_samples < 1:
            raise ValueError("max_iters must be >= 0 and num_samples >= 1")


@dataclass
class RefinementState:
    metric: str
    iteration: int = 0
    tau_bar_history: list[float] = field(default_factory=list)
    store_sizes: list[int] = field(default_factory=list)
    accepted: list[dict] = field(default_factory=list)
    stopped: bool = False
    stop_reason: str = ""

    def to_json(self) -> dict:
        return asdict(self)


class RefinementAborted(MragError):
    def __init__(self, state: RefinementState, cause: Exception):
        self.state = state
        super().__init__(f"refinement aborted in iteration {state.iteration + 1}: {cause}")


def _config_fingerprint(cfg: RefineConfig) -> dict:
    d = asdict(cfg)
    d.pop("max_iters")
    d.pop("workers")
    return d


def _write_checkpoint(directory: Path, state: RefinementState,
                      synthetic: Sequence[Synthetic], cfg: RefineConfig) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    body = {
        "config": _config_fingerprint(cfg),
        "state": state.to_json(),
        "synthetic": [{"iteration": s.iteration, "image_id": s.image_id, "caption": s.caption,
                       "score": s.score, "text_emb": [float(x) for x in s.text_emb]}
                      for s in synthetic],
    }
    path = directory / f"iter{state.iteration}.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def latest_checkpoint(directory) -> Path | None:
    directory = Path(directory)
    found = []
    for p in directory.glob("iter*.json"):
        tail = p.stem[4:]
        if tail.isdigit():
            found.append((int(tail), p))
    return max(found)[1] if found else None


def load_checkpoint(path) -> tuple[RefinementState, list[Synthetic], dict]:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    state = RefinementState(**body["state"])
    synthetic = [Synthetic(s["iteration"], s["image_id"], s["caption"], s["score"],
                           np.asarray(s["text_emb"], dtype=np.float64))
                 for s in body["synthetic"]]
    return state, synthetic, body["config"]


def _validation_tau(system: System, val_ids, val_vecs, val_refs, llm: Provider,
                    cfg: RefineConfig) -> float:
    outs = caption(val_ids, val_vecs, system.model, system.store, cfg.template, cfg.k, llm,
                   seed=cfg.seed, max_tokens=cfg.max_tokens, workers=cfg.workers)
    return evaluate(outs, val_refs, cfg.metric).tau_bar


def refine(train: Sequence[PairRecord], val: Sequence[PairRecord], llm: Provider,
           embedder: Provider, config: RefineConfig | None = None, *,
           checkpoint_dir=None, resume: bool = False) -> RefinementState:
    cfg = config or RefineConfig()
    if not train or not val:
        raise ReferenceError("refinement needs non-empty training and validation sets")
    dim = train[0].image_emb.shape[0]
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    train_ids, train_vecs = unique_images(train)
    train_refs = {i: [metrics.tokenize(c) for c in caps]
                  for i, caps in references_by_image(train).items()}
    train_stats = metrics.CorpusStats.build(train_refs.values()) if cfg.metric == "cider_d" \
        else None
    val_ids, val_vecs = unique_images(val)
    val_refs = references_by_image(val)
    base_stats = fit_preprocess(train, cfg.center, cfg.normalize)

    def assemble(synth):
        return build_system(train, cfg.method, cfg.lam, cfg.center, cfg.normalize, synth,
                            base_stats, cfg.refit_stats)

    state = RefinementState(cfg.metric)
    synthetic: list[Synthetic] = []
    if resume and ckpt_dir is not None and (path := latest_checkpoint(ckpt_dir)) is not None:
        state, synthetic, saved_cfg = load_checkpoint(path)
        if saved_cfg != json.loads(json.dumps(_config_fingerprint(cfg))):
            raise ValueError(f"{path}: checkpoint was written with a different configuration")
        logger.info("resuming from %s (iteration %d)", path, state.iteration)

    system = assemble(synthetic)
    if not state.tau_bar_history:
        try:
            tau = _validation_tau(system, val_ids, val_vecs, val_refs, llm, cfg)
        except (ProviderError, CaptionError) as exc:
            raise RefinementAborted(state, exc) from exc
        state.tau_bar_history.append(tau)
        state.store_sizes.append(len(system.store))
        if ckpt_dir is not None:
            _write_checkpoint(ckpt_dir, state, synthetic, cfg)

    seen = {" ".join(metrics.tokenize(s.caption)) for s in synthetic}
    while not state.stopped and state.iteration < cfg.max_iters:
        it = state.iteration + 1
        tau_prev = state.tau_bar_history[-1]
        try:
            _, samples = caption(
                train_ids, train_vecs, system.model, system.store, cfg.template, cfg.k, llm,
                seed=_digest_seed(cfg.seed, "iter", it), temperature=cfg.temperature,
                num_samples=cfg.num_samples, max_tokens=cfg.max_tokens, workers=cfg.workers,
                _return_all=True)
            kept: list[tuple[str, str, float]] = []
            new_seen = set(seen)
            for image_id, texts in zip(train_ids, samples):
                for text in texts:
                    toks = metrics.tokenize(text)
                    if not toks:
                        continue
                    s = metrics.score(cfg.metric, toks, train_refs[image_id], train_stats)
                    key = " ".join(toks)
                    # keep if not below the previous validation mean; zero never qualifies
                    if s >= tau_prev and s > 0.0 and key not in new_seen:
                        new_seen.add(key)
                        kept.append((image_id, text.strip(), s))
            if kept:
                vecs = embed_text(embedder, [c for _, c, _ in kept], dim)
                new_synth = synthetic + [Synthetic(it, i, c, s, vecs[t])
                                         for t, (i, c, s) in enumerate(kept)]
                new_system = assemble(new_synth)
                tau_new = _validation_tau(new_system, val_ids, val_vecs, val_refs, llm, cfg)
            else:
                new_synth, new_system, tau_new = synthetic, system, tau_prev
        except (ProviderError, CaptionError) as exc:
            raise RefinementAborted(state, exc) from exc

        # commit the iteration
        synthetic, system, seen = new_synth, new_system, new_seen
        state.iteration = it
        state.tau_bar_history.append(tau_new)
        state.store_sizes.append(len(system.store))
        state.accepted.extend({"iteration": it, "image_id": i, "caption": c, "score": s}
                              for i, c, s in kept)
        if tau_new <= tau_prev + cfg.tol:
            state.stopped = True
            state.stop_reason = "no improvement" if kept else "no samples accepted"
        elif it >= cfg.max_iters:
            state.stop_reason = "max_iters"
        logger.info("iteration %d: accepted %d, tau %.6f -> %.6f", it, len(kept), tau_prev,
                    tau_new)
        if ckpt_dir is not None:
            _write_checkpoint(ckpt_dir, state, synthetic, cfg)
    if not state.stop_reason and state.iteration >= cfg.max_iters:
        state.stop_reason = "max_iters"
    return state


def refine_system(train: Sequence[PairRecord], state_synthetic: Sequence[Synthetic],
                  cfg: RefineConfig) -> System:
    """Rebuild the final model and store from a checkpoint's synthetic list."""
    return build_system(train, cfg.method, cfg.lam, cfg.center, cfg.normalize, state_synthetic,
                        None if cfg.refit_stats else fit_preprocess(train, cfg.center,
                                                                    cfg.normalize),
                        cfg.refit_stats)


# -- diagnostics -------------------------------------------------------------

def rank_tokens(model: MappingModel, vocab: Sequence[tuple[str, np.ndarray]], image_emb,
                references: Sequence[str], cutoff: int = 10) -> float:
    """nDCG of the vocabulary ranked by cosine to the mapped image vector.

    A token is relevant when it occurs in any reference caption.
    """
    if not vocab:
        raise EmptyVocabularyError("token vocabulary is empty")
    tokens = [t for t, _ in vocab]
    tstore = VectorStore.build([StoreEntry(np.asarray(e, dtype=np.float64), t)
                                for t, e in vocab])
    query = map_queries(model, np.asarray(image_emb, dtype=np.float64)[None, :])[0]
    ranked = [h.caption for h in tstore.top_k(query, len(tokens))]
    in_refs = {tok for r in references for tok in metrics.tokenize(r)}
    return metrics.ndcg(ranked, in_refs & set(tokens), cutoff)


def cross_modal_recall(image_vectors, text_vectors, model: MappingModel | None = None) -> float:
    """Recall@1 of retrieving row i of ``text_vectors`` from row i of ``image_vectors``."""
    e = np.asarray(text_vectors, dtype=np.float64)
    store = VectorStore.build([StoreEntry(row, str(t)) for t, row in enumerate(e)])
    q = np.asarray(image_vectors, dtype=np.float64)
    if model is not None:
        q = apply_map(model, q)
    idx, _ = store.top_k_batch(q, 1)
    return float(np.mean(idx[:, 0] == np.arange(len(e))))


def with_ordering(template: PromptTemplate, ordering: str) -> PromptTemplate:
    return replace(template, ordering=ordering)
