import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mocks import FailAfter, Regurgitate
from mrag import fixtures, metrics, pipeline
from mrag.errors import EmptyVocabularyError, ReferenceError
from mrag.genclient import EchoLLM, HashEmbedder, JunkLLM, ShuffleLLM
from mrag.mapping import MappingModel, fit_ols
from mrag.pipeline import (
    D2S,
    S2D,
    CaptionOutput,
    PromptTemplate,
    RefineConfig,
    build_prompt,
    build_system,
    evaluate,
    refine,
)
from mrag.store import StoreEntry, VectorStore


def split(records, fractions=(0.6, 0.4, 0.0)):
    sp = fixtures.split_indices(records, fractions)
    return {k: [records[i] for i in v] for k, v in sp.items()}


@pytest.fixture(scope="module")
def single_ref():
    return split(fixtures.caption_dataset(n_images=30, captions_per_image=1, dim=8, seed=3))


@pytest.fixture(scope="module")
def multi_ref():
    return split(fixtures.caption_dataset(n_images=30, captions_per_image=2, dim=8, seed=4))


# -- prompts -----------------------------------------------------------------

def test_prompt_s2d_example():
    t = PromptTemplate(ordering=S2D)
    assert build_prompt(t, [("a cat", 0.9), ("a dog", 0.8)]) == \
        "Show similar images: a cat\na dog The image describes: "


def test_prompt_d2s_reverses():
    t = PromptTemplate(ordering=D2S)
    assert build_prompt(t, [("a cat", 0.9), ("a dog", 0.8)]) == \
        "Show similar images: a dog\na cat The image describes: "


def test_prompt_sorts_and_keeps_ties_stable():
    t = PromptTemplate(ordering=S2D)
    got = build_prompt(t, [("b", 0.5), ("a", 0.9), ("c", 0.5)])
    assert got == t.prefix + "a\nb\nc" + t.suffix


def test_prompt_empty():
    t = PromptTemplate()
    assert build_prompt(t, []) == t.prefix + t.suffix


def test_bad_ordering():
    with pytest.raises(ValueError):
        PromptTemplate(ordering="random")


@given(st.lists(st.tuples(st.text("abc ", min_size=1, max_size=6),
                          st.floats(-1, 1, allow_nan=False)), max_size=8))
def test_orderings_are_exact_reverses(desc):
    s2d = PromptTemplate(ordering=S2D)
    d2s = PromptTemplate(ordering=D2S)
    # single-line descriptions so the separator splits unambiguously
    a = build_prompt(s2d, desc)[len(s2d.prefix):-len(s2d.suffix)]
    b = build_prompt(d2s, desc)[len(d2s.prefix):-len(d2s.suffix)]
    if desc:
        assert a.split("\n") == b.split("\n")[::-1]
        assert Counter(a.split("\n")) == Counter(t for t, _ in desc)
    else:
        assert a == b == ""


# -- captioning --------------------------------------------------------------

def identity_setup(d=4):
    eye = np.eye(d)
    entries = [StoreEntry(eye[i], f"caption {i}") for i in range(d)]
    model = MappingModel(np.eye(d), "ols", 0.0)
    return model, VectorStore.build(entries)


def test_caption_identity_composition():
    model, store = identity_setup()
    q = np.array([[0.1, 0.9, 0.2, 0.0]])
    out = pipeline.caption(["x"], q, model, store, PromptTemplate(ordering=S2D), 2, EchoLLM())
    assert len(out) == 1
    o = out[0]
    assert [h.caption for h in o.retrieved] == ["caption 1", "caption 2"]
    assert o.prompt == "Show similar images: caption 1\ncaption 2 The image describes: "
    assert o.generated == "caption 1"
    sims = [h.similarity for h in o.retrieved]
    assert sims == sorted(sims, reverse=True)


def test_caption_json_shape():
    model, store = identity_setup()
    o = pipeline.caption(["x"], np.ones((1, 4)), model, store, PromptTemplate(), 1,
                         EchoLLM())[0]
    body = o.to_json()
    assert set(body) == {"image_id", "caption", "retrieved", "prompt"}
    assert set(body["retrieved"][0]) == {"text", "score"}
    json.dumps(body)


def test_caption_deterministic_across_workers(multi_ref):
    sysm = build_system(multi_ref["train"])
    ids, vecs = pipeline.unique_images(multi_ref["val"])
    runs = []
    for workers in (1, 4):
        for _ in range(2):
            out = pipeline.caption(ids, vecs, sysm.model, sysm.store, PromptTemplate(), 4,
                                   ShuffleLLM(), seed=7, temperature=0.9, workers=workers)
            runs.append([json.dumps(o.to_json(), sort_keys=True) for o in out])
    assert all(r == runs[0] for r in runs)


def test_caption_rejects_empty_store():
    model, _ = identity_setup()
    empty = VectorStore.build([], dim=4)
    with pytest.raises(ValueError):
        pipeline.caption(["x"], np.ones((1, 4)), model, empty, PromptTemplate(), 1, EchoLLM())


def test_caption_collects_failures():
    model, store = identity_setup()
    llm = FailAfter(EchoLLM(), 1)
    with pytest.raises(pipeline.CaptionError) as info:
        pipeline.caption(["a", "b"], np.ones((2, 4)), model, store, PromptTemplate(), 1, llm)
    assert len(info.value.outputs) == 1 and len(info.value.failures) == 1


# -- evaluation --------------------------------------------------------------

def outputs_for(pairs):
    return [CaptionOutput(i, c, [], "") for i, c in pairs]


def test_evaluate_identity_bleu():
    refs = {"a": ["a red bus in the street"], "b": ["two dogs run on the beach"]}
    res = evaluate(outputs_for([(i, r[0]) for i, r in refs.items()]), refs, "bleu@4")
    assert res.tau_bar == 1.0 and res.stderr == 0.0


def test_evaluate_mean_stderr():
    mean, err = metrics.mean_stderr([0.2, 0.4])
    assert mean == pytest.approx(0.3, abs=1e-12)
    assert err == pytest.approx(0.1, abs=1e-12)


def test_evaluate_errors():
    with pytest.raises(ReferenceError):
        evaluate([], {}, "bleu@4")
    with pytest.raises(ReferenceError):
        evaluate(outputs_for([("a", "x y")]), {"a": []}, "bleu@4")


def test_evaluate_all_reports_corpus_bleu():
    refs = {"a": ["a red bus in the street"], "b": ["a cat on the sofa"]}
    rep = pipeline.evaluate_all(outputs_for([(i, r[0]) for i, r in refs.items()]), refs)
    assert rep["bleu@1"]["corpus"] == 1.0
    assert rep["cider_d"]["mean"] == 10.0


def test_cider_short_captions_lose_missing_orders():
    # "a cat" has no 3- or 4-grams and "a" occurs everywhere: only 2 of 4 orders score
    refs = {"a": ["a red bus"], "b": ["a cat"]}
    res = evaluate(outputs_for([("a", "a red bus"), ("b", "a cat")]), refs, "cider_d")
    assert res.per_item == [7.5, 5.0]


# -- refinement --------------------------------------------------------------

def audit(state):
    hist = state.tau_bar_history
    for a in state.accepted:
        assert a["score"] >= hist[a["iteration"] - 1]
    caps = [" ".join(metrics.tokenize(a["caption"])) for a in state.accepted]
    assert len(caps) == len(set(caps))
    assert len(hist) == len(state.store_sizes) == state.iteration + 1


@pytest.mark.parametrize("metric", ["cider_d", "bleu@4"])
def test_refine_regurgitating(single_ref, metric):
    train, val = single_ref["train"], single_ref["val"]
    refs = pipeline.references_by_image(train + val)
    cfg = RefineConfig(metric=metric, max_iters=3, num_samples=3)
    state = refine(train, val, Regurgitate(refs), HashEmbedder(8), cfg)
    audit(state)
    # every training caption is regenerated with a maximal score; the repeated
    # samples are dropped as duplicates
    distinct = {" ".join(metrics.tokenize(r.caption)) for r in train}
    first = [a for a in state.accepted if a["iteration"] == 1]
    assert len(first) == len(distinct)
    top = 10.0 if metric == "cider_d" else 1.0
    assert all(a["score"] == top for a in first)
    assert state.tau_bar_history == sorted(state.tau_bar_history)
    assert state.store_sizes[1] == state.store_sizes[0] + len(first)


def test_refine_junk(multi_ref):
    train, val = multi_ref["train"], multi_ref["val"]
    cfg = RefineConfig(metric="bleu@4", max_iters=5)
    state = refine(train, val, JunkLLM(), HashEmbedder(8), cfg)
    assert state.accepted == []
    assert state.iteration == 1 and state.stopped
    assert state.stop_reason == "no samples accepted"
    assert state.store_sizes == [len(train), len(train)]


def test_refine_zero_iters(multi_ref):
    state = refine(multi_ref["train"], multi_ref["val"], ShuffleLLM(), HashEmbedder(8),
                   RefineConfig(max_iters=0))
    assert len(state.tau_bar_history) == 1 and state.iteration == 0 and state.accepted == []


def test_refine_shuffle_sound(multi_ref):
    state = refine(multi_ref["train"], multi_ref["val"], ShuffleLLM(), HashEmbedder(8),
                   RefineConfig(metric="cider_d", max_iters=4))
    audit(state)
    assert len(state.tau_bar_history) <= 5


def test_refine_resume_equivalence(multi_ref, tmp_path):
    train, val = multi_ref["train"], multi_ref["val"]
    cfg = RefineConfig(metric="rouge_l", max_iters=3, seed=5)
    full = refine(train, val, ShuffleLLM(), HashEmbedder(8), cfg, checkpoint_dir=tmp_path / "a")
    short = RefineConfig(metric="rouge_l", max_iters=1, seed=5)
    refine(train, val, ShuffleLLM(), HashEmbedder(8), short, checkpoint_dir=tmp_path / "b")
    resumed = refine(train, val, ShuffleLLM(), HashEmbedder(8), cfg,
                     checkpoint_dir=tmp_path / "b", resume=True)
    assert resumed.to_json() == full.to_json()
    last = pipeline.latest_checkpoint(tmp_path / "a")
    assert last.name == f"iter{full.iteration}.json"
    assert (tmp_path / "a" / last.name).read_bytes() == (tmp_path / "b" / last.name).read_bytes()


def test_resume_rejects_changed_config(multi_ref, tmp_path):
    train, val = multi_ref["train"], multi_ref["val"]
    refine(train, val, ShuffleLLM(), HashEmbedder(8), RefineConfig(max_iters=1),
           checkpoint_dir=tmp_path)
    with pytest.raises(ValueError):
        refine(train, val, ShuffleLLM(), HashEmbedder(8), RefineConfig(max_iters=2, k=3),
               checkpoint_dir=tmp_path, resume=True)


def test_refine_rollback_on_provider_failure(multi_ref, tmp_path):
    train, val = multi_ref["train"], multi_ref["val"]
    cfg = RefineConfig(metric="rouge_l", max_iters=3, seed=5, tol=-1.0)
    n_val = len(pipeline.unique_images(val)[0])
    n_train = len(pipeline.unique_images(train)[0])
    # baseline + one full iteration, then die inside iteration 2
    budget = n_val + (n_train + n_val) + 3
    with pytest.raises(pipeline.RefinementAborted) as info:
        refine(train, val, FailAfter(ShuffleLLM(), budget), HashEmbedder(8), cfg,
               checkpoint_dir=tmp_path)
    state = info.value.state
    assert state.iteration == 1
    assert len(state.tau_bar_history) == 2
    assert all(a["iteration"] == 1 for a in state.accepted)
    assert pipeline.latest_checkpoint(tmp_path).name == "iter1.json"
    saved, _, _ = pipeline.load_checkpoint(tmp_path / "iter1.json")
    assert saved.to_json() == state.to_json()
    # the interrupted run resumes to the same place an uninterrupted run reaches
    resumed = refine(train, val, ShuffleLLM(), HashEmbedder(8), cfg, checkpoint_dir=tmp_path,
                     resume=True)
    full = refine(train, val, ShuffleLLM(), HashEmbedder(8), cfg)
    assert resumed.to_json() == full.to_json()


def test_refine_rejects_empty():
    with pytest.raises(ReferenceError):
        refine([], [], EchoLLM(), HashEmbedder(4))


def test_refine_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(metric="clip_score")
    with pytest.raises(ValueError):
        RefineConfig(k=0)
    with pytest.raises(ValueError):
        RefineConfig(max_iters=-1)


# -- token ranking -----------------------------------------------------------

def vocab4():
    eye = np.eye(4)
    return [(t, eye[i]) for i, t in enumerate(["cat", "dog", "sky", "car"])]


def test_rank_tokens_perfect():
    model = MappingModel(np.eye(4), "ols", 0.0)
    assert pipeline.rank_tokens(model, vocab4(), np.eye(4)[0], ["a cat"], cutoff=4) == 1.0


def test_rank_tokens_second():
    model = MappingModel(np.eye(4), "ols", 0.0)
    img = np.array([1.0, 0.5, 0.1, 0.0])
    got = pipeline.rank_tokens(model, vocab4(), img, ["the dog"], cutoff=4)
    assert got == pytest.approx(1 / np.log2(3), abs=1e-12)


def test_rank_tokens_no_relevant():
    model = MappingModel(np.eye(4), "ols", 0.0)
    assert pipeline.rank_tokens(model, vocab4(), np.ones(4), ["a tree"]) == 0.0


def test_rank_tokens_empty_vocab():
    with pytest.raises(EmptyVocabularyError):
        pipeline.rank_tokens(MappingModel(np.eye(4), "ols", 0.0), [], np.ones(4), ["x"])


# -- modality gap --------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_mapping_closes_rotation_gap(seed):
    rng = np.random.default_rng(seed)
    v, e, _ = fixtures.rotated_pairs(400, 16, 0.05, rng)
    model = fit_ols((v, e))
    assert pipeline.cross_modal_recall(v, e, model) > pipeline.cross_modal_recall(v, e)


def test_build_system_pairs_synthetic_with_source_image(multi_ref):
    train = multi_ref["train"]
    r0 = train[0]
    syn = pipeline.Synthetic(1, r0.image_id, "new text", 1.0, r0.text_emb.astype(float))
    base = build_system(train)
    grown = build_system(train, synthetic=[syn], base_stats=base.stats)
    assert len(grown.store) == len(train) + 1
    assert grown.store.entries[-1].provenance == "synthetic"
    assert grown.store.entries[-1].iteration == 1
    assert not np.array_equal(grown.model.matrix, base.model.matrix)
