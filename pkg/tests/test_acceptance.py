"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured numbers,
then asserts.  ``python tests/test_acceptance.py`` runs the same checks
without pytest.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from mocks import Regurgitate  # noqa: E402
from mrag import fixtures, kernels, metrics, pipeline  # noqa: E402
from mrag.cli import main as cli_main  # noqa: E402
from mrag.genclient import EchoLLM, HashEmbedder, JunkLLM, ShuffleLLM  # noqa: E402
from mrag.mapping import fit_ols, fit_procrustes, orthogonality_error, residual  # noqa: E402
from mrag.pipeline import D2S, S2D, PromptTemplate, RefineConfig  # noqa: E402
from mrag.store import StoreEntry, VectorStore  # noqa: E402


# -- 1 ------------------------------------------------------------------------

def check_ols_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_entry = worst_stat = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 17))
        n = int(rng.integers(d, 201))
        v = rng.standard_normal((n, d))
        e = v @ rng.standard_normal((d, d)) + 0.1 * rng.standard_normal((n, d))
        got = fit_ols((v, e)).matrix
        # brute force: one least-squares problem per output coordinate
        oracle = np.stack([np.linalg.lstsq(v, e[:, j], rcond=None)[0] for j in range(d)])
        worst_entry = max(worst_entry, float(np.max(np.abs(got - oracle))))
        grad = v.T @ (v @ got.T - e)
        worst_stat = max(worst_stat, float(np.max(np.abs(grad)) / np.max(np.abs(v.T @ e))))
    dt = time.perf_counter() - t0
    ok = worst_entry <= 1e-6 and worst_stat <= 1e-6 and dt < 10
    return ok, f"max|L-oracle|={worst_entry:.2e} stationarity={worst_stat:.2e} time={dt:.2f}s"


# -- 2 ------------------------------------------------------------------------

def brute_topk(matrix, q, k):
    """O(n*d) scan: sequential float64 dot products, full sort, ties by index."""
    m = matrix.astype(np.float64)
    dots = np.zeros(len(m))
    sq = np.zeros(len(m))
    for j in range(m.shape[1]):
        dots += m[:, j] * q[j]
        sq += m[:, j] * m[:, j]
    den = np.sqrt(sq) * math.sqrt(sum(x * x for x in q))
    sims = np.where(den > 0, dots / np.where(den > 0, den, 1.0), 0.0)
    order = np.lexsort((np.arange(len(m)), -sims))
    return order[:k], sims[order[:k]]


def check_retrieval_oracle():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    mismatches = 0
    sizes = [10_000] * 5 + [int(x) for x in rng.integers(1, 10_001, 95)]
    for n in sizes:
        d = int(rng.integers(1, 65))
        mat = rng.standard_normal((n, d)).astype(np.float32)
        # planted exact duplicates exercise the tie rule
        dup = rng.integers(0, n, max(1, n // 50))
        mat[dup] = mat[rng.integers(0, n)]
        store = VectorStore.build([StoreEntry(row, str(i)) for i, row in enumerate(mat)])
        k = int(rng.integers(1, 21))
        for q in (rng.standard_normal(d), mat[dup[0]].astype(np.float64)):
            hits = store.top_k(q, k)
            idx, sims = brute_topk(mat, q, k)
            # order must match exactly; similarities may differ in the last ulp
            # because the query norm is summed differently
            if [h.index for h in hits] != idx.tolist() or \
                    not np.allclose([h.similarity for h in hits], sims, rtol=0, atol=1e-12):
                mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 30
    return ok, f"stores=100 mismatches={mismatches} max_n={max(sizes)} time={dt:.2f}s " \
               f"backend={kernels.BACKEND}"


# -- 3 ------------------------------------------------------------------------

def check_metric_goldens():
    tok = metrics.tokenize
    caps = ["a man riding a red bike", "two dogs play on the beach", "a plate of food on a table"]
    corpus = [[tok(c)] for c in caps]
    stats = metrics.CorpusStats.build(corpus)
    s = corpus[0][0]
    gauss_corpus = [[tok("p q r s t u v w x y z aa bb cc dd ee")], [tok("k l m")]]
    gstats = metrics.CorpusStats.build(gauss_corpus)
    gref = gauss_corpus[0][0]
    flat = metrics.cider_d(tok("p q r s"), [gref], gstats, sigma=1e300)
    checks = {
        "bleu identity": (min(metrics.bleu(s, [s], n) for n in range(1, 5)), 1.0),
        "rouge identity": (metrics.rouge_l(s, [s]), 1.0),
        "cider identity": (min(metrics.cider_d(c[0], c, stats) for c in corpus), 10.0),
        # [the]x4 against a reference holding "the" twice: clipped 2/4, BP e^(1-5/4)
        "bleu clipped 2/4": (metrics.bleu(["the"] * 4, [tok("the cat on the mat")], 1),
                             0.5 * math.exp(1 - 5 / 4)),
        "rouge lcs 3/4": (metrics.rouge_l(list("abcd"), [list("aced")]), 0.75),
        "cider gauss e^-2": (metrics.cider_d(tok("p q r s"), [gref], gstats),
                             flat * math.exp(-2.0)),
        "ndcg 1/log2(3)": (metrics.ndcg(["x", "y"], {"y"}, 2), 1 / math.log2(3)),
    }
    bad = {k: v for k, (v, want) in checks.items() if abs(v - want) > 1e-6}
    detail = " ".join(f"{k.replace(' ', '_')}={v:.6f}" for k, (v, _) in checks.items())
    return not bad, detail + (f" failing={sorted(bad)}" if bad else "")


# -- 4 ------------------------------------------------------------------------

def check_modality_gap():
    t0 = time.perf_counter()
    wins = 0
    mapped, raw = [], []
    for seed in range(100):
        v, e, _ = fixtures.rotated_pairs(2000, 32, 0.05, np.random.default_rng(seed))
        model = fit_ols((v, e))
        a = pipeline.cross_modal_recall(v, e, model)
        b = pipeline.cross_modal_recall(v, e)
        wins += a > b
        mapped.append(a)
        raw.append(b)
    dt = time.perf_counter() - t0
    ok = wins >= 95 and dt < 60
    return ok, f"wins={wins}/100 recall@1 mapped={np.mean(mapped):.4f} " \
               f"identity={np.mean(raw):.4f} time={dt:.2f}s backend={kernels.BACKEND}"


# -- 5 ------------------------------------------------------------------------

def _split(records):
    sp = fixtures.split_indices(records, (0.6, 0.4, 0.0))
    return [records[i] for i in sp["train"]], [records[i] for i in sp["val"]]


def check_refinement_soundness():
    t0 = time.perf_counter()
    problems = []
    train, val = _split(fixtures.caption_dataset(30, 1, 8, seed=3))
    refs = pipeline.references_by_image(train + val)
    st = pipeline.refine(train, val, Regurgitate(refs), HashEmbedder(8),
                         RefineConfig(metric="cider_d", max_iters=3, num_samples=3))
    hist = st.tau_bar_history
    if not st.accepted:
        problems.append("regurgitation accepted nothing")
    if any(a["score"] < hist[a["iteration"] - 1] for a in st.accepted):
        problems.append("accepted entry below prior tau_bar")
    caps = [a["caption"] for a in st.accepted]
    if len(caps) != len(set(caps)):
        problems.append("duplicate synthetic captions")
    n_regurg = len(st.accepted)

    train2, val2 = _split(fixtures.caption_dataset(30, 2, 8, seed=4))
    junk = pipeline.refine(train2, val2, JunkLLM(), HashEmbedder(8),
                           RefineConfig(metric="bleu@4", max_iters=5))
    if junk.accepted or junk.iteration != 1 or not junk.stopped:
        problems.append("junk run did not stop after one empty iteration")

    cfg3 = RefineConfig(metric="rouge_l", max_iters=3, seed=5)
    with tempfile.TemporaryDirectory() as tmp:
        full = pipeline.refine(train2, val2, ShuffleLLM(), HashEmbedder(8), cfg3)
        pipeline.refine(train2, val2, ShuffleLLM(), HashEmbedder(8),
                        RefineConfig(metric="rouge_l", max_iters=1, seed=5), checkpoint_dir=tmp)
        resumed = pipeline.refine(train2, val2, ShuffleLLM(), HashEmbedder(8), cfg3,
                                  checkpoint_dir=tmp, resume=True)
    if resumed.to_json() != full.to_json():
        problems.append("resumed run differs from uninterrupted run")
    dt = time.perf_counter() - t0
    if dt >= 30:
        problems.append("too slow")
    return not problems, f"regurgitate_accepted={n_regurg} tau={[round(x, 4) for x in hist]} " \
                         f"junk_accepted={len(junk.accepted)} junk_iters={junk.iteration} " \
                         f"resume_equal={resumed.to_json() == full.to_json()} time={dt:.2f}s" + \
                         (f" problems={problems}" if problems else "")


# -- 6 ------------------------------------------------------------------------

def _quiet(argv):
    import contextlib
    import io
    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
        return cli_main([str(a) for a in argv])


def check_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        assert _quiet(["make-fixture", "--out", tmp / "fx.jsonl", "--images", 20]) == 0
        data = ["--dataset", tmp / "fx.jsonl", "--splits", tmp / "fx.splits.json", "--offline",
                "--seed", 11]
        caps, refs = [], []
        codes = []
        for t, threads in enumerate((1, 1, 4)):
            codes.append(_quiet(["caption", *data, "--threads", threads,
                                 "--out", tmp / f"c{t}.jsonl"]))
            caps.append((tmp / f"c{t}.jsonl").read_bytes())
            ck = tmp / f"ck{t}"
            codes.append(_quiet(["refine", *data, "--threads", threads, "--max-iters", 2,
                                 "--checkpoint-dir", ck]))
            refs.append({p.name: p.read_bytes() for p in sorted(ck.iterdir())})
    same_caps = caps[0] == caps[1] == caps[2]
    same_ref = refs[0] == refs[1] == refs[2]
    ok = same_caps and same_ref and not any(codes)
    return ok, f"caption_identical={same_caps} refine_identical={same_ref} " \
               f"refine_files={len(refs[0])} exit_codes={codes}"


# -- 7 ------------------------------------------------------------------------

def check_ordering_prompts():
    records = fixtures.caption_dataset(20, 2, 8, seed=1)
    system = pipeline.build_system(records)
    ids, vecs = pipeline.unique_images(records)
    blocks = {}
    for ordering in (S2D, D2S):
        t = PromptTemplate(ordering=ordering)
        outs = pipeline.caption(ids, vecs, system.model, system.store, t, 5, EchoLLM())
        blocks[ordering] = [o.prompt[len(t.prefix):-len(t.suffix)].split(t.separator)
                            for o in outs]
    bad = sum(a != b[::-1] for a, b in zip(blocks[S2D], blocks[D2S]))
    return bad == 0, f"images={len(ids)} non_reversed={bad}"


# -- 8 ------------------------------------------------------------------------

def check_procrustes():
    rng = np.random.default_rng(99)
    rot_err = orth = 0.0
    violations = 0
    for _ in range(50):
        d = int(rng.integers(2, 17))
        n = int(rng.integers(d, 201))
        v, e, rot = fixtures.rotated_pairs(n, d, 0.0, rng)
        m = fit_procrustes((v, e))
        rot_err = max(rot_err, float(np.max(np.abs(m.matrix - rot))))
        orth = max(orth, orthogonality_error(m))
        v2, e2, _ = fixtures.rotated_pairs(n, d, float(rng.uniform(0.01, 1.0)), rng)
        p = fit_procrustes((v2, e2))
        orth = max(orth, orthogonality_error(p))
        if residual(p, (v2, e2)) < residual(fit_ols((v2, e2)), (v2, e2)):
            violations += 1
    ok = rot_err <= 1e-5 and orth <= 1e-5 and violations == 0
    return ok, f"max|R-R*|={rot_err:.2e} orthogonality={orth:.2e} residual_below_ols={violations}"


CRITERIA = [
    (1, "OLS oracle", check_ols_oracle),
    (2, "retrieval oracle", check_retrieval_oracle),
    (3, "metric golden values", check_metric_goldens),
    (4, "modality-gap trend", check_modality_gap),
    (5, "refinement soundness", check_refinement_soundness),
    (6, "determinism", check_determinism),
    (7, "ordering prompts", check_ordering_prompts),
    (8, "procrustes", check_procrustes),
]


def report(num, name, fn):
    ok, detail = fn()
    line = f"{'PASS' if ok else 'FAIL'} criterion {num} ({name}): {detail}"
    return ok, line


@pytest.mark.parametrize("num,name,fn", CRITERIA, ids=[f"c{n}" for n, _, _ in CRITERIA])
def test_criterion(num, name, fn, capsys):
    ok, line = report(num, name, fn)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [report(*c) for c in CRITERIA]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
