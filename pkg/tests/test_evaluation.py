import csv
import io
import logging

import numpy as np
import pytest

from app.core.errors import NonFiniteError, SelectorError, ShapeError
from app.schemas.config import ObjectiveConfig, TrainConfig
from app.schemas.records import SubModelSelector
from app.services.checkpoint import Checkpoint
from app.services.encoder import init_params
from app.services.evaluation import (
    CSV_HEADER,
    RetrievalEvalSet,
    StsEvalSet,
    brute_force_topk,
    cell_cost,
    embed_at,
    evaluate_cell,
    make_selector,
    mrr_at_k,
    ndcg_at_k,
    normalize_rows,
    objective_label,
    spearman,
    sweep,
)
from app.services.ingest import build_vocab
from app.services.synthetic import make_sts_task


@pytest.fixture
def retrieval_set(retrieval_task):
    return RetrievalEvalSet(retrieval_task.corpus, retrieval_task.queries, retrieval_task.qrels)


@pytest.fixture
def sts_checkpoint(tiny_encoder):
    pairs = make_sts_task(40, 64, seed=5)
    vocab = build_vocab([p.s1 for p in pairs] + [p.s2 for p in pairs], 64)
    config = TrainConfig(objective=ObjectiveConfig(kind="mse", dims=[4, 8, 16], target_dim=4), encoder=tiny_encoder)
    checkpoint = Checkpoint(init_params(tiny_encoder, 0), config, vocab, final_loss=0.0)
    return checkpoint, StsEvalSet(pairs)


def test_topk_hand_case_breaks_ties_by_id():
    corpus = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    ranked = brute_force_topk(np.array([1.0, 0.0]), corpus, ["b", "c", "a"], 2)
    assert ranked == [("a", 1.0), ("b", 1.0)]
    assert [doc for doc, _ in brute_force_topk(np.array([1.0, 0.0]), corpus, ["b", "c", "a"], 10)] == ["a", "b", "c"]


def test_topk_matches_sorting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, dim = int(rng.integers(1, 30)), int(rng.integers(1, 5))
        corpus = rng.integers(-2, 3, size=(n, dim)).astype(float)
        query = rng.integers(-2, 3, size=dim).astype(float)
        ids = [f"doc{j:03d}" for j in rng.permutation(n)]
        scores = corpus @ query
        expected = sorted(range(n), key=lambda i: (-scores[i], ids[i]))[:10]
        assert [doc for doc, _ in brute_force_topk(query, corpus, ids, 10)] == [ids[i] for i in expected]


def test_topk_errors():
    with pytest.raises(ShapeError):
        brute_force_topk(np.ones(2), np.zeros((0, 2)), [], 1)
    with pytest.raises(ShapeError):
        brute_force_topk(np.ones(2), np.ones((1, 2)), ["a"], 0)
    with pytest.raises(ShapeError):
        brute_force_topk(np.ones(3), np.ones((1, 2)), ["a"], 1)


def test_mrr_values():
    qrels = {"q1": {"c"}, "q2": {"x"}}
    assert mrr_at_k({"q1": ["a", "b", "c"]}, qrels) == pytest.approx(1 / 3)
    assert mrr_at_k({"q2": ["a", "b", "c"]}, qrels) == 0.0
    both = {"q1": ["c", "a"], "q2": ["a", "b", "c", "x"]}
    assert mrr_at_k(both, qrels) == pytest.approx(0.625)
    late = {"q1": [f"n{i}" for i in range(10)] + ["c"]}
    assert mrr_at_k(late, qrels) == 0.0


def test_ndcg_values():
    qrels = {"q": {"a"}}
    assert ndcg_at_k({"q": ["a", "b"]}, qrels) == pytest.approx(1.0)
    assert ndcg_at_k({"q": ["b", "a"]}, qrels) == pytest.approx(0.630930, abs=1e-6)
    assert ndcg_at_k({"q": ["a", "b"]}, {"q": {"a", "b"}}) == pytest.approx(1.0)


def test_query_without_relevant_docs_scores_zero_and_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert ndcg_at_k({"q": ["a"]}, {"q": set()}) == 0.0
        assert mrr_at_k({"missing": ["a"]}, {}) == 0.0
    assert "no relevant documents" in caplog.text
    assert "missing from qrels" in caplog.text


def test_spearman_values():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3], [1, 3, 3]) == pytest.approx(0.866025, abs=1e-6)
    with pytest.raises(ShapeError):
        spearman([1.0], [1.0])
    with pytest.raises(NonFiniteError):
        spearman([1, 1, 1], [1, 2, 3])


def test_spearman_matches_rank_formula_without_ties():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(3, 20))
        a, b = rng.permutation(n), rng.permutation(n)
        d2 = float(((a - b) ** 2).sum())
        assert spearman(a, b) == pytest.approx(1 - 6 * d2 / (n * (n * n - 1)), abs=1e-10)


def _average_ranks(values):
    ranks = []
    for v in values:
        below = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        ranks.append(below + (equal + 1) / 2)
    return ranks


def test_spearman_matches_brute_force_oracle_with_ties():
    rng = np.random.default_rng(2)
    checked = 0
    while checked < 50:
        n = int(rng.integers(2, 11))
        a = rng.integers(0, 4, size=n).tolist()
        b = rng.integers(0, 4, size=n).tolist()
        ra, rb = np.array(_average_ranks(a)), np.array(_average_ranks(b))
        if ra.std() == 0 or rb.std() == 0:
            continue
        expected = float(np.corrcoef(ra, rb)[0, 1])
        assert spearman(a, b) == pytest.approx(expected, abs=1e-9)
        checked += 1


def test_normalize_rows_rejects_zero_rows():
    np.testing.assert_allclose(np.linalg.norm(normalize_rows(np.array([[3.0, 4.0]])), axis=1), 1.0)
    with pytest.raises(NonFiniteError):
        normalize_rows(np.zeros((1, 3)))


def test_embed_at_identity_and_prefix(tiny_checkpoint):
    texts = ["t00w001 bg002", "t01w003", "bg004 bg005 t02w000"]
    d_model = tiny_checkpoint.encoder_config.d_model
    full = embed_at(tiny_checkpoint, SubModelSelector(layer=3, dim=d_model), texts)
    np.testing.assert_allclose(np.linalg.norm(full, axis=1), 1.0, atol=1e-10)
    short = embed_at(tiny_checkpoint, SubModelSelector(layer=3, dim=4), texts)
    np.testing.assert_allclose(short, normalize_rows(full[:, :4]), atol=1e-10)
    with pytest.raises(SelectorError):
        embed_at(tiny_checkpoint, SubModelSelector(layer=4, dim=4), texts)
    with pytest.raises(SelectorError):
        embed_at(tiny_checkpoint, SubModelSelector(layer=1, dim=d_model + 1), texts)


def test_sweep_grid_and_rows(tiny_checkpoint, retrieval_set):
    result = sweep(tiny_checkpoint, [1, 2, 3], [4, 8, 16], retrieval_set, "retrieval")
    assert len(result.rows) == 3 * 3 * 2
    assert result.metrics() == ["mrr@10", "ndcg@10"]
    assert [(r.layer, r.dim) for r in result.rows[::2]] == [(layer, dim) for layer in (1, 2, 3) for dim in (4, 8, 16)]
    assert all(0.0 <= r.value <= 1.0 for r in result.rows)
    assert {r.objective for r in result.rows} == {"v2"}
    assert len(set(result.corpus_digests.values())) == 3


def test_identity_cell_matches_evaluate_cell(tiny_checkpoint, retrieval_set):
    result = sweep(tiny_checkpoint, [3], [16], retrieval_set, "retrieval")
    single = evaluate_cell(tiny_checkpoint, SubModelSelector(layer=3, dim=16), retrieval_set, "retrieval")
    assert result.value(3, 16, "mrr@10") == pytest.approx(single["mrr@10"])
    assert result.value(3, 16, "ndcg@10") == pytest.approx(single["ndcg@10"])


def test_fix_doc_sweep_uses_one_corpus_matrix(tiny_checkpoint, retrieval_set):
    result = sweep(tiny_checkpoint, [1, 2, 3], [4, 16], retrieval_set, "retrieval", fix_doc=True)
    assert len(set(result.corpus_digests.values())) == 1
    assert {r.objective for r in result.rows} == {"v2@fix-doc-eval"}
    plain = sweep(tiny_checkpoint, [3], [4, 16], retrieval_set, "retrieval")
    for dim in (4, 16):
        assert result.value(3, dim, "mrr@10") == pytest.approx(plain.value(3, dim, "mrr@10"))


def test_sweep_csv_is_deterministic(tiny_checkpoint, retrieval_set):
    first = sweep(tiny_checkpoint, [1, 3], [4, 16], retrieval_set, "retrieval").to_csv()
    second = sweep(tiny_checkpoint, [1, 3], [4, 16], retrieval_set, "retrieval").to_csv()
    assert first == second
    rows = list(csv.reader(io.StringIO(first)))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 1 + 2 * 2 * 2
    assert rows[1][:4] == ["v2", "1", "4", "mrr@10"]


def test_markdown_has_one_table_per_metric(tiny_checkpoint, retrieval_set):
    markdown = sweep(tiny_checkpoint, [1, 3], [4, 16], retrieval_set, "retrieval").to_markdown()
    assert "### mrr@10" in markdown and "### ndcg@10" in markdown
    assert "| layer \\ dim | 4 | 16 |" in markdown


def test_sweep_with_cost_rows(tiny_checkpoint, retrieval_set):
    result = sweep(tiny_checkpoint, [1, 3], [4, 16], retrieval_set, "retrieval", with_cost=True)
    assert "relative_cost" in result.metrics()
    assert result.value(3, 16, "relative_cost") == pytest.approx(1.0)
    assert result.value(1, 4, "relative_cost") < result.value(3, 4, "relative_cost") < 1.0


def test_sts_sweep(sts_checkpoint):
    checkpoint, eval_set = sts_checkpoint
    result = sweep(checkpoint, [1, 3], [4, 16], eval_set, "sts")
    assert result.metrics() == ["spearman"]
    assert all(-1.0 <= r.value <= 1.0 for r in result.rows)
    assert {r.objective for r in result.rows} == {"mse"}
    fixed = sweep(checkpoint, [1, 3], [4, 16], eval_set, "sts", fix_doc=True)
    assert fixed.to_csv() == result.to_csv()


def test_sweep_rejects_bad_grids(tiny_checkpoint, retrieval_set):
    with pytest.raises(SelectorError):
        sweep(tiny_checkpoint, [], [4], retrieval_set, "retrieval")
    with pytest.raises(SelectorError):
        sweep(tiny_checkpoint, [0], [4], retrieval_set, "retrieval")
    with pytest.raises(SelectorError):
        sweep(tiny_checkpoint, [1], [17], retrieval_set, "retrieval")
    with pytest.raises(ShapeError):
        sweep(tiny_checkpoint, [1], [4], StsEvalSet([]), "retrieval")


def test_make_selector_checks_bounds_before_building(tiny_encoder):
    assert make_selector(tiny_encoder, 3, 16) == SubModelSelector(layer=3, dim=16)
    for layer, dim in [(0, 4), (4, 4), (1, 0), (1, 17), (-1, 4)]:
        with pytest.raises(SelectorError):
            make_selector(tiny_encoder, layer, dim)


def test_cell_cost(tiny_encoder):
    assert cell_cost(tiny_encoder, SubModelSelector(layer=3, dim=16)) == pytest.approx(1.0)
    assert cell_cost(tiny_encoder, SubModelSelector(layer=1, dim=4)) == pytest.approx(1 / 3)
    with_docs = cell_cost(tiny_encoder, SubModelSelector(layer=3, dim=8), n_docs=10**9)
    assert with_docs == pytest.approx(0.5, abs=1e-3)


def test_objective_label():
    assert objective_label(ObjectiveConfig(kind="full")) == "full"
    flagged = ObjectiveConfig(kind="v2", score=True, full_dim=True, fix_doc=True, plus_dims=True)
    assert objective_label(flagged) == "v2+score+full-dim+fix-doc+dims"
