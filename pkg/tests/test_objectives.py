import math
from collections import Counter

import numpy as np
import pytest
from conftest import random_layers

from app.core.errors import ConfigError, ShapeError
from app.schemas.config import ObjectiveConfig
from app.services import objectives as objectives_module
from app.services import pca
from app.services.autodiff import backward, constant, leaf, precision
from app.services.encoder import LayerEmbeddings
from app.services.objectives import (
    SimDistribution,
    compute_objective,
    distill,
    full_dim_loss,
    info_nce,
    kld,
    layer_weight,
    matryoshka_loss,
    pca_targets,
    sample_sublayer,
    score_alignment_loss,
    sim_distribution,
    truncate,
    v1_components,
    v1_loss,
    v2_components,
    v2_dim_loss,
    v2_layer_loss,
    v2_total_loss,
)


@pytest.fixture(autouse=True)
def _float64():
    with precision(np.float64):
        yield


def _layers(*arrays):
    return LayerEmbeddings([leaf(np.asarray(a, dtype=np.float64)) for a in arrays])


def test_truncate_prefix_and_nesting():
    e = constant([[1.0, 2.0, 3.0, 4.0]])
    np.testing.assert_array_equal(truncate(e, 2).value, [[1.0, 2.0]])
    assert truncate(e, 4) is e
    wide = constant(np.arange(16.0).reshape(2, 8))
    np.testing.assert_array_equal(truncate(truncate(wide, 8), 4).value, truncate(wide, 4).value)
    with pytest.raises(ShapeError):
        truncate(e, 5)


def test_info_nce_hand_values():
    one = constant([[1.0, 0.0]])
    assert info_nce(one, one, 1.0).item() == pytest.approx(0.0, abs=1e-12)
    eye = constant(np.eye(2))
    assert info_nce(eye, eye, 1.0).item() == pytest.approx(math.log(math.e + 1) - 1, abs=1e-6)
    assert info_nce(eye, eye, 1.0).item() == pytest.approx(0.313262, abs=1e-6)


def test_info_nce_scale_invariant():
    rng = np.random.default_rng(0)
    q, d = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    a = info_nce(constant(q), constant(d), 0.1).item()
    b = info_nce(constant(2 * q), constant(2 * d), 0.1).item()
    assert a == pytest.approx(b, abs=1e-10)


def test_info_nce_extra_docs_are_negatives():
    rng = np.random.default_rng(1)
    q, d = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    assert info_nce(constant(q), constant(d), 0.5).item() > info_nce(constant(q), constant(d[:3]), 0.5).item()
    with pytest.raises(ShapeError):
        info_nce(constant(q), constant(d[:2]), 0.5)


def test_sim_distribution_properties():
    one = constant([[1.0, 2.0]])
    np.testing.assert_allclose(sim_distribution(one, one, 1.0).value, [[1.0]])
    q = constant([[1.0, 0.0]])
    d = constant([[0.0, 1.0], [0.0, -1.0], [0.0, 2.0], [0.0, -3.0]])
    np.testing.assert_allclose(sim_distribution(q, d, 1.0).value, [[0.25] * 4])
    rng = np.random.default_rng(2)
    p = sim_distribution(constant(rng.normal(size=(8, 8))), constant(rng.normal(size=(8, 8))), 0.1)
    np.testing.assert_allclose(p.value.sum(axis=1), 1.0)


def test_kld_hand_values_and_nonnegativity():
    p = SimDistribution.from_probs(constant([[0.5, 0.5]]))
    assert kld(p, p).item() == pytest.approx(0.0)
    q = SimDistribution.from_probs(constant([[0.9, 0.1]]))
    assert kld(p, q).item() == pytest.approx(0.510826, abs=1e-6)
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b = rng.random((1, 5)) + 1e-3, rng.random((1, 5)) + 1e-3
        divergence = kld(
            SimDistribution.from_probs(constant(a / a.sum())),
            SimDistribution.from_probs(constant(b / b.sum())),
        )
        assert divergence.item() >= -1e-12
    with pytest.raises(ShapeError):
        kld(p, SimDistribution.from_probs(constant([[1.0]])))


def test_saturated_similarities_stay_finite():
    # query 0 puts all its mass on document 0; exp(-2000) underflows to zero
    q, d = leaf([[1.0, 0.0], [0.0, 1.0]]), leaf([[1.0, 0.0], [-1.0, 0.0]])
    loss = info_nce(q, d, 1e-3)
    assert loss.item() == pytest.approx(math.log(2) / 2, abs=1e-12)
    backward(loss)
    assert np.all(np.isfinite(q.grad)) and np.all(np.isfinite(d.grad))

    p = sim_distribution(q, d, 1e-3)
    assert p.value[0].tolist() == [1.0, 0.0]
    assert kld(p, p).item() == 0.0
    assert np.isfinite(kld(p, sim_distribution(q, d, 1.0)).item())


def test_saturated_similarities_stay_finite_in_float32():
    with precision(np.float32):
        q, d = constant([[1.0, 0.0], [0.0, 1.0]]), constant([[1.0, 0.0], [-1.0, 0.0]])
        assert info_nce(q, d, 0.01).item() == pytest.approx(math.log(2) / 2, rel=1e-6)
        p = sim_distribution(q, d, 0.01)
        assert kld(p, p).item() == 0.0


def test_matryoshka_single_full_dim_equals_info_nce():
    rng = np.random.default_rng(4)
    q, d = constant(rng.normal(size=(4, 8))), constant(rng.normal(size=(4, 8)))
    assert matryoshka_loss(q, d, [8], 0.1).item() == pytest.approx(info_nce(q, d, 0.1).item(), abs=1e-12)
    expected = info_nce(truncate(q, 2), truncate(d, 2), 0.1).item() + info_nce(truncate(q, 4), truncate(d, 4), 0.1).item()
    assert matryoshka_loss(q, d, [2, 4], 0.1).item() == pytest.approx(expected, abs=1e-12)
    assert matryoshka_loss(q, d, [2, 4, 8], 0.1).item() >= matryoshka_loss(q, d, [2, 4], 0.1).item()


def test_sample_sublayer_support_and_frequencies():
    rng = np.random.default_rng(0)
    assert {sample_sublayer(2, rng) for _ in range(50)} == {1}
    counts = Counter(sample_sublayer(6, rng) for _ in range(60000))
    assert sorted(counts) == [1, 2, 3, 4, 5]
    for r in range(1, 6):
        assert counts[r] / 60000 == pytest.approx(0.2, abs=0.01)
    a = [sample_sublayer(6, np.random.default_rng(9)) for _ in range(3)]
    b = [sample_sublayer(6, np.random.default_rng(9)) for _ in range(3)]
    assert a == b
    with pytest.raises(ConfigError):
        sample_sublayer(1, rng)


def test_layer_weight_values():
    assert layer_weight(12, 12) == 1.0
    assert layer_weight(1, 12) == 1.0
    assert layer_weight(2, 12) == pytest.approx(0.590616, abs=1e-6)


def test_v1_identical_layers_and_lambda_zero():
    rng = np.random.default_rng(5)
    q, d = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    config = ObjectiveConfig(kind="v1", dims=[4, 8], target_dim=4)
    same = v1_components(_layers(q, q), _layers(d, d), config, sublayer=1)
    assert same.parts["kld"] == pytest.approx(0.0, abs=1e-12)
    assert same.total.item() == pytest.approx(2 * same.parts["last"], abs=1e-10)

    q2, d2 = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    no_kld = config.model_copy(update={"lambda_kld": 0.0})
    parts = v1_components(_layers(q2, q), _layers(d2, d), no_kld, sublayer=1)
    assert parts.total.item() == pytest.approx(parts.parts["last"] + parts.parts["random"], abs=1e-10)
    assert v1_loss(_layers(q2, q), _layers(d2, d), no_kld, sublayer=1).item() == pytest.approx(parts.total.item())


def test_v1_dim_modes():
    rng = np.random.default_rng(6)
    q, d = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    full = ObjectiveConfig(kind="v1", dims=[4, 8], target_dim=4, v1_dim_mode="full")
    parts = v1_components(_layers(q, q), _layers(d, d), full, sublayer=1)
    assert parts.parts["last"] == pytest.approx(info_nce(constant(q), constant(d), full.temperature).item())


def test_v2_layer_loss_reductions():
    rng = np.random.default_rng(7)
    q1, q2, d1, d2 = (rng.normal(size=(4, 8)) for _ in range(4))
    tau = 0.2
    single = ObjectiveConfig(kind="v2", dims=[8], target_dim=8, temperature=tau)
    assert v2_layer_loss(_layers(q1), _layers(d1), single).item() == pytest.approx(
        info_nce(constant(q1), constant(d1), tau).item(), abs=1e-12
    )

    config = ObjectiveConfig(kind="v2", dims=[4, 8], target_dim=4, temperature=tau)
    l1 = info_nce(constant(q1[:, :4]), constant(d1[:, :4]), tau).item()
    l2 = info_nce(constant(q2[:, :4]), constant(d2[:, :4]), tau).item()
    assert v2_layer_loss(_layers(q1, q2), _layers(d1, d2), config).item() == pytest.approx(
        layer_weight(1, 2) * l1 + l2, abs=1e-10
    )

    plus = config.model_copy(update={"plus_dims": True})
    by_dim = sum(
        v2_layer_loss(_layers(q1, q2), _layers(d1, d2), config.model_copy(update={"target_dim": k})).item()
        for k in (4, 8)
    )
    assert v2_layer_loss(_layers(q1, q2), _layers(d1, d2), plus).item() == pytest.approx(by_dim, abs=1e-10)


def test_pca_targets_two_point_batch():
    layers = _layers([[2.0, 1.0], [-2.0, -1.0]])
    (target,) = pca_targets(layers, 1)
    np.testing.assert_allclose(np.sort(target.value.ravel()), [-math.sqrt(5), math.sqrt(5)], atol=1e-10)
    assert not target.requires_grad


def test_v2_dim_loss_zero_when_student_matches_targets():
    # rows lie on the first axis, so the batch PCA coordinate is the student's own prefix
    q = np.array([[1.0, 0.0]])
    d = np.array([[-1.0, 0.0]])
    config = ObjectiveConfig(kind="v2", dims=[1], target_dim=1, temperature=1.0)
    assert v2_dim_loss(_layers(q), _layers(d), config).item() == pytest.approx(0.0, abs=1e-10)


def test_v2_dim_loss_is_non_negative():
    rng = np.random.default_rng(8)
    config = ObjectiveConfig(kind="v2", dims=[2, 4, 8], target_dim=2)
    for _ in range(5):
        loss = v2_dim_loss(random_layers(rng, 2, 4, 8), random_layers(rng, 2, 4, 8), config)
        assert loss.item() >= 0.0


def test_score_alignment_zero_and_large_temperature():
    rng = np.random.default_rng(9)
    q, d = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    config = ObjectiveConfig(kind="v2", dims=[8], target_dim=8, score=True)
    assert score_alignment_loss(_layers(q), _layers(d), config).item() == pytest.approx(0.0, abs=1e-12)
    hot = ObjectiveConfig(kind="v2", dims=[2, 8], target_dim=2, score=True, temperature=1e6)
    q2 = rng.normal(size=(4, 8))
    assert score_alignment_loss(_layers(q2, q), _layers(d, d), hot).item() < 1e-9


def test_full_dim_loss_terms():
    rng = np.random.default_rng(10)
    q1, q2, d1, d2 = (rng.normal(size=(3, 4)) for _ in range(4))
    config = ObjectiveConfig(kind="v2", dims=[2, 4], target_dim=2, full_dim=True, temperature=0.5)
    assert full_dim_loss(_layers(q1), _layers(d1), config).item() == pytest.approx(
        info_nce(constant(q1), constant(d1), 0.5).item()
    )
    expected = layer_weight(1, 2) * info_nce(constant(q1), constant(d1), 0.5).item() + info_nce(
        constant(q2), constant(d2), 0.5
    ).item()
    assert full_dim_loss(_layers(q1, q2), _layers(d1, d2), config).item() == pytest.approx(expected)


def test_v2_total_reduction_identity():
    rng = np.random.default_rng(11)
    q, d = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    config = ObjectiveConfig(kind="v2", dims=[8], target_dim=8, beta=0.0, alpha=1.0, temperature=0.3)
    base = info_nce(constant(q), constant(d), 0.3).item()
    assert v2_total_loss(_layers(q), _layers(d), config).item() == pytest.approx(2 * base, abs=1e-6)
    alpha = config.model_copy(update={"alpha": 2.5})
    assert v2_total_loss(_layers(q), _layers(d), alpha).item() == pytest.approx(3.5 * base, abs=1e-6)


def test_v2_total_is_sum_of_components():
    rng = np.random.default_rng(12)
    layers = random_layers(rng, 2, 4, 8)
    docs = random_layers(rng, 2, 4, 8)
    config = ObjectiveConfig(kind="v2", dims=[4, 8], target_dim=4)
    breakdown = v2_components(layers, docs, config)
    expected = breakdown.parts["layer"] + breakdown.parts["dim"] + breakdown.parts["last_full"]
    assert breakdown.total.item() == pytest.approx(expected, abs=1e-8)


def test_full_dim_flag_adds_its_term():
    rng = np.random.default_rng(13)
    layers, docs = random_layers(rng, 2, 4, 8), random_layers(rng, 2, 4, 8)
    config = ObjectiveConfig(kind="v2", dims=[4, 8], target_dim=4)
    plain = v2_total_loss(layers, docs, config).item()
    with_full = v2_components(layers, docs, config.model_copy(update={"full_dim": True}))
    assert "full_dim" not in v2_components(layers, docs, config).parts
    assert with_full.total.item() == pytest.approx(plain + with_full.parts["full_dim"], abs=1e-10)


def test_fix_doc_uses_last_layer_documents():
    rng = np.random.default_rng(14)
    q1, q2, d1, d2 = (rng.normal(size=(4, 8)) for _ in range(4))
    fixed = ObjectiveConfig(kind="v2", dims=[4, 8], target_dim=4, fix_doc=True)
    plain = ObjectiveConfig(kind="v2", dims=[4, 8], target_dim=4)
    a = v2_layer_loss(_layers(q1, q2), _layers(d1, d2), fixed).item()
    b = v2_layer_loss(_layers(q1, q2), _layers(d2, d2), plain).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_distill_blocks_gradient_into_teacher_side():
    rng = np.random.default_rng(15)
    q_last, d_last = leaf(rng.normal(size=(4, 8))), leaf(rng.normal(size=(4, 8)))
    q_sub, d_sub = leaf(rng.normal(size=(4, 8))), leaf(rng.normal(size=(4, 8)))
    config = ObjectiveConfig(kind="v1", dims=[8], target_dim=8)
    divergence = distill(sim_distribution(q_last, d_last, 0.5), sim_distribution(q_sub, d_sub, 0.5), config)
    backward(divergence)
    assert q_last.grad is None or not np.any(q_last.grad)
    assert np.any(q_sub.grad)


def test_variants_need_v2_and_dispatch():
    with pytest.raises(ValueError):
        ObjectiveConfig(kind="mse", score=True)
    rng = np.random.default_rng(16)
    layers, docs = random_layers(rng, 2, 4, 8), random_layers(rng, 2, 4, 8)
    full = compute_objective(layers, docs, ObjectiveConfig(kind="full", dims=[4, 8], target_dim=4))
    assert full.total.item() == pytest.approx(info_nce(layers.last, docs.last, 0.05).item())
    mse = compute_objective(layers, docs, ObjectiveConfig(kind="mse", dims=[4, 8], target_dim=4))
    assert set(mse.parts) == {"matryoshka"}
    v1 = compute_objective(layers, docs, ObjectiveConfig(kind="v1", dims=[4, 8], target_dim=4), np.random.default_rng(0))
    assert v1.parts["sublayer"] == 1.0


def test_partial_teacher_against_constant_targets_still_trains_the_student():
    rng = np.random.default_rng(17)
    targets = sim_distribution(constant(rng.normal(size=(4, 3))), constant(rng.normal(size=(4, 3))), 0.5)
    q, d = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(4, 3)))
    student = sim_distribution(q, d, 0.5)
    config = ObjectiveConfig(kind="v2", dims=[3], target_dim=3, kld_teacher="partial")

    divergence = distill(targets, student, config)
    assert divergence.item() == pytest.approx(kld(student, targets).item(), abs=1e-12)
    assert divergence.item() != pytest.approx(kld(targets, student).item(), abs=1e-6)
    backward(divergence)
    assert np.any(q.grad) and np.any(d.grad)


def test_v2_dim_loss_draws_targets_from_pca_targets(monkeypatch):
    calls = []
    real = objectives_module.pca_targets

    def recording(embeddings, k, fit_rows=None):
        calls.append((k, list(fit_rows)))
        return real(embeddings, k, fit_rows)

    monkeypatch.setattr(objectives_module, "pca_targets", recording)
    rng = np.random.default_rng(18)
    config = ObjectiveConfig(kind="v2", dims=[2, 4], target_dim=2, plus_dims=True, fix_doc=True)
    v2_dim_loss(random_layers(rng, 3, 4, 8), random_layers(rng, 3, 4, 8), config)
    assert calls == [(2, [4, 4, None]), (4, [4, 4, None])]


def test_fix_doc_dim_loss_fits_sub_layers_on_queries_and_skips_their_documents():
    rng = np.random.default_rng(19)
    q1, q2, d1, d2 = (rng.normal(size=(4, 8)) for _ in range(4))
    tau = 0.5
    config = ObjectiveConfig(kind="v2", dims=[4, 8], target_dim=4, fix_doc=True, temperature=tau)
    queries, docs = _layers(q1, q2), _layers(d1, d2)
    loss = v2_dim_loss(queries, docs, config)

    def term(q, d, fit_rows, with_docs):
        target = pca.project_top_k(np.concatenate([q, d]), 4, fit_rows)
        target_q, target_d = target[:4], target[4:]
        if with_docs:
            mse = np.mean((np.concatenate([q[:, :4], d[:, :4]]) - target) ** 2)
        else:
            mse = np.mean((q[:, :4] - target_q) ** 2)
        divergence = kld(
            sim_distribution(constant(target_q), constant(target_d), tau),
            sim_distribution(constant(q[:, :4]), constant(d[:, :4]), tau),
        )
        return mse + divergence.item()

    # every term pairs its queries with the last-layer documents
    expected = layer_weight(1, 2) * term(q1, d2, 4, False) + term(q2, d2, None, True)
    assert loss.item() == pytest.approx(expected, abs=1e-10)

    backward(loss)
    assert docs.layer(1).grad is None or not np.any(docs.layer(1).grad)
    assert np.any(docs.layer(2).grad)


@pytest.mark.parametrize("loss_fn", [score_alignment_loss, v2_dim_loss])
def test_columns_past_the_target_dim_get_no_gradient(loss_fn):
    # the full-width side only ever acts as a detached teacher or a constant target
    rng = np.random.default_rng(20)
    queries, docs = random_layers(rng, 2, 4, 8), random_layers(rng, 2, 4, 8)
    config = ObjectiveConfig(kind="v2", dims=[4, 8], target_dim=4)
    backward(loss_fn(queries, docs, config))
    for node in (*queries.layers, *docs.layers):
        assert np.any(node.grad[:, :4])
        assert not np.any(node.grad[:, 4:])


@pytest.mark.parametrize("fix_doc", [False, True])
def test_v2_dim_loss_on_batches_smaller_than_the_target_dim(fix_doc):
    rng = np.random.default_rng(21)
    config = ObjectiveConfig(kind="v2", dims=[2, 4, 8], target_dim=4, plus_dims=True, fix_doc=fix_doc)
    for rows in (1, 2, 3):
        queries, docs = random_layers(rng, 2, rows, 8), random_layers(rng, 2, rows, 8)
        loss = v2_dim_loss(queries, docs, config)
        assert np.isfinite(loss.item())
        backward(loss)
        assert all(np.all(np.isfinite(node.grad)) for node in queries.layers)


def test_v2_dim_loss_on_identical_rows_uses_zero_targets():
    row = np.array([[1.0, 2.0, 0.5, -1.0]])
    same = np.repeat(row, 3, axis=0)
    config = ObjectiveConfig(kind="v2", dims=[2, 4], target_dim=2)
    loss = v2_dim_loss(_layers(same, same), _layers(same, same), config)
    # zero targets leave only the MSE of the student prefix, 0.5 * (1 + 4)
    assert loss.item() == pytest.approx((layer_weight(1, 2) + 1.0) * 2.5, abs=1e-12)
