import math
from dataclasses import replace

import numpy as np
import pytest

from atmc.attacks import AttackConfig, NO_ATTACK
from atmc.baselines import (
    PipelineSpec,
    low_rank_factorize,
    pretrain,
    rank_fraction_for_ratio,
    run_al0,
    run_alr,
    run_ap,
    run_atmc,
    run_atmc_uniform_pq,
    run_nap,
    run_pipeline,
    storage_bits,
)
from atmc.model import count_distinct_nonzero, forward, get_arch, init_factorized, lenet
from atmc.projections import (
    CompressionConfig,
    is_feasible_quant,
    is_feasible_sparsity,
    project_topk_global,
    support_masks,
)
from atmc.trainer import TrainConfig, train_adversarial, train_atmc

ATK = AttackConfig("pgd", 0.1, 2)
FAST = TrainConfig(batch_size=32, lr=0.05, momentum=0.9)


def spec(kind, **kw):
    base = dict(arch="mlp-small", epochs=2, attack=ATK, train=FAST)
    base.update(kw)
    return PipelineSpec(kind, **base)


@pytest.fixture(scope="module")
def data(toy_data):
    return toy_data.subset(128, 64)


@pytest.fixture(scope="module")
def dense_da(data):
    return pretrain(spec("da"), data, adversarial=True)


def same(a, b):
    return a.flat().tobytes() == b.flat().tobytes()


def test_spec_validation():
    with pytest.raises(ValueError):
        PipelineSpec("prune")
    with pytest.raises(ValueError):
        PipelineSpec("ap", ratio=0)
    with pytest.raises(ValueError):
        PipelineSpec("ap", ratio=1.5)
    with pytest.raises(ValueError):
        PipelineSpec("atmc", bits=0)
    assert PipelineSpec("ap", epochs=10).ft_epochs == 5
    assert PipelineSpec("ap", ratio=0.05).budget(lenet()) == math.floor(0.05 * 430_500)


def test_nap_full_ratio_is_plain_training(data):
    s = spec("nap")
    plain = train_adversarial(init_factorized(get_arch("mlp-small"), 0, factorized=False), data,
                              replace(FAST, epochs=2, attack=NO_ATTACK))
    assert same(run_nap(s, data), plain)


def test_ap_full_ratio_is_da(data, dense_da):
    assert same(run_ap(spec("ap"), data), dense_da)
    assert same(run_pipeline(spec("da"), data), dense_da)


@pytest.mark.parametrize("runner,kind", [(run_nap, "nap"), (run_ap, "ap"), (run_al0, "al0")])
def test_pruned_pipelines_meet_budget(runner, kind, data, dense_da):
    s = spec(kind, ratio=0.1)
    out = runner(s, data, dense_da)
    total = get_arch("mlp-small").n_weights()
    assert out.total_nnz() <= math.floor(0.1 * total)
    assert all(t.U is None and t.C is None for t in out.layers)


def test_ap_support_never_regrows(data, dense_da):
    s = spec("ap", ratio=0.2)
    out = run_ap(s, data, dense_da)
    start = support_masks(project_topk_global(dense_da, s.budget(dense_da.arch)))
    for key, mask in support_masks(out).items():
        assert not np.any(mask & ~start[key])


def test_al0_full_budget_is_continued_da(data, dense_da):
    s = spec("al0")
    ref = train_adversarial(dense_da, data, s.train_config(s.ft_epochs, ATK))
    assert same(run_al0(s, data, dense_da), ref)


def test_low_rank_full_fraction_reproduces_logits(dense_da, data):
    fact, masks = low_rank_factorize(dense_da, 1.0)
    x = data.x_test
    np.testing.assert_allclose(forward(fact, x).data, forward(dense_da, x).data, rtol=0, atol=1e-8)


@pytest.mark.parametrize("fraction", [0.1, 0.25, 0.5])
def test_low_rank_eckart_young(dense_da, fraction):
    fact, masks = low_rank_factorize(dense_da, fraction)
    for t, td in zip(fact.layers, dense_da.layers):
        w = td.V.data
        m, n = w.shape
        r = math.ceil(fraction * n)
        err = np.sum((t.U.data @ t.V.data + t.C.data - w) ** 2)
        # tail energy from the eigenvalues of W^T W, not from an SVD
        eig = np.sort(np.linalg.eigvalsh(w.T @ w))[::-1]
        assert err == pytest.approx(np.sum(eig[r:]), rel=1e-6, abs=1e-10)
        assert np.count_nonzero(t.U.data) + np.count_nonzero(t.V.data) == r * (m + n)


def test_low_rank_rejects_bad_fraction(dense_da):
    with pytest.raises(ValueError):
        low_rank_factorize(dense_da, 0.0)


def test_alr_keeps_rank_during_finetune(data, dense_da):
    out = run_alr(spec("alr", ratio=0.25), data, dense_da)
    for t in out.layers:
        r = math.ceil(0.25 * t.V.shape[1])
        assert not np.any(t.U.data[:, r:]) and not np.any(t.V.data[r:]) and not np.any(t.C.data)
        assert np.linalg.matrix_rank(t.U.data @ t.V.data) <= r


def test_rank_fraction_for_ratio_fits_budget():
    arch = lenet()
    for ratio in (0.01, 0.05, 0.2):
        f = rank_fraction_for_ratio(arch, ratio)
        shapes = [sorted(l.raw_shape, reverse=True) for l in arch.weighted_layers()]
        cost = sum(min(n, math.ceil(f * n)) * (m + n) for m, n in shapes)
        assert cost <= ratio * arch.n_weights()


def test_atmc_outputs_are_feasible(data):
    s = spec("atmc", ratio=0.2, bits=2)
    out = run_atmc(s, data)
    assert is_feasible_sparsity(out, s.budget(out.arch)) and is_feasible_quant(out, 2)
    assert all(t.U is not None for t in out.layers)


def test_atmc_uniform_pq_reuses_atmc32(data):
    s = spec("atmc_uniform_pq", ratio=0.2, bits=3)
    base = run_atmc(spec("atmc", ratio=0.2, bits=32), data)
    out = run_atmc_uniform_pq(s, data, atmc32=base, bits=3)
    assert is_feasible_quant(out, 3)
    assert out.total_nnz() <= base.total_nnz()
    assert all(count_distinct_nonzero(m) <= 8 for _, _, m in out.matrices())
    assert storage_bits(s) == 3 and storage_bits(spec("atmc_uniform_pq")) == 8


def test_atmc_without_constraints_is_factorized_adversarial_training(data):
    theta = init_factorized(get_arch("mlp-small"), 0)
    cfg = TrainConfig(epochs=2, batch_size=32, lr=0.05, attack=ATK, compression=CompressionConfig(k=None, b=32, rho=0))
    admm, plain = [], []
    train_atmc(theta, data, cfg, callback=lambda s, i: admm.append(i["loss"]))
    train_adversarial(theta, data, cfg, callback=lambda m, i: plain.append(i["loss"]))
    assert max(abs(a - b) for a, b in zip(admm, plain)) <= 1e-6


def test_storage_bits():
    assert storage_bits(PipelineSpec("ap")) == 32
    assert storage_bits(PipelineSpec("atmc", bits=8)) == 8
