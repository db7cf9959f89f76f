import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from genemamba.bimamba import ModelConfig, build_model, make_batch
from genemamba.corpus import build_vocab
from genemamba.errors import InputError, NumericError
from genemamba.objectives import (
    LossConfig,
    PathwaySet,
    batch_loss,
    gradients,
    infonce_pathway,
    next_gene_nll,
    next_token_targets,
    pairwise_cosine,
    pooled_gene_embeddings,
    total_loss,
)

D = torch.float64


def nll_oracle(logits, targets, mask):
    total, count = 0.0, 0
    for b in range(logits.shape[0]):
        for t in range(logits.shape[1]):
            if mask[b, t]:
                row = logits[b, t].tolist()
                lse = math.log(sum(math.exp(v) for v in row))
                total += lse - row[targets[b, t]]
                count += 1
    return total / count


def infonce_oracle(emb, positives, tau):
    n = len(emb)
    cos = [[float(np.dot(emb[i], emb[j]) / np.linalg.norm(emb[i]) / np.linalg.norm(emb[j])) for j in range(n)]
           for i in range(n)]
    terms = []
    for i in range(n):
        for j in range(n):
            if i != j and positives[i][j]:
                denom = sum(math.exp(cos[i][k] / tau) for k in range(n) if k != i)
                terms.append(-math.log(math.exp(cos[i][j] / tau) / denom))
    return sum(terms) / len(terms)


def test_nll_examples():
    v = 7
    logits = torch.zeros(1, 3, v, dtype=D)
    targets = torch.tensor([[1, 2, 3]])
    mask = torch.ones(1, 3, dtype=torch.bool)
    assert next_gene_nll(logits, targets, mask).item() == pytest.approx(math.log(v), abs=1e-14)
    big = torch.zeros(1, 1, v, dtype=D)
    big[0, 0, 4] = 100.0
    assert next_gene_nll(big, torch.tensor([[4]]), torch.ones(1, 1, dtype=torch.bool)).item() < 1e-40
    with pytest.raises(InputError):
        next_gene_nll(logits, targets, torch.zeros_like(mask))


def test_nll_matches_dense_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 3, 5, generator=g, dtype=D)
    targets = torch.randint(0, 5, (2, 3), generator=g)
    mask = torch.tensor([[True, True, False], [True, False, False]])
    assert next_gene_nll(logits, targets, mask).item() == pytest.approx(nll_oracle(logits, targets, mask), abs=1e-12)


def test_targets_shift_within_valid_region():
    tokens, mask = make_batch([[5, 6, 7], [8]])
    targets, tmask = next_token_targets(tokens, mask)
    assert targets[0, :3].tolist() == [5, 6, 7]
    assert tmask.tolist() == [[True, True, True, False], [True, False, False, False]]


def test_cosine_examples():
    v = torch.tensor([[1.0, 2.0], [1.0, 2.0], [-2.0, 1.0], [-1.0, -2.0]], dtype=D)
    c = pairwise_cosine(v)
    assert c[0, 1].item() == pytest.approx(1.0)
    assert c[0, 2].item() == pytest.approx(0.0, abs=1e-15)
    assert c[0, 3].item() == pytest.approx(-1.0)
    assert torch.allclose(torch.diagonal(c), torch.ones(4, dtype=D))
    with pytest.raises(InputError):
        pairwise_cosine(torch.zeros(2, 2))


@given(st.integers(0, 1000))
def test_cosine_scale_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    e = torch.randn(5, 4, generator=g, dtype=D)
    s = torch.rand(5, 1, generator=g, dtype=D) * 10 + 0.1
    assert torch.allclose(pairwise_cosine(e), pairwise_cosine(e * s), atol=1e-13)


def test_infonce_examples():
    pos = torch.tensor([[False, True], [True, False]])
    e = torch.randn(2, 3, dtype=D)
    assert infonce_pathway(e, pos, 0.1).item() == pytest.approx(0.0, abs=1e-14)
    e = torch.randn(5, 3, dtype=D)
    pos = torch.zeros(5, 5, dtype=torch.bool)
    pos[0, 1] = pos[1, 0] = True
    assert infonce_pathway(e, pos, 1e9).item() == pytest.approx(math.log(4), abs=1e-7)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert infonce_pathway(e, torch.zeros(5, 5, dtype=torch.bool), 0.1).item() == 0.0
    assert w
    with pytest.raises(InputError):
        infonce_pathway(e, pos, 0.0)


@given(st.integers(0, 1000), st.floats(0.05, 2.0))
def test_infonce_matches_oracle(seed, tau):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(6, 4))
    groups = rng.integers(0, 2, size=6)
    pos = torch.tensor(groups[:, None] == groups[None, :])
    pos.fill_diagonal_(False)
    if not bool(pos.any()):
        return
    got = infonce_pathway(torch.tensor(emb), pos, tau).item()
    assert got == pytest.approx(infonce_oracle(emb, pos.tolist(), tau), abs=1e-12)


def test_infonce_optimization_separates_pathways():
    torch.manual_seed(0)
    groups = torch.tensor([0, 0, 0, 1, 1, 1, 2, 2, 2])
    pos = groups[:, None] == groups[None, :]
    pos.fill_diagonal_(False)
    emb = torch.randn(9, 6, dtype=D, requires_grad=True)
    opt = torch.optim.Adam([emb], lr=0.05)
    for _ in range(100):
        opt.zero_grad()
        infonce_pathway(emb, pos, 0.1).backward()
        opt.step()
    c = pairwise_cosine(emb.detach())
    off = ~torch.eye(9, dtype=torch.bool)
    assert c[pos].mean() > c[~pos & off].mean()


def test_total_loss_examples():
    assert total_loss(2.0, 3.0, LossConfig(0.0, 0.1)) == 2.0
    assert total_loss(2.0, 3.0, LossConfig(0.1, 0.1)) == pytest.approx(2.3)
    assert total_loss(2.0, 3.0, LossConfig(1.0, 0.1)) == 5.0
    with pytest.raises(InputError):
        LossConfig(-1.0, 0.1)
    with pytest.raises(InputError):
        LossConfig(0.1, 0.0)


@given(st.floats(0, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_total_loss_affine(gamma, a, b):
    cfg = LossConfig(gamma, 0.1)
    assert total_loss(1.0, b, cfg) - total_loss(1.0, a, cfg) == pytest.approx(gamma * (b - a), abs=1e-12)


def test_pathway_set_relation(tmp_path):
    ps = PathwaySet({2: {"p"}, 3: {"p", "q"}, 4: {"q"}, 5: {"r"}})
    assert ps.positive(2, 3) and ps.positive(3, 4) and not ps.positive(2, 4)
    assert not ps.positive(2, 2)
    m = ps.positive_matrix([2, 3, 4, 5, 9])
    assert torch.equal(m, m.T) and not bool(torch.diagonal(m).any())
    vocab = build_vocab(["a", "b", "c", "d"])
    (tmp_path / "p.tsv").write_text("a\tp\nb\tp\nb\tq\nzz\tq\n")
    loaded = PathwaySet.load(tmp_path / "p.tsv", vocab)
    assert loaded.pathways() == {"p": [2, 3], "q": [3]}


def test_pooled_embeddings_average_occurrences():
    tokens, mask = make_batch([[4, 5], [5, 6]])
    hidden = torch.arange(2 * 3 * 2, dtype=D).view(2, 3, 2)
    genes, emb = pooled_gene_embeddings(hidden, tokens, mask)
    assert genes.tolist() == [4, 5, 6]
    assert torch.equal(emb[1], (hidden[0, 2] + hidden[1, 1]) / 2)


@pytest.fixture(scope="module")
def small():
    model = build_model(ModelConfig(vocab_size=20, d_model=8, n_layers=1, d_state=2), seed=0)
    tokens, mask = make_batch([[4, 5, 6, 7], [6, 4, 9]])
    return model, tokens, mask, PathwaySet({4: {"a"}, 5: {"a"}, 6: {"b"}, 9: {"b"}})


def test_gate_bias_gradient_matches_finite_difference(small):
    model, tokens, mask, _ = small
    cfg = LossConfig(0.0, 0.1)
    with torch.no_grad():
        model.blocks[0].gate.weight.zero_()
    grads = gradients(model, tokens, mask, None, cfg)
    bias = model.blocks[0].gate.bias
    eps = 1e-5
    with torch.no_grad():
        for i in range(bias.numel()):
            old = bias[i].item()
            bias[i] = old + eps
            lp = batch_loss(model, tokens, mask, None, cfg).total.item()
            bias[i] = old - eps
            lm = batch_loss(model, tokens, mask, None, cfg).total.item()
            bias[i] = old
            num = (lp - lm) / (2 * eps)
            ana = grads["blocks.0.gate.bias"][i].item()
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-5)


def test_unused_vocab_rows_get_zero_gradient(small):
    model, tokens, mask, pw = small
    grads = gradients(model, tokens, mask, pw, LossConfig())
    emb = grads["embedding.weight"]
    assert bool((emb[15] == 0).all())
    assert bool((emb[4] != 0).any())


def test_gradients_deterministic(small):
    model, tokens, mask, pw = small
    a = gradients(model, tokens, mask, pw, LossConfig())
    b = gradients(model, tokens, mask, pw, LossConfig())
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_descent_step_reduces_loss(small):
    model, tokens, mask, pw = small
    cfg = LossConfig()
    for trial in range(3):
        before = batch_loss(model, tokens, mask, pw, cfg).total.item()
        grads = gradients(model, tokens, mask, pw, cfg)
        with torch.no_grad():
            for name, p in model.named_parameters():
                p -= 1e-4 * grads[name]
        assert batch_loss(model, tokens, mask, pw, cfg).total.item() <= before


def test_non_finite_loss_reported(small):
    model, tokens, mask, pw = small
    m2 = build_model(model.config, seed=1)
    with torch.no_grad():
        m2.head.bias[3] = float("nan")
    with pytest.raises(NumericError):
        gradients(m2, tokens, mask, pw, LossConfig())
