import math

import numpy as np
import pytest
import torch

from oracles import central_difference, gradients_match, relative_error
from tagssl.encoders import (
    Document,
    EmbeddingMatrix,
    GnnConfig,
    GraphEncoder,
    PlmConfig,
    TextEncoder,
    TokenSequence,
    build_vocab,
    compute_initial_features,
    gnn_encode,
    load_embeddings,
    plm_encode,
    save_embeddings,
    tokenize,
)
from tagssl.graph import TagGraph, generate_synthetic_tag


def graph_from_edges(n, edges):
    docs = [Document(i, f"w{i}") for i in range(n)]
    return TagGraph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), docs)


class TestVocab:
    def test_min_frequency_one(self):
        v = build_vocab(["a b", "a c"], 1)
        assert len(v) == 6
        assert {"a", "b", "c"} <= set(v.tokens)
        assert v.tokens[3] == "a"  # most frequent first

    def test_min_frequency_two(self):
        v = build_vocab(["a b", "a c"], 2)
        assert "a" in v and "b" not in v
        assert v.id("b") == v.unk_id == v.id("c")

    def test_permuted_corpus_same_vocab(self):
        assert build_vocab(["x y z", "y z", "q"]) == build_vocab(["q", "y z", "x y z"])

    def test_empty(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_reserved_ids_distinct_and_dense(self):
        v = build_vocab(["Hello world"])
        assert len({v.pad_id, v.unk_id, v.cls_id}) == 3
        assert sorted(v.id(t) for t in v.tokens) == list(range(len(v)))


class TestTokenize:
    v = build_vocab(["a b", "a c"])

    def test_basic(self):
        assert tokenize("a b", self.v, 8).ids == (self.v.cls_id, self.v.id("a"), self.v.id("b"))

    def test_unknown(self):
        assert tokenize("A z", self.v, 8).ids == (self.v.cls_id, self.v.id("a"), self.v.unk_id)

    def test_truncation(self):
        seq = tokenize(" ".join(["a"] * 100), self.v, 8)
        assert len(seq.ids) == 8 and seq.attention_length == 8 and seq.ids[0] == self.v.cls_id

    def test_document_tokens_filled(self):
        doc = Document(0, "b c")
        tokenize(doc, self.v, 8)
        assert doc.tokens == [self.v.cls_id, self.v.id("b"), self.v.id("c")]


def tiny_encoder(dim=8, layers=2, heads=2, vocab=20, max_len=10, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    enc = TextEncoder(PlmConfig(vocab, dim, layers, heads, max_len, dropout_rate=0.0)).to(dtype)
    enc.eval()
    return enc


class TestPlmEncode:
    def test_shape_and_finite(self):
        enc = tiny_encoder()
        seqs = [TokenSequence((2, 5, 6), 3), TokenSequence((2, 7), 2), TokenSequence((2,), 1)]
        out = plm_encode(seqs, enc)
        assert out.shape == (3, 8)
        assert torch.isfinite(out).all()

    def test_duplicate_rows_identical(self):
        enc = tiny_encoder()
        seqs = [TokenSequence((2, 5, 6), 3), TokenSequence((2, 9), 2), TokenSequence((2, 5, 6), 3)]
        out = plm_encode(seqs, enc)
        assert torch.equal(out[0], out[2])

    def test_too_long(self):
        enc = tiny_encoder(max_len=4)
        with pytest.raises(ValueError, match="max_sequence_length"):
            plm_encode([TokenSequence((2, 3, 4, 5, 6), 5)], enc)

    def test_padding_invariance(self):
        enc = tiny_encoder(dim=16, heads=4)
        ids = torch.tensor([[2, 5, 6, 7]])
        mask = torch.ones_like(ids, dtype=torch.bool)
        base = enc(ids, mask)
        for extra in (1, 3, 6):
            padded = torch.cat([ids, torch.zeros((1, extra), dtype=torch.long)], dim=1)
            pmask = torch.cat([mask, torch.zeros((1, extra), dtype=torch.bool)], dim=1)
            assert torch.allclose(enc(padded, pmask), base, atol=1e-6, rtol=0)

    @pytest.mark.parametrize("tokens", [(2,), (2, 4, 7)])
    def test_matches_hand_unrolled_forward(self, tokens):
        enc = tiny_encoder(dim=4, layers=1, heads=1, vocab=10, max_len=6, seed=3)
        got = plm_encode([TokenSequence(tokens, len(tokens))], enc)[0].detach().numpy()
        np.testing.assert_allclose(got, _manual_forward(enc, tokens), atol=1e-12)


def _np(t):
    return t.detach().numpy().astype(np.float64)


def _layer_norm(x, ln):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * _np(ln.weight) + _np(ln.bias)


def _gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def _manual_forward(enc, tokens):
    """Single-head, single-layer forward written out step by step."""
    layer = enc.layers[0]
    att = layer.attention
    x = np.stack([_np(enc.token_embedding.weight[t]) + _np(enc.position_embedding.weight[p])
                  for p, t in enumerate(tokens)])
    q = x @ _np(att.query.weight).T + _np(att.query.bias)
    k = x @ _np(att.key.weight).T + _np(att.key.bias)
    v = x @ _np(att.value.weight).T + _np(att.value.bias)
    scores = q @ k.T / math.sqrt(x.shape[1])
    w = np.exp(scores - scores.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    attn = (w @ v) @ _np(att.out.weight).T + _np(att.out.bias)
    x = _layer_norm(x + attn, layer.attn_norm)
    h = _gelu(x @ _np(layer.ffn_in.weight).T + _np(layer.ffn_in.bias))
    h = h @ _np(layer.ffn_out.weight).T + _np(layer.ffn_out.bias)
    x = _layer_norm(x + h, layer.ffn_norm)
    return x[0]


def _identity_gnn(dim, layers=1):
    gnn = GraphEncoder([dim] * (layers + 1), GnnConfig(num_layers=layers, hidden_dim=dim, activation="identity"))
    return gnn.double()


class TestGnnEncode:
    def test_isolated_node_reduces_to_features(self):
        g = graph_from_edges(1, [])
        gnn = _identity_gnn(3)
        with torch.no_grad():
            gnn.layers[0].lin_self.weight.copy_(torch.eye(3))
            gnn.layers[0].lin_self.bias.zero_()
            gnn.layers[0].lin_neigh.weight.zero_()
        x = torch.tensor([[0.5, -1.0, 2.0]], dtype=torch.float64)
        assert torch.equal(gnn_encode(x, g, [0], gnn), x)

    def test_path_mean_aggregation(self):
        g = graph_from_edges(3, [(0, 1), (1, 2)])
        gnn = _identity_gnn(1)
        with torch.no_grad():
            gnn.layers[0].lin_self.weight.fill_(1.0)
            gnn.layers[0].lin_self.bias.zero_()
            gnn.layers[0].lin_neigh.weight.fill_(1.0)
        x = torch.tensor([[1.0], [2.0], [3.0]], dtype=torch.float64)
        out = gnn_encode(x, g, None, gnn)
        # node 1: 2 + mean(1, 3) = 4; node 0: 1 + 2; node 2: 3 + 2
        assert out[:, 0].tolist() == [3.0, 4.0, 5.0]

    def test_subgraph_pass_equals_full_pass(self):
        g = generate_synthetic_tag(num_classes=2, nodes_per_class=10, p_in=0.3, p_out=0.05, seed=4)
        torch.manual_seed(0)
        gnn = GraphEncoder([5, 6, 7], GnnConfig(num_layers=2, hidden_dim=6)).double()
        x = torch.randn(20, 5, dtype=torch.float64)
        full = gnn_encode(x, g, None, gnn)
        for v in range(20):
            np.testing.assert_allclose(gnn_encode(x, g, [v], gnn)[0].detach(), full[v].detach(), atol=1e-12)
        some = [3, 17, 0]
        np.testing.assert_allclose(gnn_encode(x, g, some, gnn).detach(), full[some].detach(), atol=1e-12)

        # recursive per-node evaluation straight from the layer formula
        weights = [(_np(l.lin_self.weight), _np(l.lin_self.bias), _np(l.lin_neigh.weight)) for l in gnn.layers]
        feats = _np(x)

        def node_rep(i, depth):
            if depth == 0:
                return feats[i]
            ws, b, wn = weights[depth - 1]
            nbrs = g.neighbors[i].tolist()
            mean = sum(node_rep(j, depth - 1) for j in nbrs) / len(nbrs) if nbrs else np.zeros(ws.shape[1])
            h = ws @ node_rep(i, depth - 1) + b + wn @ mean
            return np.maximum(h, 0) if depth < len(weights) else h

        for v in range(20):
            np.testing.assert_allclose(full[v].detach().numpy(), node_rep(v, 2), atol=1e-10)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        g = generate_synthetic_tag(num_classes=5, nodes_per_class=10, p_in=0.3, p_out=0.05, seed=9)
        perm = rng.permutation(50)  # new id of old node i is perm[i]
        inv = np.argsort(perm)
        gp = graph_from_edges(50, perm[g.edges])
        torch.manual_seed(1)
        gnn = GraphEncoder([4, 8, 4], GnnConfig(num_layers=2, hidden_dim=8)).double()
        x = torch.randn(50, 4, dtype=torch.float64)
        out = gnn_encode(x, g, None, gnn)
        out_p = gnn_encode(x[torch.from_numpy(inv)], gp, None, gnn)
        np.testing.assert_allclose(out_p[torch.from_numpy(perm)].detach(), out.detach(), atol=1e-6)

    def test_out_of_range(self):
        g = graph_from_edges(2, [(0, 1)])
        with pytest.raises(IndexError):
            gnn_encode(torch.zeros(2, 3), g, [5], GraphEncoder([3, 3], GnnConfig(num_layers=1)))

    def test_feature_row_mismatch(self):
        g = graph_from_edges(2, [(0, 1)])
        with pytest.raises(ValueError):
            gnn_encode(torch.zeros(3, 3), g, [0], GraphEncoder([3, 3], GnnConfig(num_layers=1)))


def test_encoder_gradients_match_finite_differences():
    g = graph_from_edges(4, [(0, 1), (1, 2), (2, 3)])
    text = tiny_encoder(dim=4, layers=1, heads=1, vocab=8, max_len=5, seed=2)
    torch.manual_seed(5)
    gnn = GraphEncoder([4, 4], GnnConfig(num_layers=1, hidden_dim=4, activation="gelu", final_activation=True)).double()
    seqs = [TokenSequence((2, 3, 4), 3), TokenSequence((2, 5), 2), TokenSequence((2, 6, 7, 3), 4)]
    x = torch.randn(4, 4, dtype=torch.float64)
    target = torch.randn(7, 4, dtype=torch.float64)

    def loss():
        out = torch.cat([plm_encode(seqs, text), gnn_encode(x, g, [0, 1, 2, 3], gnn)])
        return ((out - target) ** 2 * torch.arange(1, 8, dtype=torch.float64)[:, None]).sum()

    params = list(text.named_parameters()) + [("gnn." + n, p) for n, p in gnn.named_parameters()]
    for _, p in params:
        p.grad = None
    loss().backward()
    for name, p in params:
        analytic = p.grad.detach().numpy().copy()
        data = p.data.numpy()

        def f():
            with torch.no_grad():
                return float(loss())

        numeric = central_difference(f, data)
        assert gradients_match(analytic, numeric), (name, relative_error(analytic, numeric))


class TestInitialFeatures:
    def setup_method(self):
        self.g = generate_synthetic_tag(num_classes=3, nodes_per_class=1, seed=0)
        self.v = build_vocab(self.g.documents)
        torch.manual_seed(0)
        self.enc = TextEncoder(PlmConfig(len(self.v), 8, 1, 2, 16))

    def test_shape(self):
        m, hit = compute_initial_features(self.g, self.enc, self.v)
        assert m.values.shape == (3, 8) and not hit
        assert m.role == "initial_features"

    def test_recompute_bit_identical_cache(self, tmp_path):
        compute_initial_features(self.g, self.enc, self.v, tmp_path / "a.emb")
        self.enc.train()  # dropout must not leak into frozen features
        compute_initial_features(self.g, self.enc, self.v, tmp_path / "b.emb")
        assert (tmp_path / "a.emb").read_bytes() == (tmp_path / "b.emb").read_bytes()
        _, hit = compute_initial_features(self.g, self.enc, self.v, tmp_path / "a.emb")
        assert hit

    def test_cache_node_count_mismatch(self, tmp_path):
        big = generate_synthetic_tag(num_classes=5, nodes_per_class=1, seed=0)
        m, _ = compute_initial_features(big, TextEncoder(PlmConfig(len(build_vocab(big.documents)), 8, 1, 2, 16)),
                                        build_vocab(big.documents), tmp_path / "c.emb")
        with pytest.raises(ValueError, match="rows"):
            compute_initial_features(self.g, self.enc, self.v, tmp_path / "c.emb")
        with pytest.raises(ValueError, match="rows"):
            load_embeddings(tmp_path / "c.emb", expected_nodes=6)


def test_embedding_file_roundtrip(tmp_path):
    values = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
    save_embeddings(tmp_path / "x.emb", EmbeddingMatrix(values, "exported", "abc"))
    back = load_embeddings(tmp_path / "x.emb")
    assert back.role == "exported" and back.fingerprint == "abc"
    assert np.array_equal(back.values, values)


def test_embedding_matrix_rejects_non_finite():
    with pytest.raises(ValueError):
        EmbeddingMatrix(np.array([[np.nan]]), "exported")


def test_config_validation():
    with pytest.raises(ValueError):
        PlmConfig(10, hidden_dim=10, num_heads=3)
    with pytest.raises(ValueError):
        GnnConfig(num_layers=0)
    with pytest.raises(ValueError):
        GnnConfig(aggregator="max")
