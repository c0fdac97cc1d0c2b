import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from scipy.special import erf

from erba import emb
from erba.backbone import (
    AMINO_ACIDS,
    GeometryFeaturizerParams,
    GeometryInput,
    GeometryInputError,
    SurrogateEncoderParams,
    VocabularyError,
    dropout_mask,
    encode_enzyme,
    encode_geometry,
    encode_substrate,
    geometry_features,
    init_adapters,
    load_embeddings,
    tokenize_enzyme,
    tokenize_substrate,
)
from erba.diffcore import ModelParams, Tensor
from erba.emb import FormatError

D = 8


@pytest.fixture
def encoder():
    p = ModelParams()
    enc = SurrogateEncoderParams.init(p, D, 2, np.random.default_rng(0), max_length=32)
    return p, enc


class TestTokenizers:
    def test_enzyme(self):
        assert tokenize_enzyme("ACx") == [0, 1, AMINO_ACIDS.index("X")]

    def test_unknown_token_reports_position(self):
        with pytest.raises(VocabularyError) as err:
            tokenize_enzyme("ACZ")
        assert err.value.position == 2

    def test_substrate_rejects_whitespace(self):
        assert len(tokenize_substrate("C(=O)O")) == 6
        with pytest.raises(VocabularyError):
            tokenize_substrate("C C")


class TestEncodeEnzyme:
    def test_fresh_adapters_are_noop(self, encoder):
        p, enc = encoder
        ads = init_adapters(p, 2, D, np.random.default_rng(1))
        toks = tokenize_enzyme("MKTAYIAKQR")
        base = encode_enzyme(toks, enc)
        for train in (False, True):
            out = encode_enzyme(toks, enc, ads, train_mode=train, dropout_seed=3)
            assert out.data.tobytes() == base.data.tobytes()

    def test_length_one(self, encoder):
        _, enc = encoder
        assert encode_enzyme([4], enc).shape == (1, D)

    def test_eval_mode_is_deterministic(self, encoder):
        p, enc = encoder
        ads = init_adapters(p, 2, D, np.random.default_rng(1))
        for a in ads:
            a.q.up.data[...] = 0.1
        toks = tokenize_enzyme("MKTAYIAK")
        a = encode_enzyme(toks, enc, ads)
        b = encode_enzyme(toks, enc, ads)
        assert a.data.tobytes() == b.data.tobytes()

    def test_dropout_only_in_train_mode(self, encoder):
        p, enc = encoder
        ads = init_adapters(p, 2, D, np.random.default_rng(1))
        for a in ads:
            a.v.up.data[...] = np.random.default_rng(2).normal(size=a.v.up.shape)
        toks = tokenize_enzyme("MKTAYIAK")
        ev = encode_enzyme(toks, enc, ads).data
        tr1 = encode_enzyme(toks, enc, ads, train_mode=True, dropout_seed=5).data
        tr2 = encode_enzyme(toks, enc, ads, train_mode=True, dropout_seed=5).data
        tr3 = encode_enzyme(toks, enc, ads, train_mode=True, dropout_seed=6).data
        assert tr1.tobytes() == tr2.tobytes()
        assert not np.array_equal(ev, tr1)
        assert not np.array_equal(tr1, tr3)

    def test_too_long(self, encoder):
        _, enc = encoder
        with pytest.raises(ValueError):
            encode_enzyme([0] * 33, enc)

    def test_backbone_is_frozen(self, encoder):
        p, _ = encoder
        assert all(p.is_frozen(n) for n in p.names())


class TestDropoutMask:
    def test_keyed_and_rate(self):
        a = dropout_mask(1, 0, 0, (200, 50), 0.1)
        assert a.tobytes() == dropout_mask(1, 0, 0, (200, 50), 0.1).tobytes()
        assert not np.array_equal(a, dropout_mask(1, 1, 0, (200, 50), 0.1))
        assert abs(1.0 - a.mean() - 0.1) < 0.01


class TestEncodeSubstrate:
    def test_lookup(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = encode_substrate([0, 0, 0], table)
        np.testing.assert_array_equal(out.data, np.tile(table.data[0], (3, 1)))
        assert encode_substrate([2], table).shape == (1, 3)
        np.testing.assert_array_equal(encode_substrate([3, 1], table).data, table.data[[3, 1]])

    def test_unknown_id(self):
        with pytest.raises(VocabularyError):
            encode_substrate([4], Tensor(np.zeros((4, 3))))

    @given(st.lists(st.integers(0, 9), min_size=1, max_size=12), st.randoms(use_true_random=False))
    def test_permuting_vocabulary_is_invisible(self, ids, rnd):
        table = np.random.default_rng(0).normal(size=(10, 3))
        perm = list(range(10))
        rnd.shuffle(perm)
        inv = np.argsort(perm)
        permuted = Tensor(table[perm])
        out = encode_substrate([int(inv[i]) for i in ids], permuted)
        np.testing.assert_array_equal(out.data, encode_substrate(ids, Tensor(table)).data)


def _featurizer():
    return GeometryFeaturizerParams.init(ModelParams(), D, np.random.default_rng(4))


class TestGeometry:
    @pytest.fixture
    def feat(self):
        return _featurizer()

    def test_two_residues(self):
        f = geometry_features(np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]))
        np.testing.assert_allclose(f, [[3.0, 3.0, 3.0, 1.5]] * 2)

    def test_single_residue_is_degenerate(self, feat):
        f = geometry_features(np.array([[5.0, -2.0, 1.0]]))
        np.testing.assert_array_equal(f, np.zeros((1, 4)))
        out = encode_geometry(GeometryInput(np.array([[5.0, -2.0, 1.0]]), [3]), feat)
        ident = feat.residue_embed.data[3:4]
        x = np.concatenate([np.zeros((1, 4)), ident], axis=1)
        h = x @ feat.w1.data + feat.b1.data
        expected = (h * 0.5 * (1 + erf(h / np.sqrt(2)))) @ feat.w2.data + feat.b2.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    @settings(max_examples=30)
    @given(st.integers(1, 9), st.integers(0, 2**32 - 1))
    def test_rigid_motion_invariance(self, n, seed):
        feat = _featurizer()
        rng = np.random.default_rng(seed)
        x = rng.normal(0.0, 5.0, (n, 3))
        res = rng.integers(0, len(AMINO_ACIDS), n)
        moved = Rotation.random(random_state=rng).apply(x) + rng.uniform(-30, 30, 3)
        a = encode_geometry(GeometryInput(x, res), feat).data
        b = encode_geometry(GeometryInput(moved, res), feat).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_input_errors(self):
        with pytest.raises(GeometryInputError):
            GeometryInput(np.array([[0.0, np.nan, 0.0]]))
        with pytest.raises(GeometryInputError):
            GeometryInput(np.zeros((0, 3)))
        with pytest.raises(GeometryInputError):
            GeometryInput(np.zeros((2, 3)), [1])


class TestEmb:
    def test_round_trip(self, tmp_path):
        buf = struct.pack("<4sIQQ", b"EMB1", 1, 2, 3) + np.arange(6, dtype="<f4").tobytes()
        path = tmp_path / "m.emb"
        path.write_bytes(buf)
        t = load_embeddings(path)
        assert t.shape == (2, 3)
        np.testing.assert_array_equal(t.data, np.arange(6.0).reshape(2, 3))

    def test_bad_magic(self):
        buf = struct.pack("<4sIQQ", b"XXXX", 1, 1, 1) + b"\0" * 4
        with pytest.raises(FormatError) as err:
            emb.decode(buf)
        assert err.value.offset == 0

    def test_truncated_payload(self):
        buf = emb.encode(np.ones((2, 2)))[:-3]
        with pytest.raises(FormatError):
            emb.decode(buf)

    def test_extent_overflow(self):
        buf = struct.pack("<4sIQQ", b"EMB1", 1, 2**40, 2**40)
        with pytest.raises(FormatError):
            emb.decode(buf)

    def test_random_matrix_quantization_bound(self, tmp_path):
        m = np.random.default_rng(3).normal(size=(5, 8))
        emb.write_matrix(tmp_path / "r.emb", m)
        back = emb.read_matrix(tmp_path / "r.emb")
        assert np.all(np.abs(back - m) <= np.abs(m) * 2.0**-24)

    def test_trailing_bytes_rejected(self, tmp_path):
        (tmp_path / "t.emb").write_bytes(emb.encode(np.ones((1, 1))) + b"\0")
        with pytest.raises(FormatError):
            emb.read_matrix(tmp_path / "t.emb")
