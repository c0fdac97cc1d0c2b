"""Token-embedding streams: enzyme residues, substrate characters, pocket geometry.

The enzyme encoder is a small frozen pre-norm transformer with trainable
LoRA adapters on its query and value projections. Substrates are embedded
by table lookup over SMILES characters. Pocket geometry is described by
rigid-motion-invariant distance statistics fed through a small MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import emb
from .diffcore import (
    ModelParams,
    Tensor,
    concat_cols,
    gelu,
    layer_norm,
    mask_mul,
    softmax_rows,
    take_rows,
)

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWYX"
# one token per printable, non-space ASCII character
SMILES_CHARS = "".join(chr(c) for c in range(33, 127))
GEOMETRY_LENGTH_SCALE = 10.0  # ångström; keeps distance features near unit scale
N_GEOMETRY_FEATURES = 4


class VocabularyError(ValueError):
    def __init__(self, token, position: int):
        super().__init__(f"token {token!r} at position {position} is not in the vocabulary")
        self.position = position


class GeometryInputError(ValueError):
    pass


def _tokenize(text: str, alphabet: str) -> list[int]:
    lookup = {c: i for i, c in enumerate(alphabet)}
    out = []
    for pos, ch in enumerate(text):
        if ch not in lookup:
            raise VocabularyError(ch, pos)
        out.append(lookup[ch])
    return out


def tokenize_enzyme(sequence: str) -> list[int]:
    return _tokenize(sequence.upper(), AMINO_ACIDS)


def tokenize_substrate(smiles: str) -> list[int]:
    return _tokenize(smiles, SMILES_CHARS)


def _check_tokens(tokens, vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token sequence must be a non-empty 1-D sequence")
    bad = np.flatnonzero((ids < 0) | (ids >= vocab_size))
    if bad.size:
        raise VocabularyError(int(ids[bad[0]]), int(bad[0]))
    return ids


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# --------------------------------------------------------------------------
# enzyme encoder
# --------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    down: Tensor  # rank × D
    up: Tensor  # D × rank, zero at init
    rank: int = 8
    scale: float = 16.0
    dropout_rate: float = 0.1

    @classmethod
    def init(cls, params: ModelParams, prefix: str, d: int, rng: np.random.Generator,
             rank: int = 8, scale: float = 16.0, dropout_rate: float = 0.1) -> LoraAdapter:
        if rank < 1 or scale <= 0 or not 0.0 <= dropout_rate < 1.0:
            raise ValueError("invalid LoRA hyperparameters")
        down = params.add(f"{prefix}.down", rng.normal(0.0, 1.0 / np.sqrt(d), (rank, d)))
        up = params.add(f"{prefix}.up", np.zeros((d, rank)))
        return cls(down, up, rank, scale, dropout_rate)

    def delta(self, h: Tensor, mask: np.ndarray | None) -> Tensor:
        if mask is not None:
            h = mask_mul(h, mask / (1.0 - self.dropout_rate))
        return ((h @ self.down.T) @ self.up.T) * (self.scale / self.rank)


@dataclass
class EncoderLayer:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ff1: Tensor
    ff2: Tensor


@dataclass
class SurrogateEncoderParams:
    embed: Tensor
    layers: list[EncoderLayer]
    max_length: int = 1024

    @property
    def d(self) -> int:
        return self.embed.shape[1]

    @classmethod
    def init(cls, params: ModelParams, d: int, n_layers: int, rng: np.random.Generator,
             max_length: int = 1024, prefix: str = "backbone") -> SurrogateEncoderParams:
        std = 1.0 / np.sqrt(d)
        embed = params.add(f"{prefix}.embed", rng.normal(0.0, 1.0, (len(AMINO_ACIDS), d)),
                           frozen=True)
        layers = []
        for i in range(n_layers):
            p = f"{prefix}.l{i}"
            layers.append(EncoderLayer(
                wq=params.add(f"{p}.wq", rng.normal(0.0, std, (d, d)), frozen=True),
                wk=params.add(f"{p}.wk", rng.normal(0.0, std, (d, d)), frozen=True),
                wv=params.add(f"{p}.wv", rng.normal(0.0, std, (d, d)), frozen=True),
                wo=params.add(f"{p}.wo", rng.normal(0.0, std, (d, d)), frozen=True),
                ff1=params.add(f"{p}.ff1", rng.normal(0.0, std, (d, 4 * d)), frozen=True),
                ff2=params.add(f"{p}.ff2", rng.normal(0.0, 0.5 * std, (4 * d, d)), frozen=True),
            ))
        return cls(embed, layers, max_length)

    @classmethod
    def from_params(cls, params: ModelParams, n_layers: int, max_length: int = 1024,
                    prefix: str = "backbone") -> SurrogateEncoderParams:
        layers = [
            EncoderLayer(*(params[f"{prefix}.l{i}.{k}"] for k in ("wq", "wk", "wv", "wo", "ff1", "ff2")))
            for i in range(n_layers)
        ]
        return cls(params[f"{prefix}.embed"], layers, max_length)


@dataclass
class LayerAdapters:
    q: LoraAdapter
    v: LoraAdapter


def init_adapters(params: ModelParams, n_layers: int, d: int, rng: np.random.Generator,
                  rank: int = 8, scale: float = 16.0, dropout_rate: float = 0.1,
                  prefix: str = "lora") -> list[LayerAdapters]:
    return [
        LayerAdapters(
            q=LoraAdapter.init(params, f"{prefix}.l{i}.q", d, rng, rank, scale, dropout_rate),
            v=LoraAdapter.init(params, f"{prefix}.l{i}.v", d, rng, rank, scale, dropout_rate),
        )
        for i in range(n_layers)
    ]


def adapters_from_params(params: ModelParams, n_layers: int, rank: int = 8,
                         scale: float = 16.0, dropout_rate: float = 0.1,
                         prefix: str = "lora") -> list[LayerAdapters]:
    def one(name):
        return LoraAdapter(params[f"{name}.down"], params[f"{name}.up"], rank, scale, dropout_rate)

    return [LayerAdapters(one(f"{prefix}.l{i}.q"), one(f"{prefix}.l{i}.v")) for i in range(n_layers)]


def dropout_mask(seed: int, layer: int, slot: int, shape: tuple[int, int], rate: float) -> np.ndarray:
    """Keep-mask from a counter-based generator keyed by (seed, layer, slot).

    Row ``p`` of the mask is a fixed function of the key and ``p``.
    """
    bitgen = np.random.Philox(np.random.SeedSequence([seed & (2**63 - 1), layer, slot]))
    return (np.random.Generator(bitgen).random(shape) >= rate).astype(np.float64)


def encode_enzyme(tokens, params: SurrogateEncoderParams,
                  adapters: list[LayerAdapters] | None = None,
                  train_mode: bool = False, dropout_seed: int = 0) -> Tensor:
    """Residue embeddings H_e (L_e × D) from the frozen encoder plus LoRA updates."""
    ids = _check_tokens(tokens, params.embed.shape[0])
    if ids.size > params.max_length:
        raise ValueError(f"enzyme length {ids.size} exceeds maximum {params.max_length}")
    d = params.d
    x = take_rows(params.embed, ids) + sinusoidal_positions(ids.size, d)
    inv_sqrt_d = 1.0 / np.sqrt(d)
    for i, layer in enumerate(params.layers):
        ad = adapters[i] if adapters is not None else None
        h = layer_norm(x)
        q = h @ layer.wq
        k = h @ layer.wk
        v = h @ layer.wv
        if ad is not None:
            mq = mv = None
            if train_mode and ad.q.dropout_rate > 0:
                mq = dropout_mask(dropout_seed, i, 0, h.shape, ad.q.dropout_rate)
                mv = dropout_mask(dropout_seed, i, 1, h.shape, ad.v.dropout_rate)
            q = q + ad.q.delta(h, mq)
            v = v + ad.v.delta(h, mv)
        attn = softmax_rows((q @ k.T) * inv_sqrt_d)
        x = x + (attn @ v) @ layer.wo
        h = layer_norm(x)
        x = x + gelu(h @ layer.ff1) @ layer.ff2
    return layer_norm(x)


# --------------------------------------------------------------------------
# substrate and geometry
# --------------------------------------------------------------------------


def encode_substrate(tokens, table: Tensor) -> Tensor:
    """H_m: rows of the substrate embedding table gathered by token id."""
    ids = _check_tokens(tokens, table.shape[0])
    return take_rows(table, ids)


@dataclass
class GeometryInput:
    coords: np.ndarray  # L_g × 3, ångström
    residues: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or self.coords.shape[0] < 1:
            raise GeometryInputError(f"pocket coordinates must be L_g×3 with L_g≥1, got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise GeometryInputError("pocket coordinates contain non-finite values")
        res = np.asarray(self.residues, dtype=np.intp)
        if res.size == 0:
            res = np.full(self.coords.shape[0], AMINO_ACIDS.index("X"), dtype=np.intp)
        if res.shape != (self.coords.shape[0],):
            raise GeometryInputError("one residue identity per pocket coordinate is required")
        self.residues = res


def geometry_features(coords: np.ndarray) -> np.ndarray:
    """Per-residue (min, mean, max) distance to the other residues and distance to the centroid."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    centroid = np.linalg.norm(coords - coords.mean(axis=0), axis=1)
    if n == 1:
        return np.array([[0.0, 0.0, 0.0, centroid[0]]])
    off = dist[~np.eye(n, dtype=bool)].reshape(n, n - 1)
    return np.column_stack([off.min(axis=1), off.mean(axis=1), off.max(axis=1), centroid])


@dataclass
class GeometryFeaturizerParams:
    residue_embed: Tensor  # V × D
    w1: Tensor  # (4 + D) × D
    b1: Tensor
    w2: Tensor  # D × D
    b2: Tensor

    @classmethod
    def init(cls, params: ModelParams, d: int, rng: np.random.Generator,
             prefix: str = "geometry") -> GeometryFeaturizerParams:
        fan_in = N_GEOMETRY_FEATURES + d
        return cls(
            residue_embed=params.add(f"{prefix}.residue_embed",
                                     rng.normal(0.0, 1.0 / np.sqrt(d), (len(AMINO_ACIDS), d))),
            w1=params.add(f"{prefix}.w1", rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, d))),
            b1=params.add(f"{prefix}.b1", np.zeros((1, d))),
            w2=params.add(f"{prefix}.w2", rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))),
            b2=params.add(f"{prefix}.b2", np.zeros((1, d))),
        )

    @classmethod
    def from_params(cls, params: ModelParams, prefix: str = "geometry") -> GeometryFeaturizerParams:
        return cls(*(params[f"{prefix}.{k}"] for k in ("residue_embed", "w1", "b1", "w2", "b2")))


def encode_geometry(g: GeometryInput, params: GeometryFeaturizerParams) -> Tensor:
    """H_g (L_g × D): MLP over invariant distance statistics and residue identity."""
    feats = Tensor(geometry_features(g.coords) / GEOMETRY_LENGTH_SCALE)
    ident = take_rows(params.residue_embed, _check_tokens(g.residues, params.residue_embed.shape[0]))
    x = concat_cols([feats, ident])
    return gelu(x @ params.w1 + params.b1) @ params.w2 + params.b2


def load_embeddings(path: str | Path) -> Tensor:
    """Read an externally computed embedding matrix from an EMB1 file."""
    return Tensor(emb.read_matrix(path))
