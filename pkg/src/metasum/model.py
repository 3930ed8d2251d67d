"""Encoder-decoder transformer with windowed encoder self-attention and a
metadata feature-embedding input layer.

The encoder input at position p is E_tok[token_p] + E_pos[p] + E_feat[id],
where the case-level feature id is broadcast to every position; the vanilla
variant adds one shared learned row, and the all-features variant adds all
four metadata tables. Feature embeddings touch the encoder only. Blocks are
pre-norm; the decoder uses ordinary causal + cross attention (the window
applies to encoder self-attention).

Batches are handled by stacking cases row-wise into a single [B*n, d]
matrix; attention is computed per case and head through the same public
sliding_window_attention path the tests exercise.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, asdict, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .metadata import (ALL_FEATURE_KINDS, CARDINALITY, FeatureAssignment,
                       FeatureKind)
from .text import BOS, EOS, PAD

# architecture scale used in the reference experiments: layers, window,
# dilation, input length, output length
REFERENCE_SCALE = {"layers": 8, "window": 256, "dilation": 1,
               "max_input_len": 1024, "max_output_len": 256}


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 2
    d_model: int = 64
    heads: int = 2
    window: int = 16
    dilation: int = 1
    max_input_len: int = 128
    max_output_len: int = 32
    ffn_factor: int = 4
    feature_kind: FeatureKind = FeatureKind.VANILLA

    def __post_init__(self) -> None:
        if isinstance(self.feature_kind, str):
            self.feature_kind = FeatureKind.parse(self.feature_kind)
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.window < 1 or self.dilation < 1:
            raise ValueError("window and dilation must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_kind"] = self.feature_kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_kind(self, kind: FeatureKind) -> "ModelConfig":
        return replace(self, feature_kind=kind)


def feature_tables_for(kind: FeatureKind) -> Tuple[FeatureKind, ...]:
    """Which embedding tables a model of this kind owns."""
    if kind == FeatureKind.ALL_FEATURES:
        return ALL_FEATURE_KINDS
    return (kind,)


class ModelParams:
    """All learnable tensors, addressable by name, in a fixed manifest order."""

    def __init__(self, config: ModelConfig, tensors: dict) -> None:
        self.config = config
        self.tensors: dict = tensors

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def feature_table(self, kind: FeatureKind) -> T.Tensor:
        return self.tensors[f"feat.{kind.value}"]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        """Seeded scaled-uniform initialization.

        Every tensor draws from its own named substream, so models that
        differ only in feature tables share bit-identical core weights for a
        given seed.
        """
        tensors: dict = {}

        def rng_for(name: str):
            return np.random.default_rng(
                np.random.SeedSequence([seed, zlib.crc32(name.encode())]))

        def uniform(name: str, shape: tuple, scale: float) -> None:
            tensors[name] = T.Tensor(rng_for(name).uniform(-scale, scale, size=shape))

        def matrix(name: str, n_in: int, n_out: int) -> None:
            uniform(name, (n_in, n_out), 1.0 / np.sqrt(n_in))

        def norm(prefix: str, d: int) -> None:
            tensors[f"{prefix}.g"] = T.Tensor(np.ones(d))
            tensors[f"{prefix}.b"] = T.Tensor(np.zeros(d))

        def bias(name: str, d: int) -> None:
            tensors[name] = T.Tensor(np.zeros(d))

        d = config.d_model
        emb_scale = 1.0 / np.sqrt(d)
        hidden = config.ffn_factor * d

        uniform("enc.tok", (config.vocab_size, d), emb_scale)
        uniform("enc.pos", (config.max_input_len, d), emb_scale)
        for kind in feature_tables_for(config.feature_kind):
            uniform(f"feat.{kind.value}", (CARDINALITY[kind] + 1, d), emb_scale)
        for i in range(config.layers):
            norm(f"enc{i}.ln1", d)
            for w in ("wq", "wk", "wv", "wo"):
                matrix(f"enc{i}.attn.{w}", d, d)
            norm(f"enc{i}.ln2", d)
            matrix(f"enc{i}.ffn.w1", d, hidden)
            bias(f"enc{i}.ffn.b1", hidden)
            matrix(f"enc{i}.ffn.w2", hidden, d)
            bias(f"enc{i}.ffn.b2", d)
        norm("enc.lnf", d)

        uniform("dec.tok", (config.vocab_size, d), emb_scale)
        if config.max_output_len > 0:
            uniform("dec.pos", (config.max_output_len, d), emb_scale)
        else:
            tensors["dec.pos"] = T.Tensor(np.zeros((0, d)))
        for i in range(config.layers):
            norm(f"dec{i}.ln1", d)
            for w in ("wq", "wk", "wv", "wo"):
                matrix(f"dec{i}.self.{w}", d, d)
            norm(f"dec{i}.ln2", d)
            for w in ("wq", "wk", "wv", "wo"):
                matrix(f"dec{i}.cross.{w}", d, d)
            norm(f"dec{i}.ln3", d)
            matrix(f"dec{i}.ffn.w1", d, hidden)
            bias(f"dec{i}.ffn.b1", hidden)
            matrix(f"dec{i}.ffn.w2", hidden, d)
            bias(f"dec{i}.ffn.b2", d)
        norm("dec.lnf", d)
        matrix("out.w", d, config.vocab_size)
        bias("out.b", config.vocab_size)
        return cls(config, tensors)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

_band_cache: dict = {}
_causal_cache: dict = {}


def band_mask(n: int, window: int, dilation: int = 1) -> np.ndarray:
    """Boolean [n, n] mask: query p may see key j iff 2|p-j| <= window*dilation
    and (p - j) is a multiple of dilation."""
    key = (n, window, dilation)
    if key not in _band_cache:
        p = np.arange(n)[:, None]
        j = np.arange(n)[None, :]
        dist = np.abs(p - j)
        _band_cache[key] = (2 * dist <= window * dilation) & (dist % dilation == 0)
    return _band_cache[key]


def causal_mask(n: int) -> np.ndarray:
    if n not in _causal_cache:
        _causal_cache[n] = np.tril(np.ones((n, n), dtype=bool))
    return _causal_cache[n]


def _attend(q: T.Tensor, k: T.Tensor, v: T.Tensor,
            mask: Optional[np.ndarray]) -> T.Tensor:
    d_head = q.shape[1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d_head))
    probs = T.softmax_rows(scores, mask)
    return T.matmul(probs, v)


def sliding_window_attention(q: T.Tensor, k: T.Tensor, v: T.Tensor,
                             window: int, dilation: int = 1,
                             key_mask: Optional[np.ndarray] = None) -> T.Tensor:
    """Single-head attention restricted to a dilated band around each query.

    With window >= 2n no position is masked and the result equals dense
    self-attention. ``key_mask`` (length n, True = usable key) further
    restricts keys; each position always keeps itself so no row degenerates.
    """
    n = q.shape[0]
    mask = band_mask(n, window, dilation)
    if key_mask is not None:
        mask = mask & np.asarray(key_mask, dtype=bool)[None, :]
        mask = mask.copy()
        np.fill_diagonal(mask, True)
    return _attend(q, k, v, mask)


# ---------------------------------------------------------------------------
# forward passes (batch-stacked)
# ---------------------------------------------------------------------------

def _feature_ids(feats: Sequence[FeatureAssignment],
                 table_kind: FeatureKind) -> np.ndarray:
    return np.array([f.id_for(table_kind) for f in feats], dtype=np.int64)


def _embed_batch(tokens: np.ndarray, feats: Sequence[FeatureAssignment],
                 params: ModelParams) -> T.Tensor:
    """Sum of token, positional and broadcast feature embeddings, [B*n, d]."""
    cfg = params.config
    b, n = tokens.shape
    if n > cfg.max_input_len:
        raise ValueError(f"input length {n} exceeds max_input_len {cfg.max_input_len}")
    flat = tokens.reshape(-1)
    x = T.embedding(params["enc.tok"], flat)
    pos = T.embedding(params["enc.pos"], np.tile(np.arange(n), b))
    x = T.add(x, pos)
    for table_kind in feature_tables_for(cfg.feature_kind):
        ids = _feature_ids(feats, table_kind)
        table = params.feature_table(table_kind)
        if ids.max(initial=0) > CARDINALITY[table_kind]:
            raise ValueError(
                f"{table_kind.value} feature id {ids.max()} out of range "
                f"[0, {CARDINALITY[table_kind]}]")
        x = T.add(x, T.embedding(table, np.repeat(ids, n)))
    return x


def _self_attention_block(x: T.Tensor, prefix: str, b: int, n: int,
                          masks: Sequence[np.ndarray], params: ModelParams) -> T.Tensor:
    cfg = params.config
    dh = cfg.d_model // cfg.heads
    q_full = T.matmul(x, params[f"{prefix}.wq"])
    k_full = T.matmul(x, params[f"{prefix}.wk"])
    v_full = T.matmul(x, params[f"{prefix}.wv"])
    case_outs = []
    for i in range(b):
        lo, hi = i * n, (i + 1) * n
        q_i = T.slice_rows(q_full, lo, hi)
        k_i = T.slice_rows(k_full, lo, hi)
        v_i = T.slice_rows(v_full, lo, hi)
        heads = []
        for h in range(cfg.heads):
            c0, c1 = h * dh, (h + 1) * dh
            heads.append(_attend(T.slice_cols(q_i, c0, c1),
                                 T.slice_cols(k_i, c0, c1),
                                 T.slice_cols(v_i, c0, c1),
                                 masks[i]))
        case_outs.append(heads[0] if cfg.heads == 1 else T.concat_cols(heads))
    merged = case_outs[0] if b == 1 else T.concat_rows(case_outs)
    return T.matmul(merged, params[f"{prefix}.wo"])


def _cross_attention_block(x: T.Tensor, memory: T.Tensor, prefix: str,
                           b: int, m: int, n: int, src_real: np.ndarray,
                           params: ModelParams) -> T.Tensor:
    cfg = params.config
    dh = cfg.d_model // cfg.heads
    q_full = T.matmul(x, params[f"{prefix}.wq"])
    k_full = T.matmul(memory, params[f"{prefix}.wk"])
    v_full = T.matmul(memory, params[f"{prefix}.wv"])
    case_outs = []
    for i in range(b):
        q_i = T.slice_rows(q_full, i * m, (i + 1) * m)
        k_i = T.slice_rows(k_full, i * n, (i + 1) * n)
        v_i = T.slice_rows(v_full, i * n, (i + 1) * n)
        mask = np.broadcast_to(src_real[i][None, :], (m, n))
        heads = []
        for h in range(cfg.heads):
            c0, c1 = h * dh, (h + 1) * dh
            heads.append(_attend(T.slice_cols(q_i, c0, c1),
                                 T.slice_cols(k_i, c0, c1),
                                 T.slice_cols(v_i, c0, c1),
                                 mask))
        case_outs.append(heads[0] if cfg.heads == 1 else T.concat_cols(heads))
    merged = case_outs[0] if b == 1 else T.concat_rows(case_outs)
    return T.matmul(merged, params[f"{prefix}.wo"])


def _ffn(x: T.Tensor, prefix: str, params: ModelParams) -> T.Tensor:
    h = T.add_bias(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    h = T.gelu(h)
    return T.add_bias(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _encode_batch(tokens: np.ndarray, feats: Sequence[FeatureAssignment],
                  params: ModelParams) -> Tuple[T.Tensor, np.ndarray]:
    """Run the encoder on stacked cases; returns (memory [B*n, d], src_real [B, n])."""
    cfg = params.config
    b, n = tokens.shape
    src_real = tokens != PAD
    x = _embed_batch(tokens, feats, params)

    band = band_mask(n, cfg.window, cfg.dilation)
    masks = []
    for i in range(b):
        mask = band & src_real[i][None, :]
        mask = mask.copy()
        np.fill_diagonal(mask, True)  # pad rows stay valid; ignored downstream
        masks.append(mask)

    if cfg.layers == 0:
        return x, src_real  # memory is the raw embedding sum
    for layer in range(cfg.layers):
        h = T.layer_norm(x, params[f"enc{layer}.ln1.g"], params[f"enc{layer}.ln1.b"])
        x = T.add(x, _self_attention_block(h, f"enc{layer}.attn", b, n, masks, params))
        h = T.layer_norm(x, params[f"enc{layer}.ln2.g"], params[f"enc{layer}.ln2.b"])
        x = T.add(x, _ffn(h, f"enc{layer}.ffn", params))
    return T.layer_norm(x, params["enc.lnf.g"], params["enc.lnf.b"]), src_real


def _decode_batch(dec_in: np.ndarray, memory: T.Tensor, src_real: np.ndarray,
                  params: ModelParams) -> T.Tensor:
    """Teacher-forced decoder stack; returns logits [B*m, vocab]."""
    cfg = params.config
    b, m = dec_in.shape
    n = src_real.shape[1]
    if m > cfg.max_output_len:
        raise ValueError(f"decoder length {m} exceeds max_output_len {cfg.max_output_len}")
    y = T.embedding(params["dec.tok"], dec_in.reshape(-1))
    y = T.add(y, T.embedding(params["dec.pos"], np.tile(np.arange(m), b)))

    if cfg.layers == 0:
        return T.add_bias(T.matmul(y, params["out.w"]), params["out.b"])
    masks = [causal_mask(m)] * b
    for layer in range(cfg.layers):
        h = T.layer_norm(y, params[f"dec{layer}.ln1.g"], params[f"dec{layer}.ln1.b"])
        y = T.add(y, _self_attention_block(h, f"dec{layer}.self", b, m, masks, params))
        h = T.layer_norm(y, params[f"dec{layer}.ln2.g"], params[f"dec{layer}.ln2.b"])
        y = T.add(y, _cross_attention_block(h, memory, f"dec{layer}.cross",
                                            b, m, n, src_real, params))
        h = T.layer_norm(y, params[f"dec{layer}.ln3.g"], params[f"dec{layer}.ln3.b"])
        y = T.add(y, _ffn(h, f"dec{layer}.ffn", params))
    y = T.layer_norm(y, params["dec.lnf.g"], params["dec.lnf.b"])
    return T.add_bias(T.matmul(y, params["out.w"]), params["out.b"])


# ---------------------------------------------------------------------------
# public single-case ops
# ---------------------------------------------------------------------------

def embed_inputs(tokens: Sequence[int], features: FeatureAssignment,
                 params: ModelParams) -> T.Tensor:
    """Token + positional + broadcast feature embeddings for one case, [n, d]."""
    arr = np.asarray(tokens, dtype=np.int64)[None, :]
    return _embed_batch(arr, [features], params)


def encode(tokens: Sequence[int], features: FeatureAssignment,
           params: ModelParams) -> T.Tensor:
    """Encoder memory for one case, [n, d]."""
    arr = np.asarray(tokens, dtype=np.int64)[None, :]
    memory, _ = _encode_batch(arr, [features], params)
    return memory


def _pad_to(rows: List[np.ndarray], width: int) -> np.ndarray:
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def _validate_target(tgt: np.ndarray, cfg: ModelConfig) -> None:
    if len(tgt) < 2 or tgt[0] != BOS or tgt[-1] != EOS:
        raise ValueError("target must be bos-prefixed and eos-terminated")
    if len(tgt) - 1 > cfg.max_output_len:
        raise ValueError(
            f"target length {len(tgt) - 1} exceeds max_output_len {cfg.max_output_len}")


def forward_loss(batch: Sequence[tuple], params: ModelParams) -> T.Tensor:
    """Teacher-forced cross entropy, averaged per case then over the batch.

    Each batch item is (source token ids, FeatureAssignment, full target ids
    [bos, ..., eos]). Pad positions contribute nothing.
    """
    cfg = params.config
    srcs = [np.asarray(s, dtype=np.int64) for s, _, _ in batch]
    tgts = [np.asarray(t, dtype=np.int64) for _, _, t in batch]
    feats = [f for _, f, _ in batch]
    for t in tgts:
        _validate_target(t, cfg)
    tokens = _pad_to(srcs, max(len(s) for s in srcs))
    full = _pad_to(tgts, max(len(t) for t in tgts))
    dec_in, labels = full[:, :-1], full[:, 1:]

    memory, src_real = _encode_batch(tokens, feats, params)
    logits = _decode_batch(dec_in, memory, src_real, params)

    b, m = dec_in.shape
    losses = [T.cross_entropy(T.slice_rows(logits, i * m, (i + 1) * m), labels[i], PAD)
              for i in range(b)]
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / b)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    return z - np.log(np.exp(z).sum())


def generate_batch(cases: Sequence[tuple], params: ModelParams) -> List[List[int]]:
    """Greedy decode of (tokens, features) cases in lockstep; ties take the
    lowest token id. Returns content token ids (no bos/eos)."""
    cfg = params.config
    if cfg.max_output_len <= 1 or not cases:
        return [[] for _ in cases]
    srcs = [np.asarray(s, dtype=np.int64) for s, _ in cases]
    feats = [f for _, f in cases]
    tokens = _pad_to(srcs, max(len(s) for s in srcs))
    memory, src_real = _encode_batch(tokens, feats, params)

    b = len(cases)
    prefixes = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    outputs: List[List[int]] = [[] for _ in range(b)]
    while prefixes.shape[1] < cfg.max_output_len and not done.all():
        logits = _decode_batch(prefixes, memory, src_real, params)
        m = prefixes.shape[1]
        last = logits.data[m - 1::m]  # last position of each case
        nxt = last.argmax(axis=1)
        for i in range(b):
            if done[i]:
                nxt[i] = PAD
            elif nxt[i] == EOS:
                done[i] = True
                nxt[i] = PAD
            else:
                outputs[i].append(int(nxt[i]))
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
    return outputs


def beam_search(step_logprobs, width: int, max_new_tokens: int,
                eos_id: int = EOS, bos_id: int = BOS) -> List[int]:
    """Beam search over ``step_logprobs(prefix) -> log-prob vector``.

    Hypotheses are ranked by total log-probability while alive and by
    length-normalized log-probability at finalization (length = generated
    tokens including eos). Deterministic tie-breaking: lower token id, then
    earlier hypothesis.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if max_new_tokens <= 0:
        return []
    live = [(0.0, (bos_id,))]
    finished: List[Tuple[float, Tuple[int, ...]]] = []
    for _ in range(max_new_tokens):
        candidates = []
        for rank, (score, prefix) in enumerate(live):
            lp = step_logprobs(prefix)
            order = np.lexsort((np.arange(len(lp)), -lp))[:width]
            for tok in order:
                candidates.append((score + float(lp[tok]), rank, int(tok), prefix))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for score, _, tok, prefix in candidates[:width]:
            if tok == eos_id:
                finished.append((score / len(prefix), prefix))
            else:
                next_live.append((score, prefix + (tok,)))
        live = next_live
        if len(finished) >= width or not live:
            break
    for score, prefix in live:
        finished.append((score / max(1, len(prefix) - 1), prefix))
    if not finished:
        return []
    best = max(enumerate(finished), key=lambda kv: (kv[1][0], -kv[0]))[1]
    return [t for t in best[1][1:] if t != eos_id]


def generate(tokens: Sequence[int], features: FeatureAssignment,
             params: ModelParams, strategy: str = "greedy",
             width: int = 4) -> List[int]:
    """Autoregressive decoding from bos until eos or the length cap."""
    cfg = params.config
    if cfg.max_output_len <= 1:
        return []
    if strategy == "greedy":
        return generate_batch([(tokens, features)], params)[0]
    if strategy != "beam":
        raise ValueError(f"unknown decoding strategy {strategy!r}")

    arr = np.asarray(tokens, dtype=np.int64)[None, :]
    memory, src_real = _encode_batch(arr, [features], params)

    def step(prefix: Tuple[int, ...]) -> np.ndarray:
        dec_in = np.asarray(prefix, dtype=np.int64)[None, :]
        logits = _decode_batch(dec_in, memory, src_real, params)
        return _log_softmax(logits.data[-1])

    return beam_search(step, width, cfg.max_output_len - 1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    """Header line (JSON: version, config, tensor manifest) then raw
    little-endian float64 payloads in manifest order."""
    manifest = [[name, list(t.data.shape)] for name, t in params.named()]
    header = json.dumps({"format_version": CHECKPOINT_VERSION,
                         "config": params.config.to_dict(),
                         "manifest": manifest},
                        ensure_ascii=False, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for _, t in params.named():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        config = ModelConfig.from_dict(header["config"])
        tensors: dict = {}
        for name, shape in header["manifest"]:
            size = int(np.prod(shape)) if shape else 1
            buf = fh.read(size * 8)
            arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            tensors[name] = T.Tensor(arr)
    return ModelParams(config, tensors)
