"""Transformer mechanics: feature-embedding input, windowed attention vs a
dense oracle, loss/gradient checks, decoding, checkpoints, parameter laws."""

import numpy as np
import pytest

from metasum import tensor as T
from metasum import model as M
from metasum.metadata import ALL_FEATURE_KINDS, CARDINALITY, FeatureAssignment, FeatureKind
from metasum.text import BOS, EOS, PAD
from gradcheck import rel_err


def desk_config(**kw):
    base = dict(vocab_size=30, layers=2, d_model=16, heads=2, window=8,
                max_input_len=24, max_output_len=8)
    base.update(kw)
    return M.ModelConfig(**base)


def zero_params(params):
    for _, t in params.named():
        t.data[:] = 0.0
    return params


FEATS = FeatureAssignment(3, 10, 6, 9)


# --- embed_inputs ------------------------------------------------------------

def test_embed_all_zero_tables_gives_zeros():
    params = zero_params(M.ModelParams.init(desk_config(), seed=0))
    out = M.embed_inputs([1, 2, 3], FEATS, params)
    assert np.array_equal(out.data, np.zeros((3, 16)))


def test_embed_vanilla_broadcasts_single_row():
    params = M.ModelParams.init(desk_config(), seed=0)
    tokens = [4, 7, 7, 2]
    out = M.embed_inputs(tokens, FEATS, params).data
    tok = params["enc.tok"].data[tokens]
    pos = params["enc.pos"].data[:4]
    row = params["feat.vanilla"].data[1]
    assert np.allclose(out, tok + pos + row)


def test_embed_all_features_minus_vanilla_is_constant_row_sum():
    cfg_all = desk_config(feature_kind=FeatureKind.ALL_FEATURES)
    params_all = M.ModelParams.init(cfg_all, seed=0)
    params_van = M.ModelParams.init(desk_config(), seed=0)
    params_van["feat.vanilla"].data[:] = 0.0
    tokens = [1, 5, 9, 2, 2]
    diff = M.embed_inputs(tokens, FEATS, params_all).data \
        - M.embed_inputs(tokens, FEATS, params_van).data
    expected = sum(params_all[f"feat.{k.value}"].data[FEATS.id_for(k)]
                   for k in ALL_FEATURE_KINDS)
    assert np.allclose(diff, expected[None, :])
    assert np.allclose(diff - diff[0], 0.0)  # position-constant


def test_embed_feature_change_shifts_by_row_difference():
    params = M.ModelParams.init(desk_config(feature_kind=FeatureKind.DISEASE), seed=1)
    tokens = [3, 1, 4]
    a = M.embed_inputs(tokens, FeatureAssignment(disease_code=5), params).data
    b = M.embed_inputs(tokens, FeatureAssignment(disease_code=9), params).data
    table = params["feat.disease"].data
    assert np.allclose(b - a, (table[9] - table[5])[None, :])


def test_embed_input_too_long_errors():
    params = M.ModelParams.init(desk_config(), seed=0)
    with pytest.raises(ValueError, match="max_input_len"):
        M.embed_inputs(list(range(25)), FEATS, params)


def test_feature_bounds_are_enforced():
    with pytest.raises(ValueError):
        FeatureAssignment(hospital_id=6)
    with pytest.raises(ValueError):
        T.embedding(T.Tensor(np.zeros((6, 4))), [6])


# --- sliding-window attention -------------------------------------------------

def dense_attention(q, k, v, mask=None):
    scores = q @ k.T / np.sqrt(q.shape[1])
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=1, keepdims=True)
    return p @ v


def test_window_at_least_2n_equals_dense():
    rng = np.random.default_rng(0)
    for n in (3, 5, 9):
        q, k, v = (rng.normal(size=(n, 4)) for _ in range(3))
        out = M.sliding_window_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v),
                                         window=2 * n)
        assert np.abs(out.data - dense_attention(q, k, v)).max() <= 1e-9


def test_band_mask_window2_n5_pattern():
    mask = M.band_mask(5, window=2, dilation=1)
    expected = np.abs(np.subtract.outer(range(5), range(5))) <= 1
    assert np.array_equal(mask, expected)


def test_band_mask_dilation_pattern():
    mask = M.band_mask(7, window=2, dilation=2)
    p, j = np.meshgrid(range(7), range(7), indexing="ij")
    dist = np.abs(p - j)
    expected = (dist <= 2) & (dist % 2 == 0)
    assert np.array_equal(mask, expected)


def test_banded_attention_matches_per_row_oracle():
    rng = np.random.default_rng(1)
    n, dh, window = 12, 4, 4
    q, k, v = (rng.normal(size=(n, dh)) for _ in range(3))
    out = M.sliding_window_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v),
                                     window=window).data
    band = M.band_mask(n, window, 1)
    for p in range(n):
        keys = np.flatnonzero(band[p])
        scores = q[p] @ k[keys].T / np.sqrt(dh)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        assert np.abs(out[p] - w @ v[keys]).max() <= 1e-12


def test_window_monotone_convergence_to_dense():
    rng = np.random.default_rng(2)
    n = 16
    q, k, v = (rng.normal(size=(n, 4)) for _ in range(3))
    dense = dense_attention(q, k, v)
    diffs = []
    for window in (4, 8, 16, 2 * n):
        out = M.sliding_window_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v),
                                         window=window).data
        diffs.append(np.abs(out - dense).max())
    assert diffs[-1] <= 1e-12
    assert diffs == sorted(diffs, reverse=True)


# --- encode -------------------------------------------------------------------

def test_zero_layer_encode_is_embedding():
    params = M.ModelParams.init(desk_config(layers=0), seed=3)
    tokens = [5, 6, 7]
    memory = M.encode(tokens, FEATS, params)
    embed = M.embed_inputs(tokens, FEATS, params)
    assert np.array_equal(memory.data, embed.data)


def test_unused_feature_rows_do_not_affect_memory():
    cfg = desk_config(feature_kind=FeatureKind.DISEASE)
    params = M.ModelParams.init(cfg, seed=4)
    tokens = [2, 8, 8, 1]
    before = M.encode(tokens, FeatureAssignment(disease_code=6), params).data.copy()
    table = params["feat.disease"].data
    table[[100, 200]] = table[[200, 100]]  # rows never looked up
    after = M.encode(tokens, FeatureAssignment(disease_code=6), params).data
    assert np.array_equal(before, after)


def test_doubling_looked_up_row_changes_memory():
    cfg = desk_config(feature_kind=FeatureKind.DISEASE)
    params = M.ModelParams.init(cfg, seed=4)
    tokens = [2, 8, 8, 1]
    before = M.encode(tokens, FeatureAssignment(disease_code=6), params).data.copy()
    params["feat.disease"].data[6] *= 2.0
    after = M.encode(tokens, FeatureAssignment(disease_code=6), params).data
    assert not np.allclose(before, after)


# --- forward_loss ---------------------------------------------------------------

def test_zeroed_params_give_uniform_loss():
    cfg = desk_config()
    params = zero_params(M.ModelParams.init(cfg, seed=0))
    tgt = [BOS, 5, 6, EOS]
    loss = M.forward_loss([([4, 5, 6], FEATS, tgt)], params)
    assert loss.item() == pytest.approx(np.log(cfg.vocab_size))


def test_batch_of_identical_cases_equals_single_case_loss():
    params = M.ModelParams.init(desk_config(), seed=5)
    case = ([4, 5, 6, 7], FEATS, [BOS, 9, 10, EOS])
    single = M.forward_loss([case], params).item()
    batch = M.forward_loss([case] * 3, params).item()
    assert batch == pytest.approx(single, rel=1e-12)


def test_forward_loss_validates_targets():
    params = M.ModelParams.init(desk_config(), seed=0)
    with pytest.raises(ValueError, match="bos"):
        M.forward_loss([([1, 2], FEATS, [5, 6, EOS])], params)
    with pytest.raises(ValueError, match="max_output_len"):
        M.forward_loss([([1, 2], FEATS, [BOS, *range(4, 13), EOS])], params)


def test_padded_batch_loss_matches_per_case_mean():
    # different source/target lengths exercise the padding masks
    params = M.ModelParams.init(desk_config(), seed=6)
    c1 = ([4, 5, 6, 7, 8], FEATS, [BOS, 9, 10, 11, EOS])
    c2 = ([12, 13], FeatureAssignment(), [BOS, 14, EOS])
    batch = M.forward_loss([c1, c2], params).item()
    mean = (M.forward_loss([c1], params).item()
            + M.forward_loss([c2], params).item()) / 2
    assert batch == pytest.approx(mean, rel=1e-10)


def test_full_model_gradient_spot_check():
    # full-parameter sweep lives in the acceptance suite; spot-check here
    cfg = desk_config(vocab_size=20, layers=1, d_model=8, heads=2,
                      max_input_len=10, max_output_len=6)
    params = M.ModelParams.init(cfg, seed=7)
    batch = [([4, 5, 6, 7, 8, 9], FEATS, [BOS, 5, 6, 7, EOS])]
    with T.ComputationTape() as tape:
        loss = M.forward_loss(batch, params)
    params.zero_grads()
    T.backward(tape, loss)

    rng = np.random.default_rng(8)
    h = 1e-5
    checked = 0
    for name, t in params.named():
        flat = t.data.reshape(-1)
        grad = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = M.forward_loss(batch, params).item()
            flat[i] = orig - h
            fm = M.forward_loss(batch, params).item()
            flat[i] = orig
            assert rel_err(grad[i], (fp - fm) / (2 * h)) <= 1e-3, name
            checked += 1
    assert checked >= 100


# --- generation -----------------------------------------------------------------

def test_generate_zero_budget_is_empty():
    params = M.ModelParams.init(desk_config(max_output_len=0), seed=0)
    assert M.generate([1, 2, 3], FEATS, params) == []


def test_generate_respects_length_cap():
    params = M.ModelParams.init(desk_config(max_output_len=5), seed=9)
    out = M.generate([4, 5, 6], FEATS, params)
    assert len(out) <= 4  # bos occupies one decoder position


@pytest.mark.parametrize("seed", range(5))
def test_beam_width_one_equals_greedy(seed):
    params = M.ModelParams.init(desk_config(), seed=seed)
    rng = np.random.default_rng(seed)
    src = rng.integers(4, 30, size=12)
    greedy = M.generate(src, FEATS, params, strategy="greedy")
    beam1 = M.generate(src, FEATS, params, strategy="beam", width=1)
    assert greedy == beam1


def test_beam_two_finds_delayed_reward_sequence():
    # token A is locally best but the B-branch dominates in total probability;
    # verified against exhaustive enumeration over the rigged distribution
    probs = {
        (BOS,): {4: 0.6, 5: 0.4},
        (BOS, 4): {6: 0.6, EOS: 0.4},
        (BOS, 5): {7: 0.9, EOS: 0.1},
        (BOS, 4, 6): {EOS: 1.0},
        (BOS, 5, 7): {8: 0.9, EOS: 0.1},
        (BOS, 5, 7, 8): {EOS: 1.0},
    }
    vocab = 9

    def step(prefix):
        table = probs[tuple(prefix)]
        lp = np.full(vocab, -1e9)
        for tok, pr in table.items():
            lp[tok] = np.log(pr)
        return lp

    def enumerate_best(prefix=(BOS,), lp_total=0.0):
        table = probs[tuple(prefix)]
        best = None
        for tok, pr in table.items():
            lp = lp_total + np.log(pr)
            if tok == EOS:
                cand = (lp / len(prefix), prefix + (tok,))
            else:
                cand = enumerate_best(prefix + (tok,), lp)
            if cand and (best is None or cand[0] > best[0]):
                best = cand
        return best

    _, best_seq = enumerate_best()
    expected = [t for t in best_seq[1:] if t != EOS]
    assert expected == [5, 7, 8]

    beam2 = M.beam_search(step, width=2, max_new_tokens=4)
    greedy = M.beam_search(step, width=1, max_new_tokens=4)
    assert beam2 == expected
    assert greedy == [4, 6]


def test_greedy_ties_take_lowest_token_id():
    params = zero_params(M.ModelParams.init(desk_config(), seed=0))
    # uniform logits everywhere: argmax -> token 0 = PAD? no: PAD wins argmax,
    # which the loop treats as a real token; it is the lowest id.
    out = M.generate([4, 5], FEATS, params)
    assert all(t == PAD for t in out)


def test_generate_batch_matches_single():
    params = M.ModelParams.init(desk_config(), seed=11)
    rng = np.random.default_rng(11)
    cases = [(rng.integers(4, 30, size=rng.integers(5, 20)), FEATS)
             for _ in range(5)]
    batched = M.generate_batch(cases, params)
    singles = [M.generate_batch([c], params)[0] for c in cases]
    assert batched == singles


# --- determinism / parameter law / checkpoints ------------------------------------

def test_init_and_loss_deterministic():
    cfg = desk_config()
    a = M.ModelParams.init(cfg, seed=42)
    b = M.ModelParams.init(cfg, seed=42)
    for (n1, t1), (n2, t2) in zip(a.named(), b.named()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)
    case = ([4, 5, 6], FEATS, [BOS, 7, EOS])
    assert M.forward_loss([case], a).item() == M.forward_loss([case], b).item()
    assert M.generate([4, 5, 6], FEATS, a) == M.generate([4, 5, 6], FEATS, b)


def test_core_weights_shared_across_kinds_for_same_seed():
    van = M.ModelParams.init(desk_config(), seed=3)
    dis = M.ModelParams.init(desk_config(feature_kind=FeatureKind.DISEASE), seed=3)
    assert np.array_equal(van["enc.tok"].data, dis["enc.tok"].data)
    assert np.array_equal(van["out.w"].data, dis["out.w"].data)


def test_parameter_count_law_all_kinds():
    d = 16
    counts = {}
    for kind in FeatureKind:
        cfg = desk_config(feature_kind=kind, d_model=d)
        counts[kind] = M.ModelParams.init(cfg, seed=0).count()

    def rows(kind):
        if kind == FeatureKind.ALL_FEATURES:
            return sum(CARDINALITY[k] + 1 for k in ALL_FEATURE_KINDS)
        return CARDINALITY[kind] + 1

    base = counts[FeatureKind.VANILLA]
    for kind in FeatureKind:
        expected = (rows(kind) - rows(FeatureKind.VANILLA)) * d
        assert counts[kind] - base == expected, kind


def test_checkpoint_roundtrip(tmp_path):
    cfg = desk_config(feature_kind=FeatureKind.HOSPITAL)
    params = M.ModelParams.init(cfg, seed=13)
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(params, path)
    clone = M.load_checkpoint(path)
    assert clone.config == cfg
    for (n1, t1), (n2, t2) in zip(params.named(), clone.named()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)


def test_checkpoint_layout_is_header_plus_little_endian_payload(tmp_path):
    import json
    params = M.ModelParams.init(desk_config(), seed=1)
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(params, path)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        first_name, first_shape = header["manifest"][0]
        n = int(np.prod(first_shape))
        payload = np.frombuffer(fh.read(n * 8), dtype="<f8").reshape(first_shape)
    assert header["format_version"] == 1
    assert np.array_equal(payload, params[first_name].data)


def test_reference_scale_constants():
    assert M.REFERENCE_SCALE == {"layers": 8, "window": 256, "dilation": 1,
                             "max_input_len": 1024, "max_output_len": 256}


def test_config_requires_divisible_heads():
    with pytest.raises(ValueError):
        M.ModelConfig(vocab_size=10, d_model=10, heads=3)
