import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from autov_rank.core import Rng, round_to_f32
from autov_rank.errors import DegenerateInputError, StateError
from autov_rank.interaction import save_interaction_weights, seed_interaction_weights
from autov_rank.pipeline import Candidate, CandidateGroup, save_dataset
from autov_rank.ranker import init_ranker_params, save_ranker_params, score_candidate
from autov_rank.retrieval import (
    BatchRetrieveSummary,
    RetrievalConfig,
    batch_retrieve,
    prefilter,
    retrieve,
)
from autov_rank.training import OptimizerState, TrainConfig, save_checkpoint


def group_from_pooled(vectors, query=None):
    """Single-row candidates, so each mean-pooled feature is the row itself."""
    d = len(vectors[0])
    if query is None:
        query = np.ones((1, d))
    cands = [
        Candidate(f"c{i}", np.asarray(v, dtype=float).reshape(1, d))
        for i, v in enumerate(vectors)
    ]
    return CandidateGroup("g", query, cands)


def random_group(rng, group_id="g", d_model=8, l_v=3, l_t=2, n=4):
    query = rng.child("q").standard_normal((l_t, d_model))
    cands = [
        Candidate(f"c{j}", rng.child("c", j).standard_normal((l_v, d_model)))
        for j in range(n)
    ]
    return CandidateGroup(group_id, query, cands)


@pytest.fixture(scope="module")
def scorer():
    rng = Rng(31)
    weights = seed_interaction_weights(rng.child("w"), 8, n_heads=2, d_ff=16)
    params = init_ranker_params(rng.child("p"), 8, 4)
    return params, weights


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        RetrievalConfig(prefilter_min_pool=2)
    with pytest.raises(ValueError):
        RetrievalConfig(text_mode="concat")
    with pytest.raises(ValueError):
        RetrievalConfig(prefilter_features="pooled")


# ---------------------------------------------------------------- prefilter

def test_prefilter_removes_the_farthest_of_three():
    b = np.array([0.9, 0.1])
    g = group_from_pooled([(1.0, 0.0), tuple(b / np.linalg.norm(b)), (0.0, 1.0)])
    survivors, removed = prefilter(g)
    assert removed == 2
    assert survivors == [0, 1]


def test_prefilter_passes_small_pools_through():
    g = group_from_pooled([(1.0, 0.0), (-1.0, 0.0)])
    survivors, removed = prefilter(g)
    assert survivors == [0, 1]
    assert removed is None


def test_prefilter_identical_candidates_removes_index_zero():
    g = group_from_pooled([(1.0, 2.0)] * 4)
    survivors, removed = prefilter(g)
    assert removed == 0
    assert survivors == [1, 2, 3]


def test_prefilter_tie_removes_lowest_index():
    r = 1.0 / np.sqrt(2.0)
    g = group_from_pooled([(1.0, 0.0), (0.0, 1.0), (r, r)])
    survivors, removed = prefilter(g)
    assert removed == 0
    assert survivors == [1, 2]


def test_prefilter_zero_norm_names_the_candidate():
    g = group_from_pooled([(1.0, 0.0), (0.0, 0.0), (0.0, 1.0)])
    with pytest.raises(DegenerateInputError, match="c1"):
        prefilter(g)


def test_prefilter_ignores_query_and_params(scorer):
    rng = Rng(7)
    g1 = random_group(rng.child(1))
    g2 = CandidateGroup(g1.group_id, g1.query * -3.0 + 1.0, g1.candidates)
    assert prefilter(g1) == prefilter(g2)


def test_prefilter_matches_direct_distance_computation():
    for seed in range(20):
        g = random_group(Rng(seed), n=5)
        pooled = [c.tokens.mean(axis=0) for c in g.candidates]
        means = []
        for i, p in enumerate(pooled):
            total = 0.0
            for j, q in enumerate(pooled):
                if i == j:
                    continue
                cos = np.dot(p, q) / (np.linalg.norm(p) * np.linalg.norm(q))
                total += 1.0 - cos
            means.append(total / (len(pooled) - 1))
        _, removed = prefilter(g)
        assert removed == int(np.argmax(means)), seed


def test_prefilter_interacted_features_need_weights(scorer):
    params, weights = scorer
    g = random_group(Rng(3))
    cfg = RetrievalConfig(prefilter_features="interacted")
    with pytest.raises(StateError):
        prefilter(g, cfg)
    survivors, removed = prefilter(g, cfg, weights)
    assert len(survivors) == len(g.candidates) - 1
    assert removed not in survivors


@settings(deadline=None, max_examples=20)
@given(n=st.integers(2, 8), seed=st.integers(0, 100))
def test_prefilter_removes_exactly_one_when_pool_allows(n, seed):
    g = random_group(Rng(seed), n=n)
    survivors, removed = prefilter(g)
    if n >= 3:
        assert removed is not None
        assert len(survivors) == n - 1
    else:
        assert removed is None
        assert len(survivors) == n


# ---------------------------------------------------------------- retrieve

def test_retrieve_picks_the_higher_scoring_of_two(scorer):
    params, weights = scorer
    g = random_group(Rng(11), n=2)
    cfg = RetrievalConfig(text_mode="per-candidate")
    res = retrieve(g, params, weights, cfg)
    direct = [
        score_candidate(params, weights, c.tokens, g.query)
        for c in g.candidates
    ]
    assert res.removed_id is None
    np.testing.assert_allclose(res.scores, direct, rtol=0, atol=1e-12)
    assert res.selected_index == int(np.argmax(direct))
    assert res.selected_id == f"c{res.selected_index}"


def test_retrieve_selected_has_maximal_score(scorer):
    params, weights = scorer
    for seed in range(10):
        res = retrieve(random_group(Rng(seed), n=5), params, weights)
        assert res.scores[res.survivor_ids.index(res.selected_id)] == max(res.scores)
        assert res.removed_id not in res.survivor_ids


def test_retrieve_is_permutation_equivariant(scorer):
    params, weights = scorer
    g = random_group(Rng(23), n=5)
    res = retrieve(g, params, weights)
    perm = [3, 0, 4, 1, 2]
    g2 = CandidateGroup(g.group_id, g.query, [g.candidates[i] for i in perm])
    res2 = retrieve(g2, params, weights)
    assert res2.selected_id == res.selected_id
    assert res2.removed_id == res.removed_id
    assert sorted(res2.survivor_ids) == sorted(res.survivor_ids)


def test_retrieve_prefilter_disabled_scores_everyone(scorer):
    params, weights = scorer
    g = random_group(Rng(29), n=4)
    cfg = RetrievalConfig(prefilter_enabled=False, text_mode="per-candidate")
    res = retrieve(g, params, weights, cfg)
    assert res.removed_id is None
    assert res.survivor_ids == [c.candidate_id for c in g.candidates]
    direct = [
        score_candidate(params, weights, c.tokens, g.query)
        for c in g.candidates
    ]
    np.testing.assert_allclose(res.scores, direct, rtol=0, atol=1e-12)


@given(
    scores=st.lists(st.floats(-10, 10), min_size=2, max_size=8),
    transform=st.sampled_from(["affine", "exp", "arctan"]),
)
def test_argmax_selection_survives_monotone_transforms(scores, transform):
    arr = np.asarray(scores)
    gaps = np.diff(np.sort(arr))
    assume(gaps.size == 0 or gaps.min() > 1e-6)
    mapped = {
        "affine": 3.0 * arr + 2.0,
        "exp": np.exp(arr),
        "arctan": np.arctan(arr),
    }[transform]
    assert int(np.argmax(mapped)) == int(np.argmax(arr))


# ---------------------------------------------------------------- batch

def make_checkpoint(tmp_path, params, weights):
    ckpt = tmp_path / "ckpt"
    save_checkpoint(params, OptimizerState.fresh(params), TrainConfig(), ckpt)
    save_interaction_weights(weights, ckpt / "interaction")
    return ckpt


@pytest.fixture()
def batch_setup(tmp_path, scorer):
    params, weights = scorer
    groups = [random_group(Rng(100 + i), f"g{i:03d}") for i in range(12)]
    data = tmp_path / "pool.jsonl"
    save_dataset(groups, data)
    return data, make_checkpoint(tmp_path, params, weights), tmp_path


def test_batch_retrieve_counts_and_format(batch_setup):
    data, ckpt, tmp = batch_setup
    out = tmp / "results.tsv"
    summary = batch_retrieve(data, ckpt, out_path=out)
    assert summary.n_groups == 12
    assert not summary.errors
    assert sum(summary.histogram.values()) == 12
    lines = out.read_text().splitlines()
    body = [l for l in lines if not l.startswith("#")]
    assert len(body) == 12
    for line in body:
        gid, sel, removed, scores = line.split("\t")
        assert sel in {f"c{j}" for j in range(4)}
        assert removed in {f"c{j}" for j in range(4)}
        parts = scores.split(",")
        assert len(parts) == 3
        for p in parts:
            float(p)
            assert len(p.split(".")[1]) == 6
    slot_lines = [l for l in lines if l.startswith("# slot")]
    assert sum(int(l.rsplit(" ", 1)[1]) for l in slot_lines) == 12


def test_batch_retrieve_rerun_is_byte_identical(batch_setup):
    data, ckpt, tmp = batch_setup
    a, b = tmp / "a.tsv", tmp / "b.tsv"
    batch_retrieve(data, ckpt, out_path=a)
    batch_retrieve(data, ckpt, out_path=b, threads=4)
    assert a.read_bytes() == b.read_bytes()


def test_batch_retrieve_empty_dataset(tmp_path, scorer):
    params, weights = scorer
    data = tmp_path / "empty.jsonl"
    save_dataset([], data)
    ckpt = make_checkpoint(tmp_path, params, weights)
    out = tmp_path / "results.tsv"
    summary = batch_retrieve(data, ckpt, out_path=out)
    assert summary == BatchRetrieveSummary(n_groups=0)
    assert out.read_text() == "# groups: 0\n# errors: 0\n"


def test_batch_retrieve_records_per_group_errors(batch_setup):
    data, ckpt, tmp = batch_setup
    lines = data.read_text().splitlines()
    broken = lines[3].replace("00002_c1.avt1", "gone.avt1")
    data.write_text("\n".join(lines[:3] + [broken] + lines[4:]) + "\n")
    out = tmp / "results.tsv"
    summary = batch_retrieve(data, ckpt, out_path=out)
    assert summary.n_groups == 11
    assert len(summary.errors) == 1
    assert summary.errors[0][0] == "g002"
    body = [l for l in out.read_text().splitlines() if not l.startswith("#")]
    assert len(body) == 12
    assert any("\tERROR\t" in l for l in body)
    assert "# errors: 1" in out.read_text()


def test_batch_retrieve_with_bare_ranker_save(tmp_path, scorer):
    params, weights = scorer
    groups = [random_group(Rng(7), "g0")]
    data = tmp_path / "one.jsonl"
    save_dataset(groups, data)
    save_ranker_params(params, tmp_path / "ranker")
    wdir = tmp_path / "wts"
    save_interaction_weights(weights, wdir)
    summary = batch_retrieve(data, tmp_path / "ranker", weights_path=wdir)
    assert summary.n_groups == 1
    with pytest.raises(StateError):
        batch_retrieve(data, tmp_path / "ranker")


def test_retrieve_scores_are_float32_clean_inputs(scorer):
    # dataset blobs round tokens to f32; retrieval on rounded tokens is exact
    params, weights = scorer
    g = random_group(Rng(41), n=4)
    rounded = CandidateGroup(
        g.group_id,
        round_to_f32(g.query),
        [Candidate(c.candidate_id, round_to_f32(c.tokens)) for c in g.candidates],
    )
    r1 = retrieve(rounded, params, weights)
    r2 = retrieve(rounded, params, weights)
    assert r1 == r2
