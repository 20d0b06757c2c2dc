import numpy as np
import pytest
from conftest import traj

from hisr import encoder as enc
from hisr import env, vocab
from hisr import nnkit as nk
from hisr.policy import (
    PolicyNet,
    action_logprobs,
    bc_loss,
    bc_train,
    choose,
    collect_rollouts,
    evaluate,
    make_episodes,
    mean_nll,
    run_episodes,
    sample_action,
    trajectory_token_logprobs,
)
from hisr.trajectory import validate_trajectory


def uniform_net():
    net = PolicyNet.create(0, embed=4, hidden=3)
    net.params.arrays["out.w"][:] = 0.0
    return net


def test_uniform_head_log_likelihood():
    t = traj(["go fridge", "take apple fridge"])
    lp = action_logprobs(uniform_net(), enc.history_tokens(t, 1), t.turns[0].act)
    assert lp.total == pytest.approx(2 * np.log(1 / 64), abs=1e-12)
    assert vocab.VOCAB_SIZE == 64
    assert np.all(lp.terms <= 0)


def test_action_logprobs_validation(tiny_net):
    with pytest.raises(ValueError):
        action_logprobs(tiny_net, [1, vocab.ID["NOTHING"]], [20])
    with pytest.raises(ValueError):
        action_logprobs(tiny_net, [1, vocab.SEP], [999])


def test_batched_and_single_likelihoods_agree(tiny_net, expert_demos):
    batched = trajectory_token_logprobs(tiny_net, expert_demos[:3])
    for t, per_turn in zip(expert_demos[:3], batched):
        for k in (1, t.m):
            single = action_logprobs(tiny_net, enc.history_tokens(t, k), t.turns[k - 1].act).terms
            assert np.allclose(single, per_turn[k - 1], atol=1e-12)


def test_distributions_are_normalised(tiny_net, expert_demos):
    b = enc.make_batch(expert_demos[:2])
    from hisr.policy import batch_logits

    _, logits = batch_logits(tiny_net.params.consts(), b)
    for mask in (None, b.tok_allowed):
        p = np.exp(nk.log_softmax(logits, mask).value)
        assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-9)


def test_bc_gradient_matches_finite_differences(expert_demos):
    net = PolicyNet.create(1, embed=3, hidden=2)
    batch = enc.make_batch(expert_demos[:2])
    leaves = net.params.leaves()
    g = nk.grad(bc_loss(leaves, batch), leaves)
    fd = nk.finite_difference(lambda p: float(bc_loss({k: nk.Tensor(v) for k, v in p.items()}, batch).value), net.params.copy().arrays)
    for k in g:
        assert nk.relative_error(g[k], fd[k], floor=1e-7) <= 1e-4, k


def test_bc_nll_decreases_each_epoch(expert_demos):
    net = bc_train(PolicyNet.create(0, embed=8, hidden=8), expert_demos, epochs=3, lr=3e-3, batch=4)
    assert all(b <= a + 1e-6 for a, b in zip(net.curve, net.curve[1:]))
    assert net.curve[-1] < net.curve[0]


def test_bc_edge_cases(tiny_net, expert_demos):
    same = bc_train(tiny_net, expert_demos, epochs=0)
    assert same.params.equal(tiny_net.params)
    with pytest.raises(ValueError):
        bc_train(tiny_net, [], epochs=1)


def test_memorising_one_demo_drives_nll_to_zero(expert_demos):
    t = expert_demos[0]
    net = bc_train(PolicyNet.create(0, embed=8, hidden=16), [t], epochs=300, lr=3e-2, batch=1)
    assert mean_nll(net, [t]) < 1e-2
    for k in range(1, t.m + 1):
        assert action_logprobs(net, enc.history_tokens(t, k), t.turns[k - 1].act, constrained=True).total >= -1e-1


def test_greedy_sampling_is_deterministic_and_grammatical(tiny_net, rng):
    hist = list(vocab.ids("TASK mug shelf")) + [vocab.SEP]
    a = sample_action(tiny_net, hist, 0.0, None)
    assert a == sample_action(tiny_net, hist, 0.0, None)
    for _ in range(200):
        assert vocab.is_grammatical(sample_action(tiny_net, hist, 1.5, rng))


def test_temperature_sampling_matches_softmax():
    rng = np.random.default_rng(7)
    logits = np.zeros(vocab.VOCAB_SIZE)
    a, b = vocab.ID["go"], vocab.ID["take"]
    logits[b] = np.log(4.0)
    n = 1000
    hits = sum(choose(logits, [a, b], 0.7, rng) == b for _ in range(n))
    p = 4 ** (1 / 0.7) / (1 + 4 ** (1 / 0.7))
    assert abs(hits - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_grammar_mask_after_take():
    assert vocab.allowed_next(vocab.ids("take")) == vocab.OBJECT_IDS
    assert vocab.allowed_next(vocab.ids("take mug")) == vocab.RECEPTACLE_IDS
    assert vocab.allowed_next(vocab.ids("take mug shelf")) == []
    assert np.array_equal(np.flatnonzero(vocab.allowed_mask(vocab.ids("go"))), vocab.RECEPTACLE_IDS)


def test_rollouts_replay_and_validate(tiny_net, small_suite):
    ts = collect_rollouts(tiny_net, small_suite[:10], N=10, temperature=0.7, seed=3, filtered=False)
    assert len(ts) == 100
    for t, spec in zip(ts, [s for s in small_suite[:10] for _ in range(10)]):
        assert validate_trajectory(t, spec.max_turns) == []
        env.replay(spec, t)
    kept = collect_rollouts(tiny_net, small_suite[:10], N=10, temperature=0.7, seed=3)
    assert len(kept) <= 100
    assert kept == collect_rollouts(tiny_net, small_suite[:10], N=10, temperature=0.7, seed=3)
    with pytest.raises(ValueError):
        collect_rollouts(tiny_net, small_suite, N=0)


def test_greedy_rollouts_are_identical_per_task(tiny_net, small_suite):
    ts = collect_rollouts(tiny_net, small_suite[:3], N=4, temperature=0.0, seed=1, filtered=False)
    for i in range(3):
        group = ts[4 * i : 4 * i + 4]
        assert all(g == group[0] for g in group)


def test_recorded_logps_match_teacher_forcing(tiny_net, small_suite):
    eps = make_episodes(small_suite[:4], 2, seed=9)
    run_episodes(tiny_net, eps, 1.0)
    forced = trajectory_token_logprobs(tiny_net, [ep.trajectory() for ep in eps], constrained=True)
    for ep, per_turn in zip(eps, forced):
        for rec, tf in zip(ep.logps, per_turn):
            assert np.allclose(rec, tf, atol=1e-10)


def test_evaluate_is_deterministic(tiny_net, small_suite):
    assert evaluate(tiny_net, small_suite, 0) == evaluate(tiny_net, small_suite, 0)
