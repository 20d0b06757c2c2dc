import numpy as np
import pytest
from oracles import gae_bruteforce, random_gae_case

from hisr import encoder as enc
from hisr import env
from hisr import nnkit as nk
from hisr import ppo
from hisr.policy import PolicyNet, trajectory_token_logprobs


def test_gae_worked_examples():
    adv, ret = ppo.gae([0.0, 1.0], [0.0, 0.0, 0.0], 1.0, 1.0)
    assert adv.tolist() == [1.0, 1.0] and ret.tolist() == [1.0, 1.0]
    adv, _ = ppo.gae([1.0, 0.0, 2.0], [0.5, 0.5, 0.5, 0.0], 0.5, 0.0)
    assert np.allclose(adv, [1.0 + 0.25 - 0.5, 0.25 - 0.5, 2.0 - 0.5])
    with pytest.raises(ValueError):
        ppo.gae([1.0], [0.0])
    with pytest.raises(ValueError):
        ppo.PpoConfig(gamma=1.5)


def test_gae_matches_double_sum(rng):
    for _ in range(200):
        r, v, g, l = random_gae_case(rng)
        adv, ret = ppo.gae(r, v, g, l)
        assert np.allclose(adv, gae_bruteforce(r, v, g, l), rtol=0, atol=1e-10)
        assert np.allclose(ret, adv + v[:-1], rtol=0, atol=0)


def test_full_lambda_telescopes_to_discounted_return(rng):
    r = rng.normal(size=7)
    v = np.append(rng.normal(size=7), 0.0)
    _, ret = ppo.gae(r, v, 0.9, 1.0)
    want = [sum(0.9**l * r[t + l] for l in range(7 - t)) for t in range(7)]
    assert np.allclose(ret, want, atol=1e-12)


def _setup(small_suite, net, n=4):
    rng = np.random.default_rng(0)
    ts = [env.expert_episode(s, i, rng, 0.5, 0.3) for i, s in enumerate(small_suite[:n])]
    b = enc.make_batch(ts)
    old = np.concatenate([[lp.sum() for lp in per] for per in trajectory_token_logprobs(net, ts, constrained=True)])
    return ts, b, old


def test_surrogate_at_unit_ratio(small_suite, tiny_net, rng):
    ts, b, old = _setup(small_suite, tiny_net)
    ref_lp = ppo.reference_logprobs(tiny_net, b)
    adv = rng.normal(size=len(old))
    loss, stats = ppo.policy_objective(tiny_net.params.consts(), b, old, adv, ref_lp, 0.2, 1e-2)
    assert stats["surrogate"] == pytest.approx(adv.mean(), abs=1e-12)
    assert stats["clip_frac"] == 0.0 and stats["kl"] == pytest.approx(0.0, abs=1e-12)
    assert float(loss.value) == pytest.approx(-adv.mean(), abs=1e-12)

    leaves = tiny_net.params.leaves()
    zero, _ = ppo.policy_objective(leaves, b, old, np.zeros_like(old), ref_lp, 0.2, 0.0)
    assert all(np.all(g == 0.0) for g in nk.grad(zero, leaves).values())


def test_policy_loss_gradient(small_suite, tiny_net, rng):
    ts, b, old = _setup(small_suite, tiny_net, n=3)
    # shift old log-probs so some ratios land outside the clip band, away from its edges
    shift = rng.choice([-0.6, -0.05, 0.05, 0.6], size=len(old))
    adv = rng.normal(size=len(old))
    ref_lp = ppo.reference_logprobs(PolicyNet.create(9, embed=6, hidden=5), b)

    def loss(P):
        return ppo.policy_objective(P, b, old + shift, adv, ref_lp, 0.2, 0.1)[0]

    leaves = tiny_net.params.leaves()
    g = nk.grad(loss(leaves), leaves)
    fd = nk.finite_difference(lambda p: float(loss({k: nk.Tensor(v) for k, v in p.items()}).value), tiny_net.params.copy().arrays)
    for k in g:
        assert nk.relative_error(g[k], fd[k], floor=1e-6) <= 1e-4, k
    assert 0 < ppo.policy_objective(tiny_net.params.consts(), b, old + shift, adv, ref_lp, 0.2, 0.1)[1]["clip_frac"] < 1


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_advantage_sign_moves_probability(small_suite, tiny_net, sign):
    ts, b, old = _setup(small_suite, tiny_net, n=1)
    pol = tiny_net.copy()
    ref_lp = ppo.reference_logprobs(tiny_net, b)
    opt = nk.OptimState(lr=1e-3)
    leaves = pol.params.leaves()
    loss, _ = ppo.policy_objective(leaves, b, old, np.full(len(old), sign), ref_lp, 0.2, 0.0)
    nk.adam_step(pol.params, nk.grad(loss, leaves), opt)
    new = np.concatenate([[lp.sum() for lp in per] for per in trajectory_token_logprobs(pol, ts, constrained=True)])
    assert sign * (new.sum() - old.sum()) > 0


def _train(small_suite, iters, seed=0):
    pol = PolicyNet.create(1, embed=6, hidden=5)
    vn = ppo.ValueNet.from_policy(pol, 0, width=4)
    cfg = ppo.PpoConfig(tasks_per_iter=3, episodes_per_task=2, minibatch=4, epochs=1)
    reward = lambda ts, _pol: [np.eye(t.m)[-1] * t.outcome for t in ts]  # noqa: E731
    return pol, ppo.train_loop(pol, vn, small_suite, reward, iters, cfg, seed, eval_suite=small_suite[:4])


def test_zero_iterations_keeps_policy(small_suite):
    pol, res = _train(small_suite, 0)
    assert res.policy.params.equal(pol.params)
    assert len(res.curve) == 1 and res.curve[0]["iteration"] == 0


def test_training_is_deterministic(small_suite, tmp_path):
    _, a = _train(small_suite, 2, seed=5)
    _, b = _train(small_suite, 2, seed=5)
    assert a.policy.params.equal(b.policy.params) and a.value.params.equal(b.value.params)
    ppo.write_curve(a.curve, tmp_path / "a.csv")
    ppo.write_curve(b.curve, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(ppo.CURVE_COLUMNS)
    _, c = _train(small_suite, 2, seed=6)
    assert not a.policy.params.equal(c.policy.params)
