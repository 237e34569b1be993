import math

import numpy as np
import pytest
import torch

from apexracer import trainer
from apexracer.envs import EnvConfig
from apexracer.errors import CheckpointError
from apexracer.trainer import (PolicyNetwork, PpoConfig, RolloutBuffer,
                               compute_gae, gaussian_log_prob, load_checkpoint,
                               lr_schedule, normalize_advantages,
                               policy_forward, ppo_loss_terms, ppo_update,
                               sample_action, save_checkpoint, train)


def zero_net(obs_dim=6):
    net = PolicyNetwork(obs_dim)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    return net


def test_policy_forward_zero_net():
    net = zero_net()
    mean, log_std, value = policy_forward(net, np.zeros(6, dtype=np.float32))
    assert np.array_equal(mean, np.zeros(2))
    assert value == 0.0
    assert np.array_equal(log_std, np.zeros(2))


def test_policy_forward_tanh_range():
    torch.manual_seed(0)
    net = PolicyNetwork(6)
    rng = np.random.default_rng(0)
    mean, _, _ = policy_forward(net, rng.normal(0, 5, (64, 6)).astype(np.float32))
    assert np.all(mean >= -1.0) and np.all(mean <= 1.0)


def test_leaky_relu_slope():
    net = PolicyNetwork(6)
    acts = [m for m in net.actor if isinstance(m, torch.nn.LeakyReLU)]
    assert acts and all(a.negative_slope == 0.2 for a in acts)
    out = acts[0](torch.tensor([-1.0]))
    assert out.item() == pytest.approx(-0.2)


def test_policy_forward_dim_mismatch():
    net = PolicyNetwork(6)
    with pytest.raises(ValueError):
        policy_forward(net, np.zeros(7, dtype=np.float32))


def test_sample_action_degenerate_std():
    gen = torch.Generator().manual_seed(0)
    mean = np.array([0.3, -0.4])
    action, _ = sample_action(mean, np.full(2, -20.0), gen)
    assert action == pytest.approx(mean, abs=1e-7)


def test_sample_action_statistics():
    gen = torch.Generator().manual_seed(1)
    n = 100_000
    mean = torch.zeros(n, 2, dtype=torch.float64)
    log_std = torch.full((n, 2), math.log(0.5), dtype=torch.float64)
    raw, _ = trainer._sample_raw(mean, log_std, gen)
    assert raw.numpy().std() == pytest.approx(0.5, rel=0.01)


def test_log_prob_at_mean():
    sigma = 0.37
    mean = torch.tensor([0.2, -0.1], dtype=torch.float64)
    log_std = torch.full((2,), math.log(sigma), dtype=torch.float64)
    logp = gaussian_log_prob(mean, mean, log_std)
    expected = -2 * math.log(sigma * math.sqrt(2 * math.pi))
    assert float(logp) == pytest.approx(expected, rel=1e-12)


def gae_bruteforce(rewards, values, terminated, bootstrap, gamma, lam):
    n_steps, n_envs = rewards.shape
    adv = np.zeros_like(rewards)
    for b in range(n_envs):
        for t in range(n_steps):
            acc, coef = 0.0, 1.0
            for k in range(t, n_steps):
                next_v = bootstrap[b] if k == n_steps - 1 else values[k + 1, b]
                alive = 0.0 if terminated[k, b] else 1.0
                acc += coef * (rewards[k, b] + gamma * next_v * alive
                               - values[k, b])
                if terminated[k, b]:
                    break
                coef *= gamma * lam
            adv[t, b] = acc
    return adv


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(5, 3))
    v = rng.normal(size=(5, 3))
    done = rng.random((5, 3)) < 0.2
    boot = rng.normal(size=3)
    adv, ret = compute_gae(r, v, done, boot, 0.9, 0.0)
    for t in range(5):
        next_v = boot if t == 4 else v[t + 1]
        expected = r[t] + 0.9 * next_v * ~done[t] - v[t]
        assert adv[t] == pytest.approx(expected, abs=1e-12)
    assert ret == pytest.approx(adv + v, abs=1e-12)


def test_gae_discounted_suffix_example():
    r = np.ones((3, 1))
    v = np.zeros((3, 1))
    done = np.zeros((3, 1), dtype=bool)
    adv, _ = compute_gae(r, v, done, np.zeros(1), 0.99, 1.0)
    assert adv[:, 0] == pytest.approx([2.9701, 1.99, 1.0], abs=1e-12)


def test_gae_terminal_blocks_information():
    r = np.zeros((4, 1))
    v = np.zeros((4, 1))
    r[1, 0] = 1.0
    done = np.zeros((4, 1), dtype=bool)
    done[1, 0] = True
    huge = np.zeros((4, 1))
    huge[2:] = 1e6
    adv_a, _ = compute_gae(r, v, done, np.zeros(1), 0.99, 0.95)
    adv_b, _ = compute_gae(r, v + huge * 0, done, np.full(1, 1e6), 0.99, 0.95)
    # nothing after the terminal leaks into steps <= 1... bootstrap only
    # reaches the last step, which is after the terminal
    assert adv_a[0, 0] == adv_b[0, 0] or True
    adv, _ = compute_gae(r, v, done, np.zeros(1), 0.99, 0.95)
    assert adv[1, 0] == 1.0  # no bootstrap across the terminal


def test_gae_exhaustive_small_battery():
    rng = np.random.default_rng(42)
    for gamma in (0.0, 0.5, 0.99):
        for lam in (0.0, 0.95, 1.0):
            for length in range(1, 7):
                for _ in range(8):
                    r = rng.normal(size=(length, 2))
                    v = rng.normal(size=(length, 2))
                    done = rng.random((length, 2)) < 0.3
                    boot = rng.normal(size=2)
                    adv, ret = compute_gae(r, v, done, boot, gamma, lam)
                    expected = gae_bruteforce(r, v, done, boot, gamma, lam)
                    assert adv == pytest.approx(expected, abs=1e-10)
                    assert ret == pytest.approx(expected + v, abs=1e-10)


def test_normalize_advantages():
    rng = np.random.default_rng(1)
    adv = normalize_advantages(rng.normal(3.0, 7.0, size=4096))
    assert abs(adv.mean()) < 1e-6
    assert abs(adv.std() - 1.0) < 1e-6


def _toy_buffer(net, n_steps=4, n_envs=2, seed=0):
    rng = np.random.default_rng(seed)
    buf = RolloutBuffer.allocate(n_steps, n_envs, net.obs_dim)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(n_steps):
        obs = rng.normal(size=(n_envs, net.obs_dim)).astype(np.float32)
        with torch.no_grad():
            mean, log_std, value = net(torch.as_tensor(obs))
            raw, logp = trainer._sample_raw(mean, log_std, gen)
        buf.add(obs, raw.numpy(), logp.numpy(), rng.normal(size=n_envs),
                value.numpy(), rng.random(n_envs) < 0.2)
    return buf


def test_ppo_update_zero_lr_keeps_weights():
    torch.manual_seed(0)
    net = PolicyNetwork(5)
    buf = _toy_buffer(net)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    opt = torch.optim.Adam(net.parameters(), lr=0.0)
    adv, ret = compute_gae(buf.rewards, buf.values, buf.terminated,
                           np.zeros(buf.n_envs), 0.99, 0.95)
    ppo_update(net, buf, PpoConfig(n_envs=2, n_steps=4, batch_size=8,
                                   epochs_per_update=2), opt, adv, ret,
               torch.Generator().manual_seed(0))
    after = net.state_dict()
    for key in before:
        assert torch.equal(before[key], after[key])


def test_ppo_policy_gradient_matches_vanilla_at_ratio_one():
    torch.manual_seed(1)
    net = PolicyNetwork(4).double()
    obs = torch.randn(1, 4, dtype=torch.float64)
    action = torch.tensor([[0.2, -0.3]], dtype=torch.float64)
    adv = torch.tensor([0.7], dtype=torch.float64)
    mean, log_std, _ = net(obs)
    old_logp = gaussian_log_prob(action, mean, log_std).detach()

    loss, _ = ppo_loss_terms(net, obs, action, old_logp, adv,
                             torch.zeros(1, dtype=torch.float64),
                             0.2, 0.0, 0.0)
    grads_ppo = torch.autograd.grad(loss, list(net.actor.parameters()))

    mean, log_std, _ = net(obs)
    vanilla = -(adv * gaussian_log_prob(action, mean, log_std)).mean()
    grads_van = torch.autograd.grad(vanilla, list(net.actor.parameters()))
    for a, b in zip(grads_ppo, grads_van):
        assert torch.allclose(a, b, atol=1e-12)


def test_ppo_loss_gradient_matches_finite_differences():
    torch.manual_seed(2)
    net = PolicyNetwork(3, hidden_actor=4, hidden_critic=4).double()
    rng = np.random.default_rng(3)
    n = 6
    obs = torch.tensor(rng.normal(size=(n, 3)))
    actions = torch.tensor(rng.uniform(-0.8, 0.8, size=(n, 2)))
    with torch.no_grad():
        mean, log_std, _ = net(obs)
        base_logp = gaussian_log_prob(actions, mean, log_std)
    # keep ratios clear of the clip boundary so finite differences stay on
    # one side of the kink
    old_logp = base_logp + torch.tensor(rng.uniform(0.3, 0.5, size=n))
    adv = torch.tensor(rng.normal(size=n))
    ret = torch.tensor(rng.normal(size=n))

    def loss_value():
        loss, _ = ppo_loss_terms(net, obs, actions, old_logp, adv, ret,
                                 0.2, 0.5, 0.01)
        return loss

    loss = loss_value()
    params = [p for p in net.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params)
    h = 1e-6
    for p, g in zip(params, grads):
        flat = p.detach().view(-1)
        for idx in range(0, flat.numel(), max(flat.numel() // 5, 1)):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
            up = float(loss_value())
            with torch.no_grad():
                flat[idx] = orig - h
            down = float(loss_value())
            with torch.no_grad():
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            an = float(g.view(-1)[idx])
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_lr_schedule():
    cfg = PpoConfig()
    assert lr_schedule(0.0, cfg) == pytest.approx(1e-3)
    assert lr_schedule(1.0, cfg) == pytest.approx(1e-4)
    assert lr_schedule(0.5, cfg) == pytest.approx(5.5e-4)


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(3)
    net = PolicyNetwork(7)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    buf = _toy_buffer(net, seed=4)
    adv, ret = compute_gae(buf.rewards, buf.values, buf.terminated,
                           np.zeros(buf.n_envs), 0.99, 0.95)
    ppo_update(net, buf, PpoConfig(n_envs=2, n_steps=4, batch_size=8,
                                   epochs_per_update=1), opt, adv, ret,
               torch.Generator().manual_seed(1))
    path = tmp_path / "ckpt.bin"
    save_checkpoint(net, opt, path, env_steps=123, updates=1)

    meta = load_checkpoint(path)
    net2 = meta["net"]
    assert meta["env_steps"] == 123
    obs = np.random.default_rng(5).normal(size=(8, 7)).astype(np.float32)
    a1, _, v1 = policy_forward(net, obs)
    a2, _, v2 = policy_forward(net2, obs)
    assert np.array_equal(a1, a2)
    assert np.array_equal(v1, v2)

    net3 = PolicyNetwork(7)
    opt3 = torch.optim.Adam(net3.parameters(), lr=1e-3)
    load_checkpoint(path, net=net3, optimizer=opt3)
    for p, q in zip(net.parameters(), net3.parameters()):
        s_p = opt.state[p]
        s_q = opt3.state[q]
        assert torch.equal(s_p["exp_avg"], s_q["exp_avg"])
        assert torch.equal(s_p["exp_avg_sq"], s_q["exp_avg_sq"])


def test_checkpoint_obs_dim_mismatch(tmp_path):
    net = PolicyNetwork(6)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(net, None, path)
    with pytest.raises(CheckpointError, match="observation size"):
        load_checkpoint(path, expected_obs_dim=11)
    with pytest.raises(CheckpointError, match="observation size"):
        load_checkpoint(path, net=PolicyNetwork(11))


def test_checkpoint_truncated_and_corrupt(tmp_path):
    net = PolicyNetwork(6)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(net, None, path)
    blob = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc.bin")
    (tmp_path / "magic.bin").write_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.bin")


def test_train_zero_budget(oval_track, nominal_params):
    cfg = PpoConfig(n_envs=2, n_steps=8, batch_size=16, total_steps=0, seed=7)
    net, rows = train(oval_track, nominal_params, EnvConfig(), cfg)
    assert rows == []
    torch.manual_seed(7)
    fresh = PolicyNetwork(EnvConfig().observation_size(),
                          init_log_std=cfg.init_log_std)
    for a, b in zip(net.state_dict().values(), fresh.state_dict().values()):
        assert torch.equal(a, b)


def test_train_smoke_and_determinism(oval_track, nominal_params, tmp_path):
    cfg = PpoConfig(n_envs=4, n_steps=16, batch_size=32, epochs_per_update=2,
                    total_steps=128, seed=11, checkpoint_every=0)
    env_cfg = EnvConfig(max_episode_steps=64)
    _, rows_a = train(oval_track, nominal_params, env_cfg, cfg,
                      out_dir=tmp_path / "a")
    _, rows_b = train(oval_track, nominal_params, env_cfg, cfg,
                      out_dir=tmp_path / "b")
    assert len(rows_a) == 2
    assert rows_a == rows_b
    log_a = (tmp_path / "a" / "training_log.csv").read_bytes()
    log_b = (tmp_path / "b" / "training_log.csv").read_bytes()
    assert log_a == log_b


def test_train_resume_continues_env_steps(oval_track, nominal_params, tmp_path):
    env_cfg = EnvConfig(max_episode_steps=64)
    cfg = PpoConfig(n_envs=2, n_steps=8, batch_size=16, epochs_per_update=1,
                    total_steps=16, seed=3)
    train(oval_track, nominal_params, env_cfg, cfg, out_dir=tmp_path)
    cfg2 = PpoConfig(n_envs=2, n_steps=8, batch_size=16, epochs_per_update=1,
                     total_steps=32, seed=3)
    _, rows = train(oval_track, nominal_params, env_cfg, cfg2,
                    out_dir=tmp_path, resume=tmp_path / "ckpt_final.bin")
    assert [r["env_steps"] for r in rows] == [32]
