"""PPO training of the racing policy: actor-critic MLPs, batched rollout
collection over the vectorized environment, GAE, clipped surrogate updates,
a linear learning-rate schedule, and binary checkpoints.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .envs import EnvConfig, RacingVecEnv
from .errors import CheckpointError, ConfigError

LOG_COLUMNS = ("update", "env_steps", "mean_reward", "mean_ep_progress",
               "policy_loss", "value_loss", "clip_frac", "lr")

CHECKPOINT_MAGIC = b"APEXCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    n_envs: int = 400
    n_steps: int = 1024
    batch_size: int = 1024
    epochs_per_update: int = 10
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    total_steps: float = 120e6
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    init_log_std: float = math.log(0.3)
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 50  # updates

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must be in (0, 1]")
        if not self.lr_start >= self.lr_end > 0.0:
            raise ConfigError("need lr_start >= lr_end > 0")
        for name in ("n_envs", "n_steps", "batch_size", "epochs_per_update"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


def _mlp(sizes, slope, out_gain):
    layers = []
    for k in range(len(sizes) - 1):
        layer = nn.Linear(sizes[k], sizes[k + 1])
        last = k == len(sizes) - 2
        nn.init.orthogonal_(layer.weight, gain=out_gain if last else math.sqrt(2.0))
        nn.init.zeros_(layer.bias)
        layers.append(layer)
        if not last:
            layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


class PolicyNetwork(nn.Module):
    """Actor (2x256) and critic (2x512) MLPs with LeakyReLU(0.2) and a
    learned state-independent log standard deviation."""

    def __init__(self, obs_dim: int, action_dim: int = 2,
                 hidden_actor: int = 256, hidden_critic: int = 512,
                 leaky_slope: float = 0.2, init_log_std: float = math.log(0.3)):
        super().__init__()
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.hidden_actor = hidden_actor
        self.hidden_critic = hidden_critic
        self.actor = _mlp([obs_dim, hidden_actor, hidden_actor, action_dim],
                          leaky_slope, 0.01)
        self.critic = _mlp([obs_dim, hidden_critic, hidden_critic, 1],
                           leaky_slope, 1.0)
        self.log_std = nn.Parameter(
            torch.full((action_dim,), float(init_log_std)))

    def forward(self, obs):
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"expected observation size {self.obs_dim}, "
                             f"got {obs.shape[-1]}")
        mean = torch.tanh(self.actor(obs))
        value = self.critic(obs).squeeze(-1)
        return mean, self.log_std.expand_as(mean), value


def gaussian_log_prob(x, mean, log_std):
    """Diagonal Gaussian log density, summed over action dims."""
    var = torch.exp(2.0 * log_std)
    return (-0.5 * ((x - mean) ** 2 / var)
            - log_std - 0.5 * math.log(2.0 * math.pi)).sum(-1)


def policy_forward(net: PolicyNetwork, obs):
    """Deterministic forward pass on one observation or a batch."""
    single = np.ndim(obs) == 1
    obs_t = torch.as_tensor(np.asarray(obs, dtype=np.float32))
    if single:
        obs_t = obs_t.unsqueeze(0)
    with torch.no_grad():
        mean, log_std, value = net(obs_t)
    log_std = log_std.detach()  # expand() view of a Parameter keeps the flag
    if single:
        return mean[0].numpy(), log_std[0].numpy(), float(value[0])
    return mean.numpy(), log_std.numpy(), value.numpy()


def sample_action(mean, log_std, generator):
    """Gaussian sample around the mean, clipped to [-1, 1]; the log
    probability is that of the unclipped Gaussian draw."""
    mean_t = torch.as_tensor(np.asarray(mean, dtype=np.float64))
    log_std_t = torch.as_tensor(np.asarray(log_std, dtype=np.float64))
    raw, logp = _sample_raw(mean_t, log_std_t, generator)
    return np.clip(raw.numpy(), -1.0, 1.0), float(logp)


def _sample_raw(mean, log_std, generator):
    z = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    raw = mean + torch.exp(log_std) * z
    return raw, gaussian_log_prob(raw, mean, log_std)


@dataclass
class RolloutBuffer:
    """Fixed-capacity on-policy storage, laid out (n_steps, n_envs, ...)."""

    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    terminated: np.ndarray
    pos: int = 0

    @classmethod
    def allocate(cls, n_steps, n_envs, obs_dim, action_dim=2):
        return cls(
            observations=np.zeros((n_steps, n_envs, obs_dim), dtype=np.float32),
            actions=np.zeros((n_steps, n_envs, action_dim), dtype=np.float32),
            log_probs=np.zeros((n_steps, n_envs), dtype=np.float64),
            rewards=np.zeros((n_steps, n_envs), dtype=np.float64),
            values=np.zeros((n_steps, n_envs), dtype=np.float64),
            terminated=np.zeros((n_steps, n_envs), dtype=bool),
        )

    @property
    def n_steps(self):
        return self.observations.shape[0]

    @property
    def n_envs(self):
        return self.observations.shape[1]

    def add(self, obs, action, log_prob, reward, value, terminated):
        if self.pos >= self.n_steps:
            raise ConfigError("rollout buffer overfull")
        self.observations[self.pos] = obs
        self.actions[self.pos] = action
        self.log_probs[self.pos] = log_prob
        self.rewards[self.pos] = reward
        self.values[self.pos] = value
        self.terminated[self.pos] = terminated
        self.pos += 1

    @property
    def full(self):
        return self.pos == self.n_steps


def compute_gae(rewards, values, terminated, bootstrap, gamma, lam):
    """Generalized advantage estimation over (T, B) arrays.

    ``terminated`` masks the bootstrap, so terminal steps use no information
    from the next state; ``bootstrap`` is V(s_{T+1}) per env.  Returns
    (advantages, returns) with returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminated = np.asarray(terminated, dtype=bool)
    n_steps = rewards.shape[0]
    adv = np.zeros_like(rewards)
    carry = np.zeros(rewards.shape[1], dtype=np.float64)
    for t in range(n_steps - 1, -1, -1):
        next_v = bootstrap if t == n_steps - 1 else values[t + 1]
        alive = ~terminated[t]
        delta = rewards[t] + gamma * next_v * alive - values[t]
        carry = delta + gamma * lam * alive * carry
        adv[t] = carry
    return adv, adv + values


def ppo_loss_terms(net, obs, actions, old_log_probs, advantages, returns,
                   clip_epsilon, value_coef, entropy_coef):
    """Clipped-surrogate + value + entropy loss on one minibatch."""
    mean, log_std, value = net(obs)
    log_probs = gaussian_log_prob(actions, mean, log_std)
    ratio = torch.exp(log_probs - old_log_probs)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantages
    policy_loss = -torch.minimum(unclipped, clipped).mean()
    value_loss = ((value - returns) ** 2).mean()
    entropy = (0.5 * (1.0 + math.log(2.0 * math.pi)) + log_std).sum()
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy
    with torch.no_grad():
        clip_frac = float((torch.abs(ratio - 1.0) > clip_epsilon).float().mean())
        approx_kl = float((old_log_probs - log_probs).mean())
    return loss, {"policy_loss": policy_loss.detach().item(),
                  "value_loss": value_loss.detach().item(),
                  "entropy": entropy.detach().item(),
                  "clip_frac": clip_frac,
                  "approx_kl": approx_kl}


def normalize_advantages(adv):
    """Zero-mean, unit-std normalization over the whole update batch."""
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(net, buffer: RolloutBuffer, config: PpoConfig, optimizer,
               advantages, returns, generator):
    """Run clipped-surrogate epochs over shuffled minibatches."""
    if not buffer.full:
        raise ConfigError("rollout buffer must be full before an update")
    n_total = buffer.n_steps * buffer.n_envs
    obs = torch.as_tensor(buffer.observations.reshape(n_total, -1))
    actions = torch.as_tensor(buffer.actions.reshape(n_total, -1))
    old_logp = torch.as_tensor(
        buffer.log_probs.reshape(n_total).astype(np.float32))
    adv = normalize_advantages(advantages.reshape(n_total))
    adv_t = torch.as_tensor(adv.astype(np.float32))
    ret_t = torch.as_tensor(returns.reshape(n_total).astype(np.float32))

    agg = {"policy_loss": 0.0, "value_loss": 0.0, "clip_frac": 0.0,
           "approx_kl": 0.0, "entropy": 0.0}
    n_batches = 0
    for _ in range(config.epochs_per_update):
        perm = torch.randperm(n_total, generator=generator)
        for start in range(0, n_total, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, metrics = ppo_loss_terms(
                net, obs[idx], actions[idx], old_logp[idx], adv_t[idx],
                ret_t[idx], config.clip_epsilon, config.value_coef,
                config.entropy_coef)
            if not math.isfinite(loss.detach().item()):
                raise ConfigError(
                    f"non-finite PPO loss (metrics: {metrics})")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), config.max_grad_norm)
            optimizer.step()
            for key in agg:
                agg[key] += metrics[key]
            n_batches += 1
    return {key: val / max(n_batches, 1) for key, val in agg.items()}


def lr_schedule(progress: float, config: PpoConfig) -> float:
    """Linear decay from lr_start to lr_end over training progress [0, 1]."""
    progress = min(max(progress, 0.0), 1.0)
    return config.lr_start + (config.lr_end - config.lr_start) * progress


# ---------------------------------------------------------------------------
# Training loop

def collect_rollouts(venv: RacingVecEnv, net: PolicyNetwork, obs,
                     buffer: RolloutBuffer, gamma: float, generator):
    """Fill the buffer from the vectorized env with auto-reset.

    Truncated (not terminated) steps get their reward augmented by the
    discounted value of the final observation, which keeps GAE bootstrapping
    correct across episode caps.  Returns (last obs, episode stats).
    """
    ep_progress = []
    ep_steps = []
    for _ in range(buffer.n_steps):
        obs_t = torch.as_tensor(obs)
        with torch.no_grad():
            mean, log_std, value = net(obs_t)
            raw, logp = _sample_raw(mean, log_std, generator)
        actions = raw.numpy()
        res = venv.step(actions)  # env clips actions to [-1, 1]
        reward = res.reward.copy()
        truncated = res.truncated
        if truncated.any():
            rows = np.where(truncated)[0]
            final_obs = torch.as_tensor(res.info["final_observation"][rows])
            with torch.no_grad():
                _, _, v_final = net(final_obs)
            reward[rows] += gamma * v_final.numpy()
        done = res.terminated | truncated
        if done.any():
            ep_progress.extend(res.info["episode_progress"][done].tolist())
            ep_steps.extend(res.info["episode_steps"][done].tolist())
        buffer.add(obs, actions, logp.numpy(), reward,
                   value.numpy(), res.terminated)
        obs = res.observation
    return obs, {"episode_progress": ep_progress, "episode_steps": ep_steps}


def train(track, params, env_config: EnvConfig, config: PpoConfig,
          out_dir=None, resume=None, log_every: int = 1):
    """Alternate rollout collection and PPO updates for the step budget.

    Deterministic for a fixed seed and thread count.  Returns
    (PolicyNetwork, list of log-row dicts).  When ``out_dir`` is given,
    checkpoints and the training-log CSV land there.
    """
    torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    venv = RacingVecEnv(track, params, env_config, config.n_envs,
                        seed=config.seed)
    net = PolicyNetwork(venv.obs_dim, init_log_std=config.init_log_std)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr_start)
    env_steps = 0
    update0 = 0
    if resume is not None:
        meta = load_checkpoint(resume, net=net, optimizer=optimizer,
                               expected_obs_dim=venv.obs_dim)
        env_steps = int(meta.get("env_steps", 0))
        update0 = int(meta.get("updates", 0))

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    log_writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fresh = resume is None or not (out_dir / "training_log.csv").exists()
        log_file = open(out_dir / "training_log.csv",
                        "w" if fresh else "a", newline="")
        log_writer = csv.writer(log_file)
        if fresh:
            log_writer.writerow(LOG_COLUMNS)

    g_sample = torch.Generator().manual_seed(config.seed * 7919 + 1)
    g_batch = torch.Generator().manual_seed(config.seed * 7919 + 2)
    steps_per_update = config.n_envs * config.n_steps
    n_updates = max(int(math.ceil((config.total_steps - env_steps)
                                  / steps_per_update)), 0)
    buffer = RolloutBuffer.allocate(config.n_steps, config.n_envs,
                                    venv.obs_dim)
    obs = venv.reset()
    rows = []
    last_ep_progress = 0.0
    try:
        for u in range(update0, update0 + n_updates):
            lr = lr_schedule(env_steps / config.total_steps, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            buffer.pos = 0
            obs, ep_stats = collect_rollouts(venv, net, obs, buffer,
                                             config.gamma, g_sample)
            with torch.no_grad():
                _, _, v_boot = net(torch.as_tensor(obs))
            adv, ret = compute_gae(buffer.rewards, buffer.values,
                                   buffer.terminated, v_boot.numpy(),
                                   config.gamma, config.gae_lambda)
            metrics = ppo_update(net, buffer, config, optimizer, adv, ret,
                                 g_batch)
            env_steps += steps_per_update
            if ep_stats["episode_progress"]:
                last_ep_progress = float(np.mean(ep_stats["episode_progress"]))
            row = {
                "update": u + 1,
                "env_steps": env_steps,
                "mean_reward": float(buffer.rewards.mean()),
                "mean_ep_progress": last_ep_progress,
                "policy_loss": metrics["policy_loss"],
                "value_loss": metrics["value_loss"],
                "clip_frac": metrics["clip_frac"],
                "lr": lr,
            }
            rows.append(row)
            if log_writer is not None and (u + 1) % log_every == 0:
                log_writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
                log_file.flush()
            if out_dir is not None and config.checkpoint_every > 0 \
                    and (u + 1) % config.checkpoint_every == 0:
                save_checkpoint(net, optimizer, out_dir / f"ckpt_{u + 1:06d}.bin",
                                env_steps=env_steps, updates=u + 1)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(net, optimizer, out_dir / "ckpt_final.bin",
                        env_steps=env_steps, updates=update0 + n_updates)
    return net, rows


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


# ---------------------------------------------------------------------------
# Checkpoints: magic, version byte, JSON manifest, then per-tensor blocks of
# little-endian float32 preceded by a shape header.

def _tensor_entries(net: PolicyNetwork, optimizer):
    entries = [(f"net.{name}", tensor.detach())
               for name, tensor in net.state_dict().items()]
    steps = {}
    if optimizer is not None:
        params = list(net.parameters())
        for k, p in enumerate(params):
            state = optimizer.state.get(p)
            if not state:
                continue
            entries.append((f"opt.{k}.exp_avg", state["exp_avg"]))
            entries.append((f"opt.{k}.exp_avg_sq", state["exp_avg_sq"]))
            step = state.get("step", 0)
            steps[str(k)] = int(step.item() if torch.is_tensor(step) else step)
    return entries, steps


def save_checkpoint(net: PolicyNetwork, optimizer, path, env_steps=0,
                    updates=0):
    """Write the self-describing binary checkpoint container."""
    entries, steps = _tensor_entries(net, optimizer)
    meta = {
        "obs_dim": net.obs_dim,
        "action_dim": net.action_dim,
        "hidden_actor": net.hidden_actor,
        "hidden_critic": net.hidden_critic,
        "env_steps": int(env_steps),
        "updates": int(updates),
        "opt_steps": steps,
        "tensors": [name for name, _ in entries],
    }
    blob = json.dumps(meta).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, tensor in entries:
            arr = tensor.numpy().astype("<f4")
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{max(arr.ndim, 1)}I",
                                 *(arr.shape or (1,))))
            fh.write(arr.tobytes())


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return data


def load_checkpoint(path, net: PolicyNetwork | None = None, optimizer=None,
                    expected_obs_dim: int | None = None):
    """Load a checkpoint; returns the metadata dict.

    Builds a fresh network when ``net`` is None (retrieve it from the
    returned meta under "net").  Refuses observation-dimension mismatches.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CHECKPOINT_MAGIC), path) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic (not an APEXCKPT file)")
        version = struct.unpack("<B", _read_exact(fh, 1, path))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        meta_len = struct.unpack("<I", _read_exact(fh, 4, path))[0]
        try:
            meta = json.loads(_read_exact(fh, meta_len, path))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt metadata: {exc}") from None
        if expected_obs_dim is not None and meta["obs_dim"] != expected_obs_dim:
            raise CheckpointError(
                f"{path}: checkpoint observation size {meta['obs_dim']} does "
                f"not match environment observation size {expected_obs_dim}")
        tensors = {}
        for name in meta["tensors"]:
            ndim = struct.unpack("<B", _read_exact(fh, 1, path))[0]
            shape = struct.unpack(f"<{max(ndim, 1)}I",
                                  _read_exact(fh, 4 * max(ndim, 1), path))
            shape = shape[:ndim]
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * count, path), dtype="<f4")
            tensors[name] = torch.from_numpy(
                data.reshape(shape).astype(np.float32))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor blocks")

    if net is None:
        net = PolicyNetwork(meta["obs_dim"], meta["action_dim"],
                            meta["hidden_actor"], meta["hidden_critic"])
        meta = dict(meta, net=net)
    if net.obs_dim != meta["obs_dim"]:
        raise CheckpointError(
            f"{path}: checkpoint observation size {meta['obs_dim']} does not "
            f"match network observation size {net.obs_dim}")
    state = {name[len("net."):]: tensor for name, tensor in tensors.items()
             if name.startswith("net.")}
    net.load_state_dict(state)

    if optimizer is not None:
        params = list(net.parameters())
        for key, step in meta.get("opt_steps", {}).items():
            k = int(key)
            p = params[k]
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": tensors[f"opt.{k}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"opt.{k}.exp_avg_sq"].clone(),
            }
    return meta
