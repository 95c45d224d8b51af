"""Soft Actor-Critic over set-valued glimpse states.

The state is four aligned per-patch sequences (pixels, coordinates,
importances, encoder latents).  Actor and critics each own a separate set
encoder: per-component token embeddings, concatenated, then masked attention
pooling.  Actions live in [0, 1]^3 through a logistic squashing of a
Gaussian sample.
"""

from __future__ import annotations

import copy
import math
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
COMPONENTS = ("patches", "coords", "importances", "latents")


@dataclass
class AgentState:
    """Batched state; every tensor is padded to a common length ``N`` with ``mask``."""

    patches: torch.Tensor      # B x N x C x p x p
    coords: torch.Tensor       # B x N x 3
    importances: torch.Tensor  # B x N
    latents: torch.Tensor      # B x N x E
    mask: torch.Tensor         # B x N bool

    def __post_init__(self):
        lengths = {t.shape[:2] for t in (self.patches, self.coords, self.importances, self.latents, self.mask)}
        if len(lengths) != 1:
            raise ValueError(f"state components disagree on batch/length: {lengths}")

    @classmethod
    def empty(cls, batch: int, d_patch: int, latent_dim: int, channels: int = 3) -> "AgentState":
        return cls(torch.zeros(batch, 0, channels, d_patch, d_patch), torch.zeros(batch, 0, 3),
                   torch.zeros(batch, 0), torch.zeros(batch, 0, latent_dim),
                   torch.zeros(batch, 0, dtype=torch.bool))

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]

    @property
    def length(self) -> int:
        return self.mask.shape[1]

    def index(self, idx) -> "AgentState":
        return AgentState(self.patches[idx], self.coords[idx], self.importances[idx],
                          self.latents[idx], self.mask[idx])

    def detach(self) -> "AgentState":
        return AgentState(*(t.detach() for t in (self.patches, self.coords, self.importances,
                                                 self.latents, self.mask)))

    def pad_to(self, n: int) -> "AgentState":
        extra = n - self.length
        if extra < 0:
            raise ValueError("cannot pad to a shorter length")
        if extra == 0:
            return self

        def pad(t):
            return torch.cat([t, t.new_zeros((t.shape[0], extra) + t.shape[2:])], 1)
        return AgentState(pad(self.patches), pad(self.coords), pad(self.importances),
                          pad(self.latents), pad(self.mask))


def mlp3(in_dim: int, hidden: int, out_dim: Optional[int] = None) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU(),
                         nn.Linear(hidden, hidden if out_dim is None else out_dim))


class PatchConv(nn.Module):
    def __init__(self, in_chans: int, hidden: int, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_chans, width // 2, 3, padding=1), nn.GELU(),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1), nn.GELU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(width, hidden))

    def forward(self, patches):
        B, N = patches.shape[:2]
        if N == 0:
            return patches.new_zeros(B, 0, self.net[-1].out_features)
        return self.net(patches.reshape(B * N, *patches.shape[2:])).reshape(B, N, -1)


class AttentionPool(nn.Module):
    """Multi-head attention pooling with one learned query.

    A learned null token is always present as an extra key, so an empty or
    fully padded set pools to a finite, learned vector.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError("pool dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.query = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.null = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, tokens, mask):
        B, _, D = tokens.shape
        h = self.num_heads
        tokens = torch.cat([self.null.expand(B, -1, -1), tokens], 1)
        mask = torch.cat([mask.new_ones(B, 1), mask], 1)
        k = self.k(tokens).reshape(B, -1, h, D // h).transpose(1, 2)
        v = self.v(tokens).reshape(B, -1, h, D // h).transpose(1, 2)
        q = self.query.reshape(1, h, 1, D // h)
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        pooled = (logits.softmax(-1) @ v).reshape(B, D)
        return self.out(pooled)


class StateEncoder(nn.Module):
    def __init__(self, in_chans: int, latent_dim: int, hidden: int = 256, pool_heads: int = 8):
        super().__init__()
        self.patch_net = PatchConv(in_chans, hidden)
        self.coord_net = mlp3(3, hidden)
        self.importance_net = mlp3(1, hidden)
        self.latent_net = mlp3(latent_dim, hidden)
        self.combine = nn.Linear(4 * hidden, hidden)
        self.pool = AttentionPool(hidden, pool_heads)
        self.out_dim = hidden

    def forward(self, state: AgentState) -> torch.Tensor:
        mask = state.mask.bool()
        # Embed only valid slots; padding never reaches the token networks.
        patches = state.patches[mask][None]
        parts = [self.patch_net(patches)[0], self.coord_net(state.coords[mask]),
                 self.importance_net(state.importances[mask][:, None]), self.latent_net(state.latents[mask])]
        emb = self.combine(F.gelu(torch.cat(parts, -1)))
        tokens = emb.new_zeros(mask.shape + (emb.shape[-1],))
        tokens[mask] = emb
        return self.pool(tokens, mask)


@dataclass
class PolicyOutput:
    mean: torch.Tensor
    log_std: torch.Tensor
    action: torch.Tensor
    log_prob: torch.Tensor


def squash_log_det(u: torch.Tensor) -> torch.Tensor:
    """log |d sigmoid(u) / du|, stable for large |u|."""
    return F.logsigmoid(u) + F.logsigmoid(-u)


def squashed_log_prob(u, mean, log_std) -> torch.Tensor:
    normal = torch.distributions.Normal(mean, log_std.exp())
    return (normal.log_prob(u) - squash_log_det(u)).sum(-1)


class Actor(nn.Module):
    def __init__(self, in_chans: int, latent_dim: int, hidden: int = 256, pool_heads: int = 8):
        super().__init__()
        self.encoder = StateEncoder(in_chans, latent_dim, hidden, pool_heads)
        self.head = mlp3(hidden, hidden, 6)

    def forward(self, state: AgentState, deterministic: bool = False,
                generator: Optional[torch.Generator] = None) -> PolicyOutput:
        mean, log_std = self.head(self.encoder(state)).chunk(2, -1)
        log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
        if deterministic:
            u = mean
        else:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            u = mean + log_std.exp() * noise
        return PolicyOutput(mean, log_std, torch.sigmoid(u), squashed_log_prob(u, mean, log_std))


class Critic(nn.Module):
    def __init__(self, in_chans: int, latent_dim: int, hidden: int = 256, pool_heads: int = 8):
        super().__init__()
        self.encoder = StateEncoder(in_chans, latent_dim, hidden, pool_heads)
        # A raw 3-vector next to a wide state embedding is nearly ignored at init; embed it first.
        self.action_net = mlp3(3, hidden)
        self.head = mlp3(2 * hidden, hidden, 1)

    def forward(self, state: AgentState, action: torch.Tensor) -> torch.Tensor:
        return self.head(torch.cat([self.encoder(state), self.action_net(action)], -1)).squeeze(-1)


def compute_reward(L_prev: float, L_cur: float) -> float:
    if not (math.isfinite(L_prev) and math.isfinite(L_cur)):
        raise ValueError("losses must be finite")
    return L_prev - L_cur


@dataclass
class StateAblation:
    """Replace chosen state components by their dataset mean at inference."""

    components: frozenset = frozenset()
    means: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.components) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown state components {sorted(unknown)}")
        self.components = frozenset(self.components)

    @staticmethod
    def estimate_means(states: Iterable[AgentState]) -> dict:
        sums, count = {}, 0
        for st in states:
            m = st.mask.bool()
            count += int(m.sum())
            for name in COMPONENTS:
                vals = getattr(st, name)[m]
                sums[name] = sums.get(name, 0) + vals.double().sum(0)
        if count == 0:
            raise ValueError("no valid patches to average")
        return {k: (v / count).float() for k, v in sums.items()}

    def __call__(self, state: AgentState) -> AgentState:
        if not self.components:
            return state
        changes = {}
        for name in self.components:
            t = getattr(state, name)
            changes[name] = self.means[name].to(t.dtype).expand_as(t).clone()
        return replace(state, **changes)


@dataclass
class SACConfig:
    hidden: int = 256
    pool_heads: int = 8
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    batch_size: int = 128
    buffer_capacity: int = 100_000
    init_alpha: float = 0.1
    auto_alpha: bool = True
    target_entropy: float = -3.0
    grad_clip: float = 1.0


@dataclass
class Transition:
    state: AgentState
    action: torch.Tensor
    reward: torch.Tensor
    next_state: AgentState
    done: torch.Tensor


class SACAgent(nn.Module):
    def __init__(self, in_chans: int, latent_dim: int, cfg: SACConfig = SACConfig()):
        super().__init__()
        self.cfg = cfg
        self.in_chans = in_chans
        self.latent_dim = latent_dim
        args = (in_chans, latent_dim, cfg.hidden, cfg.pool_heads)
        self.actor = Actor(*args)
        self.q1 = Critic(*args)
        self.q2 = Critic(*args)
        self.q1_target = copy.deepcopy(self.q1).requires_grad_(False)
        self.q2_target = copy.deepcopy(self.q2).requires_grad_(False)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(cfg.init_alpha)), requires_grad=cfg.auto_alpha)
        self.ablation = StateAblation()
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=cfg.lr)
        self.critic_opt = torch.optim.Adam(list(self.q1.parameters()) + list(self.q2.parameters()), lr=cfg.lr)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=cfg.lr)

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def act(self, state: AgentState, deterministic: bool = False,
            generator: Optional[torch.Generator] = None) -> PolicyOutput:
        with torch.no_grad():
            return self.actor(self.ablation(state), deterministic, generator)

    def critic_q(self, state: AgentState, action: torch.Tensor):
        return self.q1(state, action), self.q2(state, action)

    @torch.no_grad()
    def critic_target(self, batch: Transition, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        # Terminal transitions must not read anything from next_state.
        live = ~batch.done.bool()
        soft_v = torch.zeros_like(batch.reward)
        if live.any():
            nxt = batch.next_state.index(live)
            pi = self.actor(nxt, generator=generator)
            q_next = torch.min(self.q1_target(nxt, pi.action), self.q2_target(nxt, pi.action))
            soft_v[live] = q_next - self.alpha * pi.log_prob
        return batch.reward + (1.0 - batch.done.float()) * self.cfg.gamma * soft_v

    def update(self, batch: Transition, generator: Optional[torch.Generator] = None) -> dict:
        cfg = self.cfg
        y = self.critic_target(batch, generator)
        q1, q2 = self.critic_q(batch.state, batch.action)
        critic_loss = F.mse_loss(q1, y) + F.mse_loss(q2, y)
        self.critic_opt.zero_grad()
        critic_loss.backward()
        nn.utils.clip_grad_norm_(list(self.q1.parameters()) + list(self.q2.parameters()), cfg.grad_clip)
        self.critic_opt.step()

        pi = self.actor(batch.state, generator=generator)
        self.q1.requires_grad_(False)
        self.q2.requires_grad_(False)
        q_pi = torch.min(*self.critic_q(batch.state, pi.action))
        self.q1.requires_grad_(True)
        self.q2.requires_grad_(True)
        actor_loss = (self.alpha.detach() * pi.log_prob - q_pi).mean()
        self.actor_opt.zero_grad()
        actor_loss.backward()
        nn.utils.clip_grad_norm_(self.actor.parameters(), cfg.grad_clip)
        self.actor_opt.step()

        alpha_loss = -(self.log_alpha * (pi.log_prob.detach() + cfg.target_entropy)).mean()
        if cfg.auto_alpha:
            self.alpha_opt.zero_grad()
            alpha_loss.backward()
            self.alpha_opt.step()

        self.soft_update()
        return {"critic_loss": critic_loss.item(), "actor_loss": actor_loss.item(),
                "alpha_loss": alpha_loss.item(), "alpha": self.alpha.item()}

    @torch.no_grad()
    def soft_update(self):
        tau = self.cfg.tau
        for net, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for p, tp in zip(net.parameters(), target.parameters()):
                tp.mul_(1 - tau).add_(p, alpha=tau)

    def full_state_dict(self) -> dict:
        return {"config": asdict(self.cfg), "in_chans": self.in_chans, "latent_dim": self.latent_dim,
                "params": self.state_dict(),
                "optim": {"actor": self.actor_opt.state_dict(), "critic": self.critic_opt.state_dict(),
                          "alpha": self.alpha_opt.state_dict()}}

    @classmethod
    def from_full_state_dict(cls, data: dict) -> "SACAgent":
        agent = cls(data["in_chans"], data["latent_dim"], SACConfig(**data["config"]))
        agent.load_state_dict(data["params"])
        agent.actor_opt.load_state_dict(data["optim"]["actor"])
        agent.critic_opt.load_state_dict(data["optim"]["critic"])
        agent.alpha_opt.load_state_dict(data["optim"]["alpha"])
        return agent


def sac_update(agent: SACAgent, batch: Transition, generator: Optional[torch.Generator] = None) -> dict:
    if batch.reward.numel() == 0:
        raise ValueError("empty batch")
    return agent.update(batch, generator)


class ReplayBuffer:
    """FIFO replay with prefix sharing.

    A state's patches and coordinates are always a prefix of its successor's,
    so only the successor's are stored together with both prefix lengths.
    Latents and importances are re-estimated each step and kept for both.
    """

    def __init__(self, capacity: int, max_tokens: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.max_tokens = max_tokens
        self.size = 0
        self._next = 0
        self._store = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def _allocate(self, state: AgentState, action):
        cap, n = self.capacity, self.max_tokens
        pshape = state.patches.shape[2:]
        E = state.latents.shape[-1]
        self._store = {
            "patches": torch.zeros((cap, n) + tuple(pshape)),
            "coords": torch.zeros(cap, n, 3),
            "imp": torch.zeros(cap, n), "next_imp": torch.zeros(cap, n),
            "lat": torch.zeros(cap, n, E), "next_lat": torch.zeros(cap, n, E),
            "n": torch.zeros(cap, dtype=torch.long), "next_n": torch.zeros(cap, dtype=torch.long),
            "action": torch.zeros(cap, action.shape[-1]),
            "reward": torch.zeros(cap), "done": torch.zeros(cap),
        }

    def add(self, state: AgentState, action: torch.Tensor, reward: torch.Tensor,
            next_state: AgentState, done: torch.Tensor) -> None:
        """Add a batch of transitions (one per row)."""
        if not torch.isfinite(reward).all():
            raise ValueError("non-finite reward")
        if next_state.length > self.max_tokens:
            raise ValueError(f"state longer than buffer max_tokens={self.max_tokens}")
        with self._lock:
            if self._store is None:
                self._allocate(next_state, action)
            st = self._store
            for b in range(reward.shape[0]):
                n = int(state.mask[b].sum())
                nn_ = int(next_state.mask[b].sum())
                if n and not (torch.equal(state.patches[b, :n], next_state.patches[b, :n])
                              and torch.equal(state.coords[b, :n], next_state.coords[b, :n])):
                    raise ValueError("state patches must be a prefix of next_state patches")
                i = self._next
                st["patches"][i].zero_()
                st["patches"][i, :nn_] = next_state.patches[b, :nn_]
                st["coords"][i].zero_()
                st["coords"][i, :nn_] = next_state.coords[b, :nn_]
                st["imp"][i].zero_()
                st["imp"][i, :n] = state.importances[b, :n]
                st["lat"][i].zero_()
                st["lat"][i, :n] = state.latents[b, :n]
                st["next_imp"][i].zero_()
                st["next_imp"][i, :nn_] = next_state.importances[b, :nn_]
                st["next_lat"][i].zero_()
                st["next_lat"][i, :nn_] = next_state.latents[b, :nn_]
                st["n"][i], st["next_n"][i] = n, nn_
                st["action"][i] = action[b]
                st["reward"][i] = reward[b]
                st["done"][i] = float(done[b])
                self._next = (self._next + 1) % self.capacity
                self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, generator: Optional[torch.Generator] = None) -> Transition:
        with self._lock:
            if self.size == 0:
                raise ValueError("buffer is empty")
            k = min(batch_size, self.size)
            idx = torch.randperm(self.size, generator=generator)[:k]
            st = self._store
            n, next_n = st["n"][idx], st["next_n"][idx]
            L = max(int(next_n.max()), 1)
            ar = torch.arange(L)
            patches, coords = st["patches"][idx, :L].clone(), st["coords"][idx, :L].clone()
            mask = ar[None] < n[:, None]
            next_mask = ar[None] < next_n[:, None]
            state = AgentState(patches, coords, st["imp"][idx, :L].clone(), st["lat"][idx, :L].clone(), mask)
            next_state = AgentState(patches, coords, st["next_imp"][idx, :L].clone(),
                                    st["next_lat"][idx, :L].clone(), next_mask)
            batch = Transition(state, st["action"][idx].clone(), st["reward"][idx].clone(), next_state,
                               st["done"][idx].clone())
            batch.indices = idx
            return batch
