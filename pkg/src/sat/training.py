"""Flow-matching training: objective, optimizer, schedule, Euler sampling.

The training target is the straight-line velocity a1 - a0 between a noise
chunk and the normalized expert chunk; the loss is the mean squared error
over batch samples and unpadded chunk elements. Sampling integrates the
learned field with fixed-step Euler from tau=0 to 1 and denormalizes.

Determinism contract: every stochastic step s draws from a fresh
Philox(key=[seed, s]) generator (batch indices first, then per sample one
uniform tau followed by one (d_a, T) normal draw, in batch order), so a
resumed run replays the exact byte-for-byte trajectory of an uninterrupted
one. Parameter init uses stream [seed, 0]; steps are 1-based.
"""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, NumericError, Tensor
from .action_tokenizer import ActionChunk, batch_action_tokens, temporal_action_tokens
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build_run_config, dump_run_config, parse_config_text
from .embodiment import FUNCTION_NAMES, ROTATION_NAMES, Registry
from .model import embed_flow_time, init_params, velocity_field
from .obs_tokenizer import make_observation, prepare_observation, tokenize_batch
from .synthdata import (
    FE_GAINS,
    DatasetShard,
    denormalize_chunk,
    normalize_chunk,
    pool_stats,
    stats_from_json,
    stats_to_json,
)

EVAL_NOISE_STREAM = 1_000_003   # Philox stream for eval-time a0 draws
SUCCESS_THRESHOLD = 0.1         # rad; repo convention, not a reference value


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# interpolant and loss


def sample_interpolant(a1, a0, tau: float):
    """Point on the linear probability path: (1-tau) a0 + tau a1."""
    from .action_tokenizer import NoisyChunkState

    a1v = a1.values if isinstance(a1, ActionChunk) else np.asarray(a1, dtype=np.float64)
    a0v = a0.values if isinstance(a0, ActionChunk) else np.asarray(a0, dtype=np.float64)
    if a1v.shape != a0v.shape:
        raise ValueError(f"shape mismatch: a1 {a1v.shape} vs a0 {a0v.shape}")
    return NoisyChunkState(values=(1.0 - tau) * a0v + tau * a1v, tau=tau)


@dataclass(frozen=True)
class PreparedEpisode:
    """One episode, ready for batching: cached geometry + normalized chunk."""

    prepped: object            # PreppedObs
    chunk_norm: np.ndarray     # (D_a, T), normalized units
    chunk_raw: np.ndarray      # (D_a, T), radians
    spec: object               # EmbodimentSpec


def prepare_episodes(shard: DatasetShard, cfg, ablate=None):
    """Run the parameter-free observation pipeline once per episode.

    Returns (episodes, pooled_stats); chunks are normalized with the
    ablation's effective keys so the network always sees z-scored targets.
    """
    pooled = pool_stats(shard.stats, ablate)
    episodes = []
    for demo in shard.episodes:
        spec = shard.registry.get(demo.embodiment_id)
        obs = make_observation(list(demo.frames), demo.instruction, cfg)
        episodes.append(PreparedEpisode(
            prepped=prepare_observation(obs, cfg),
            chunk_norm=normalize_chunk(demo.chunk, spec, pooled, ablate),
            chunk_raw=demo.chunk,
            spec=spec,
        ))
    return episodes, pooled


def draw_flow_batch(episodes, rng: np.random.Generator):
    """The documented draw order: per sample, one tau then one noise chunk."""
    taus, noises = [], []
    for ep in episodes:
        taus.append(rng.uniform())
        noises.append(rng.standard_normal(ep.chunk_norm.shape))
    return np.array(taus), noises


def loss_from_draws(model, episodes, taus, noises) -> Tensor:
    """Masked MSE against a1 - a0 on explicitly provided (tau, a0) draws.

    model.predict_batch(a_tau (B, D_max, T), taus (B,), episodes) must
    return a Tensor of the same shape; padded joint rows are excluded from
    the mean (the divisor is the count of real chunk elements).
    """
    b = len(episodes)
    t = episodes[0].chunk_norm.shape[1]
    d_max = max(ep.chunk_norm.shape[0] for ep in episodes)
    a_tau = np.zeros((b, d_max, t))
    target = np.zeros((b, d_max, t))
    mask = np.zeros((b, d_max, 1))
    for i, ep in enumerate(episodes):
        d_a = ep.chunk_norm.shape[0]
        state = sample_interpolant(ep.chunk_norm, noises[i], float(taus[i]))
        a_tau[i, :d_a] = state.values
        target[i, :d_a] = ep.chunk_norm - noises[i]
        mask[i, :d_a] = 1.0
    pred = model.predict_batch(a_tau, taus, episodes)
    if pred.shape != (b, d_max, t):
        raise ValueError(f"model returned {pred.shape}, expected {(b, d_max, t)}")
    diff = ad.add_const(pred, -target)
    masked = ad.mul_const(ad.mul(diff, diff), mask)
    loss = ad.scale(ad.sum_all(masked), 1.0 / (mask.sum() * t))
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite flow-matching loss {loss.data!r}")
    return loss


def flow_matching_loss(model, episodes, rng: np.random.Generator) -> Tensor:
    """Flow-matching objective on a batch, drawing (tau, a0) from rng."""
    taus, noises = draw_flow_batch(episodes, rng)
    return loss_from_draws(model, episodes, taus, noises)


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def clip_gradients(grads: dict, max_norm: float):
    """Global-norm clipping; accumulation order is sorted by name."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float,
               tc) -> dict:
    """Decoupled-weight-decay Adam; returns fresh parameter Tensors.

    w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w, with
    bias-corrected moments. Mutates `state` (moments, step counter).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - tc.beta1 ** t
    c2 = 1.0 - tc.beta2 ** t
    out = {}
    for name in sorted(params):
        w = params[name].data
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}")
        m = tc.beta1 * state.m.get(name, 0.0) + (1.0 - tc.beta1) * g
        v = tc.beta2 * state.v.get(name, 0.0) + (1.0 - tc.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        new_w = w - lr * (m / c1) / (np.sqrt(v / c2) + tc.eps) - lr * tc.weight_decay * w
        out[name] = Tensor(new_w, requires_grad=True)
    return out


def lr_schedule(step: int, tc) -> float:
    """Linear warmup 0 -> peak, then cosine anneal peak -> final at total."""
    if step < 0 or step > tc.total_steps:
        raise ValueError(f"step {step} outside [0, {tc.total_steps}]")
    if step <= tc.warmup_steps:
        if tc.warmup_steps == 0:
            return tc.peak_lr
        return tc.peak_lr * step / tc.warmup_steps
    progress = (step - tc.warmup_steps) / (tc.total_steps - tc.warmup_steps)
    return tc.final_lr + (tc.peak_lr - tc.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# policy bundle


@dataclass
class Policy:
    """Parameters plus everything needed to run them on new observations."""

    params: dict
    run: RunConfig
    registry: Registry
    stats: dict                      # raw per-(f, r) moments from the shard

    def __post_init__(self):
        self.pooled = pool_stats(self.stats, self.run.ablate)

    @property
    def cfg(self):
        return self.run.model

    @property
    def ablate(self):
        return self.run.ablate

    @property
    def horizon(self) -> int:
        return self.cfg.T

    # -- forward paths -------------------------------------------------------

    def predict_batch(self, a_tau, taus, episodes) -> Tensor:
        """Velocity for a padded batch; (B, D_max, T) in and out."""
        cfg, ablate = self.cfg, self.ablate
        d_max = a_tau.shape[1]
        obs_tokens, obs_valid = tokenize_batch(
            [ep.prepped for ep in episodes], self.params, cfg, ablate)
        chunk = a_tau if isinstance(a_tau, Tensor) else Tensor(a_tau)
        if cfg.temporal_centric:
            act_tokens = temporal_action_tokens(chunk, self.params, cfg)
            act_valid = np.ones((len(episodes), cfg.T), dtype=bool)
        else:
            act_tokens, act_valid = batch_action_tokens(
                chunk, [ep.spec for ep in episodes], self.params, cfg, ablate)
        tau_emb = embed_flow_time(np.asarray(taus, dtype=np.float64), self.params)
        out = velocity_field(obs_tokens, obs_valid, act_tokens, act_valid,
                             tau_emb, self.params, cfg, ablate)
        if cfg.temporal_centric:
            out = ad.narrow(ad.transpose_last(out), 1, 0, d_max)
        return out

    def bind_observation(self, obs, instruction: str | None = None):
        """Tokenize an observation once for repeated velocity queries.

        Accepts an Observation, a PreppedObs, or a Demonstration (frames +
        instruction). Returns an opaque handle for velocity()/euler_sample.
        """
        prepped = obs
        if hasattr(obs, "frames") and hasattr(obs, "instruction"):
            prepped = prepare_observation(
                make_observation(list(obs.frames), obs.instruction, self.cfg),
                self.cfg)
        elif hasattr(obs, "frames"):
            prepped = prepare_observation(obs, self.cfg)
        with ad.no_tape():
            tokens, valid = tokenize_batch([prepped], self.params, self.cfg,
                                           self.ablate)
        return (tokens.data, valid)

    def velocity(self, values, tau: float, obs, spec) -> np.ndarray:
        """Single-sample velocity in normalized units; obs from bind_observation."""
        tokens_data, valid = obs
        values = np.asarray(values, dtype=np.float64)
        with ad.no_tape():
            if self.cfg.temporal_centric:
                act = temporal_action_tokens(Tensor(values[None]), self.params,
                                             self.cfg)
                act_valid = np.ones((1, self.cfg.T), dtype=bool)
            else:
                act, act_valid = batch_action_tokens(
                    Tensor(values[None]), [spec], self.params, self.cfg,
                    self.ablate)
            tau_emb = embed_flow_time(float(tau), self.params)
            out = velocity_field(Tensor(tokens_data), valid, act, act_valid,
                                 tau_emb, self.params, self.cfg, self.ablate)
            if self.cfg.temporal_centric:
                out = ad.narrow(ad.transpose_last(out), 1, 0, spec.d_a)
        return out.data[0]

    def denormalize(self, values, spec) -> np.ndarray:
        return denormalize_chunk(values, spec, self.pooled, self.ablate)

    # -- persistence ---------------------------------------------------------

    def checkpoint_header(self, step: int) -> dict:
        return {
            "run_config": dump_run_config(self.run),
            "registry": self.registry.to_manifest(),
            "stats": stats_to_json(self.stats),
            "seed": self.run.train.seed,
            "step": step,
        }

    @classmethod
    def from_checkpoint(cls, path):
        params, moments, header = load_checkpoint(path)
        run = build_run_config(parse_config_text(header["run_config"],
                                                 origin=str(path)))
        policy = cls(params=params, run=run,
                     registry=Registry.from_manifest(header["registry"],
                                                     v_e=run.model.V_e),
                     stats=stats_from_json(header["stats"]))
        state = OptimizerState(m=moments["m"], v=moments["v"],
                               step=header["step"])
        return policy, state, header


# ---------------------------------------------------------------------------
# sampling and evaluation


def euler_sample(model, obs, spec, steps: int, rng: np.random.Generator) -> ActionChunk:
    """Integrate the velocity field with `steps` uniform Euler steps.

    x starts at a standard-normal draw; each step adds (1/steps) times the
    field at tau = i/steps; the result is denormalized. steps=1 is the
    single-function-evaluation mode.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = rng.standard_normal((spec.d_a, model.horizon))
    for i in range(steps):
        v = model.velocity(x, i / steps, obs, spec)
        x = x + np.asarray(v) / steps
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step {i + 1}")
    return ActionChunk(model.denormalize(x, spec))


@dataclass(frozen=True)
class EvalReport:
    success_rate: float
    mae: float                        # mean |final angle error| over joints
    successes: np.ndarray             # (n_episodes,) bool
    final_abs_errors: tuple           # per episode: (d_a,) |pred - truth| at T-1
    predictions: tuple                # per episode: (d_a, T) denormalized chunk


def evaluate_policy(policy: Policy, episodes, steps: int = 10,
                    noise_seed: int = EVAL_NOISE_STREAM) -> EvalReport:
    """Roll out Euler sampling on Demonstrations and score final angles.

    success := max over joints of |predicted - true final angle| < 0.1 rad.
    Episode i's noise comes from Philox(key=[noise_seed, i]), so results are
    independent of batching/grouping order. Embodiments are resolved through
    the policy's registry; unknown ids raise KeyError.
    """
    episodes = list(episodes)
    n = len(episodes)
    if n == 0:
        raise ValueError("no evaluation episodes")
    cfg = policy.cfg
    by_spec: dict = {}
    for i, demo in enumerate(episodes):
        by_spec.setdefault(demo.embodiment_id, []).append(i)

    preds: list = [None] * n
    for emb_id, idxs in sorted(by_spec.items()):
        spec = policy.registry.get(emb_id)
        prepped = [prepare_observation(
            make_observation(list(episodes[i].frames), episodes[i].instruction,
                             cfg), cfg) for i in idxs]
        x = np.stack([
            np.random.Generator(np.random.Philox(key=[noise_seed, i]))
            .standard_normal((spec.d_a, cfg.T)) for i in idxs
        ])
        with ad.no_tape():
            obs_tokens, obs_valid = tokenize_batch(prepped, policy.params, cfg,
                                                   policy.ablate)
            obs_data = obs_tokens.data
            for s in range(steps):
                tau = s / steps
                if cfg.temporal_centric:
                    act = temporal_action_tokens(Tensor(x), policy.params, cfg)
                    act_valid = np.ones((len(idxs), cfg.T), dtype=bool)
                else:
                    act, act_valid = batch_action_tokens(
                        Tensor(x), [spec] * len(idxs), policy.params, cfg,
                        policy.ablate)
                tau_emb = embed_flow_time(np.full(len(idxs), tau), policy.params)
                out = velocity_field(Tensor(obs_data), obs_valid, act, act_valid,
                                     tau_emb, policy.params, cfg, policy.ablate)
                if cfg.temporal_centric:
                    out = ad.narrow(ad.transpose_last(out), 1, 0, spec.d_a)
                x = x + out.data / steps
                if not np.isfinite(x).all():
                    raise NumericError(f"non-finite sampler state at step {s + 1}")
        for row, i in enumerate(idxs):
            preds[i] = denormalize_chunk(x[row], spec, policy.pooled,
                                         policy.ablate)

    return score_predictions(preds, episodes)


def score_predictions(preds, episodes) -> EvalReport:
    """Score (d_a, T) predicted chunks against Demonstration ground truth."""
    errors = [np.abs(p[:, -1] - demo.chunk[:, -1])
              for p, demo in zip(preds, episodes)]
    successes = np.array([e.max() < SUCCESS_THRESHOLD for e in errors])
    return EvalReport(
        success_rate=float(successes.mean()),
        mae=float(np.concatenate(errors).mean()),
        successes=successes,
        final_abs_errors=tuple(errors),
        predictions=tuple(preds),
    )


def same_axis_pair_mae(report: EvalReport, episodes, registry) -> float:
    """Mean endpoint error over same-axis joint pairs with different gains.

    Averages 0.5*(|err_a| + |err_b|) over exactly the (episode, pair)
    population that indistinguishability_floor averages its analytic gaps
    over, so the two numbers are directly comparable.
    """
    fe = ROTATION_NAMES.index("FE")
    vals = []
    for fae, demo in zip(report.final_abs_errors, episodes):
        spec = registry.get(demo.embodiment_id)
        fe_joints = [(j, FE_GAINS[FUNCTION_NAMES[joint.f]])
                     for j, joint in enumerate(spec.joints) if joint.r == fe]
        for a in range(len(fe_joints)):
            for b in range(a + 1, len(fe_joints)):
                (ja, ga), (jb, gb) = fe_joints[a], fe_joints[b]
                if ga != gb:
                    vals.append(0.5 * (fae[ja] + fae[jb]))
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    policy: Policy
    opt_state: OptimizerState
    metrics: list
    checkpoint_path: str
    ema: dict | None = None


def train_loop(shard: DatasetShard, run: RunConfig, out_dir,
               resume: str | None = None, log=None) -> TrainResult:
    """Optimize the velocity field on a shard; see the module docstring.

    Emits one metrics record per step to out_dir/metrics.jsonl (and to
    `log`, if given), checkpoints every train.ckpt_every steps plus a final
    checkpoint carrying normalization stats and the registry. `resume` loads
    parameters, moments and the step counter from a checkpoint and continues
    the same RNG schedule, which reproduces the uninterrupted run bitwise.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        policy, state, header = Policy.from_checkpoint(resume)
        run = policy.run   # the checkpoint's config is authoritative
    tc = run.train
    episodes, _ = prepare_episodes(shard, run.model, run.ablate)
    if not episodes and tc.total_steps > 0:
        raise TrainingError("dataset has no episodes")

    if resume is None:
        params = init_params(
            run.model, np.random.Generator(np.random.Philox(key=[tc.seed, 0])))
        policy = Policy(params=params, run=run, registry=shard.registry,
                        stats=shard.stats)
        state = OptimizerState()

    ema = None
    if tc.ema_decay > 0.0:
        ema = {name: t.data.copy() for name, t in policy.params.items()}

    def save(step: int) -> str:
        path = str(out_dir / f"step{step:06d}.ckpt")
        save_checkpoint(path, policy.params, policy.checkpoint_header(step),
                        opt_moments={"m": state.m, "v": state.v})
        return path

    metrics = []
    ckpt_path = save(state.step)
    with open(out_dir / "metrics.jsonl", "a", encoding="utf-8") as mfh:
        for s in range(state.step + 1, tc.total_steps + 1):
            t0 = time.perf_counter()
            rng_s = np.random.Generator(np.random.Philox(key=[tc.seed, s]))
            idx = rng_s.integers(0, len(episodes), size=tc.batch_size)
            batch = [episodes[j] for j in idx]
            with GradTape() as tape:
                loss = flow_matching_loss(policy, batch, rng_s)
            loss_val = float(loss.data)
            tape.backward(loss)
            grads = {name: tape.grad(t) for name, t in policy.params.items()}
            grads, _ = clip_gradients(grads, tc.clip_norm)
            lr = lr_schedule(s, tc)
            policy.params = adamw_step(policy.params, grads, state, lr, tc)
            if ema is not None:
                for name, t in policy.params.items():
                    ema[name] = tc.ema_decay * ema[name] + (1.0 - tc.ema_decay) * t.data
            record = {"step": s, "loss": loss_val, "lr": lr,
                      "wall_ms": (time.perf_counter() - t0) * 1000.0}
            metrics.append(record)
            mfh.write(json.dumps(record) + "\n")
            if log is not None:
                log(record)
            if s % tc.ckpt_every == 0 or s == tc.total_steps:
                ckpt_path = save(s)
    return TrainResult(policy=policy, opt_state=state, metrics=metrics,
                       checkpoint_path=ckpt_path, ema=ema)
