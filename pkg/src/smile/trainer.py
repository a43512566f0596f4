"""Training loop: interleaved denoiser/generator optimization with gradient
accumulation, EMA tracking, periodic self-motivated filtering, evaluation,
metrics, the return-bin audit, and the one-step vs multi-step benchmark.

Cadence is 1-based: iteration idx fires a periodic task when
idx % period == 0, so nothing runs on untrained models at idx 0. Each
iteration samples one batch; the denoiser accumulates
``denoiser_optimize_every`` loss draws (fresh t and noise, same batch) into
one averaged gradient and takes a single optimizer step, and the policy does
the same with ``policy_optimize_every``. Accumulation is vectorized by
tiling the batch, which is the same averaged gradient by linearity.

Filtering and evaluation always read EMA snapshots, never live parameters.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (DiffusionSchedule, NoiseModel, build_schedule,
                        denoiser_loss, naive_reverse_sample)
from .envs import DemoStore, EnvSpec, env_reset, rollout_batch_returns
from .errors import ConfigError, InvalidInputError, TrainingError
from .expertise import (FilterConfig, FilterReport, filter_dataset,
                        predict_diffusion_step, save_filter_report)
from .mathcore import (EmaTracker, OptimizerState, SeededRng, ema_update,
                       optimizer_step, save_checkpoint)
from .policy import BcBaseline, GeneratorPolicy, bc_loss, policy_loss

CSV_COLUMNS = ("iteration", "transitions", "denoiser_loss", "policy_loss",
               "eval_mean", "eval_std", "store_size")


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    denoiser_optimize_every: int = 10
    policy_optimize_every: int = 1
    update_ema_every: int = 10
    # ~200-iteration EMA horizon: at the desk-scale budget (~3.9k
    # iterations) a slower shadow lags the policy by half the run
    ema_decay: float = 0.95
    ema_warmup_steps: int = 200           # in training iterations
    transition_budget: int = 500_000
    diffusion_steps: int = 10
    beta_min: float = 0.05
    beta_max: float = 0.6
    filter: FilterConfig = field(default_factory=FilterConfig)
    filtering: bool = True
    eval_every: int = 2500
    eval_episodes: int = 10
    seed: int = 0
    loss_norm: str = "l1"
    hidden: tuple[int, ...] = (256, 256, 256)
    embed_dim: int = 32

    @property
    def filter_dataset_every(self) -> int:
        return self.filter.filter_every

    @property
    def num_iterations(self) -> int:
        # Run halts at the first iteration crossing the budget.
        return -(-self.transition_budget // self.batch_size)

    def validate(self) -> None:
        positive = {"batch_size": self.batch_size, "lr": self.lr,
                    "denoiser_optimize_every": self.denoiser_optimize_every,
                    "policy_optimize_every": self.policy_optimize_every,
                    "update_ema_every": self.update_ema_every,
                    "diffusion_steps": self.diffusion_steps,
                    "eval_episodes": self.eval_episodes}
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.transition_budget < self.batch_size:
            raise ConfigError("transition_budget must be >= batch_size")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay {self.ema_decay} outside [0, 1]")
        if self.loss_norm not in ("l1", "l2"):
            raise ConfigError(f"unknown loss_norm {self.loss_norm!r}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0 (0 disables)")
        self.filter.validate(self.diffusion_steps)


@dataclass
class MetricsLog:
    """Append-only per-iteration metrics plus run-level counters."""

    rows: list[dict] = field(default_factory=list)
    filter_summaries: list[dict] = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)

    def add_row(self, **kw) -> dict:
        if self.rows and kw["iteration"] <= self.rows[-1]["iteration"]:
            raise InvalidInputError("iteration index must increase")
        self.rows.append(kw)
        return kw

    @staticmethod
    def format_row(row: dict) -> str:
        cells = []
        for col in CSV_COLUMNS:
            v = row.get(col)
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        return ",".join(cells)

    def csv_lines(self):
        yield ",".join(CSV_COLUMNS)
        for row in self.rows:
            yield self.format_row(row)

    def save_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            for line in self.csv_lines():
                fh.write(line + "\n")


@dataclass
class TrainResult:
    noise_model: NoiseModel
    policy: GeneratorPolicy
    ema_noise_model: NoiseModel
    ema_policy: GeneratorPolicy
    metrics: MetricsLog
    store: DemoStore
    sched: DiffusionSchedule
    filter_reports: list[FilterReport] = field(default_factory=list)


def snapshot_noise_model(model: NoiseModel,
                         params: list[np.ndarray]) -> NoiseModel:
    copy = NoiseModel.from_arch(model.arch())
    copy.set_params(params)
    return copy


def snapshot_policy(policy, params: list[np.ndarray]):
    copy = type(policy).from_arch(policy.arch())
    copy.set_params(params)
    return copy


def evaluate(policy_like, spec: EnvSpec, episodes: int,
             rng: SeededRng) -> tuple[float, float]:
    """Mean/std of undiscounted returns of the clipped deterministic policy."""
    if episodes < 1:
        raise InvalidInputError(f"episodes must be >= 1, got {episodes}")
    returns = rollout_batch_returns(spec, policy_like.act_clipped, rng,
                                    episodes)
    return float(returns.mean()), float(returns.std())


def _tile(arr: np.ndarray, k: int) -> np.ndarray:
    return arr if k == 1 else np.tile(arr, (k, 1))


class _Phase:
    """Accumulates wall-clock seconds per named training phase."""

    def __init__(self, clock: dict):
        self.clock = clock

    def __call__(self, name: str):
        self.name = name
        return self

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.clock[self.name] = (self.clock.get(self.name, 0.0)
                                 + time.perf_counter() - self.t0)


def train(cfg: TrainConfig, store: DemoStore, rng: SeededRng,
          out_dir: str | None = None) -> TrainResult:
    """Run the full training loop on a demonstration store.

    ``rng`` is the run's root randomness; every internal stream (init, batch
    sampling, loss noise, evaluation) is derived from its seed with a purpose
    tag. The store is filtered in place (callers who need the original intact
    should pass a copy). With cfg.filtering off this is the w/o-filtering
    ablation: batches come uniformly from the untouched store for the whole
    run.
    """
    cfg.validate()
    if store.transition_count == 0:
        raise InvalidInputError("cannot train on an empty store")
    env = store.env
    sched = build_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
    s_all, a_all = store.sample_all()
    state_dim, action_dim = s_all.shape[1], a_all.shape[1]

    model = NoiseModel(state_dim, action_dim, sched.T, rng.spawn("init-denoiser"),
                       hidden=cfg.hidden, embed_dim=cfg.embed_dim,
                       norm=cfg.loss_norm)
    bounds = ((env.action_low, env.action_high) if env else (-1.0, 1.0))
    policy = GeneratorPolicy(state_dim, action_dim, rng.spawn("init-policy"),
                             hidden=cfg.hidden, action_low=bounds[0],
                             action_high=bounds[1])
    opt_model = OptimizerState.for_params(model.params(), lr=cfg.lr)
    opt_policy = OptimizerState.for_params(policy.params(), lr=cfg.lr)
    ema_warmup = max(1, cfg.ema_warmup_steps // cfg.update_ema_every)
    ema_model = EmaTracker.for_params(model.params(), decay=cfg.ema_decay,
                                      warmup=ema_warmup)
    ema_policy = EmaTracker.for_params(policy.params(), decay=cfg.ema_decay,
                                       warmup=ema_warmup)

    rng_batch = rng.spawn("batch")
    rng_den = rng.spawn("denoiser-noise")
    rng_pol = rng.spawn("policy-noise")
    rng_eval = rng.spawn("eval")

    metrics = MetricsLog(counters={
        "denoiser_grad_evals": 0, "denoiser_optimizer_steps": 0,
        "policy_grad_evals": 0, "policy_optimizer_steps": 0,
        "ema_updates": 0, "filter_passes": 0, "transitions_consumed": 0})
    phase = _Phase(metrics.wall_clock)
    reports: list[FilterReport] = []
    stop_filtering = False
    csv_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_fh = open(os.path.join(out_dir, "metrics.csv"), "w")
        csv_fh.write(",".join(CSV_COLUMNS) + "\n")

    def emit(row: dict) -> None:
        if csv_fh is not None:
            csv_fh.write(MetricsLog.format_row(row) + "\n")

    def diagnostic_dump() -> None:
        if out_dir is None:
            return
        save_checkpoint(os.path.join(out_dir, "diagnostic_denoiser.json"),
                        "denoiser", model.arch(), model.params(),
                        optimizer=opt_model, ema=ema_model.shadow)
        save_checkpoint(os.path.join(out_dir, "diagnostic_generator.json"),
                        "generator", policy.arch(), policy.params(),
                        optimizer=opt_policy, ema=ema_policy.shadow)

    n_iters = cfg.num_iterations
    try:
        for idx in range(1, n_iters + 1):
            states, actions = store.sample(rng_batch, cfg.batch_size)

            with phase("denoiser"):
                k = cfg.denoiser_optimize_every
                d_loss, grads = denoiser_loss(
                    model, _tile(states, k), _tile(actions, k), sched, rng_den)
                optimizer_step(opt_model, model.params(), grads)
            metrics.counters["denoiser_grad_evals"] += k
            metrics.counters["denoiser_optimizer_steps"] += 1

            with phase("policy"):
                m = cfg.policy_optimize_every
                p_loss, grads = policy_loss(
                    policy, model, _tile(states, m), _tile(actions, m),
                    sched, rng_pol)
                optimizer_step(opt_policy, policy.params(), grads)
            metrics.counters["policy_grad_evals"] += m
            metrics.counters["policy_optimizer_steps"] += 1

            if not np.isfinite(d_loss) or not np.isfinite(p_loss):
                diagnostic_dump()
                raise TrainingError(
                    f"non-finite loss at iteration {idx}: "
                    f"denoiser={d_loss} policy={p_loss}")

            if idx % cfg.update_ema_every == 0:
                with phase("ema"):
                    ema_update(ema_model, model.params())
                    ema_update(ema_policy, policy.params())
                metrics.counters["ema_updates"] += 1

            if (cfg.filtering and not stop_filtering
                    and idx % cfg.filter.filter_every == 0):
                with phase("filter"):
                    report = filter_dataset(
                        store, snapshot_noise_model(model, ema_model.shadow),
                        snapshot_policy(policy, ema_policy.shadow),
                        cfg.filter, sched, iteration=idx)
                reports.append(report)
                metrics.counters["filter_passes"] += 1
                metrics.filter_summaries.append(report.summary())
                stop_filtering = report.stop_filtering
                if out_dir is not None:
                    save_filter_report(report, os.path.join(
                        out_dir, f"filter_report_{idx:06d}.json"))

            row = {"iteration": idx, "transitions": idx * cfg.batch_size,
                   "denoiser_loss": d_loss, "policy_loss": p_loss,
                   "store_size": store.transition_count}
            if env is not None and cfg.eval_every > 0 and (
                    idx % cfg.eval_every == 0 or idx == n_iters):
                with phase("eval"):
                    snap = snapshot_policy(policy, ema_policy.shadow)
                    mean, std = evaluate(snap, env, cfg.eval_episodes,
                                         rng_eval)
                row["eval_mean"], row["eval_std"] = mean, std
            metrics.add_row(**row)
            emit(row)
        metrics.counters["transitions_consumed"] = n_iters * cfg.batch_size
    finally:
        if csv_fh is not None:
            csv_fh.close()

    if out_dir is not None:
        rng_states = {"root": rng.get_state(), "batch": rng_batch.get_state(),
                      "denoiser-noise": rng_den.get_state(),
                      "policy-noise": rng_pol.get_state(),
                      "eval": rng_eval.get_state()}
        save_checkpoint(os.path.join(out_dir, "denoiser.json"), "denoiser",
                        model.arch(), model.params(), optimizer=opt_model,
                        ema=ema_model.shadow, rng_states=rng_states)
        save_checkpoint(os.path.join(out_dir, "generator.json"), "generator",
                        policy.arch(), policy.params(), optimizer=opt_policy,
                        ema=ema_policy.shadow, rng_states=rng_states)

    return TrainResult(
        noise_model=model, policy=policy,
        ema_noise_model=snapshot_noise_model(model, ema_model.shadow),
        ema_policy=snapshot_policy(policy, ema_policy.shadow),
        metrics=metrics, store=store, sched=sched, filter_reports=reports)


def train_bc(cfg: TrainConfig, store: DemoStore, rng: SeededRng,
             out_dir: str | None = None):
    """Behavior-cloning baseline over the full store, same budget and cadence."""
    cfg.validate()
    if store.transition_count == 0:
        raise InvalidInputError("cannot train on an empty store")
    env = store.env
    s_all, a_all = store.sample_all()
    bounds = ((env.action_low, env.action_high) if env else (-1.0, 1.0))
    baseline = BcBaseline(s_all.shape[1], a_all.shape[1],
                          rng.spawn("init-bc"), hidden=cfg.hidden,
                          action_low=bounds[0], action_high=bounds[1])
    opt = OptimizerState.for_params(baseline.params(), lr=cfg.lr)
    ema_warmup = max(1, cfg.ema_warmup_steps // cfg.update_ema_every)
    ema = EmaTracker.for_params(baseline.params(), decay=cfg.ema_decay,
                                warmup=ema_warmup)
    rng_batch = rng.spawn("batch")
    rng_eval = rng.spawn("eval")
    metrics = MetricsLog(counters={"transitions_consumed": 0})
    csv_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_fh = open(os.path.join(out_dir, "metrics.csv"), "w")
        csv_fh.write(",".join(CSV_COLUMNS) + "\n")
    n_iters = cfg.num_iterations
    try:
        for idx in range(1, n_iters + 1):
            states, actions = store.sample(rng_batch, cfg.batch_size)
            loss, grads = bc_loss(baseline, states, actions)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite BC loss at iteration {idx}")
            optimizer_step(opt, baseline.params(), grads)
            if idx % cfg.update_ema_every == 0:
                ema_update(ema, baseline.params())
            row = {"iteration": idx, "transitions": idx * cfg.batch_size,
                   "policy_loss": loss, "store_size": store.transition_count}
            if env is not None and cfg.eval_every > 0 and (
                    idx % cfg.eval_every == 0 or idx == n_iters):
                snap = snapshot_policy(baseline, ema.shadow)
                mean, std = evaluate(snap, env, cfg.eval_episodes, rng_eval)
                row["eval_mean"], row["eval_std"] = mean, std
            metrics.add_row(**row)
            if csv_fh is not None:
                csv_fh.write(MetricsLog.format_row(row) + "\n")
        metrics.counters["transitions_consumed"] = n_iters * cfg.batch_size
    finally:
        if csv_fh is not None:
            csv_fh.close()
    return snapshot_policy(baseline, ema.shadow), baseline, metrics


def audit_bins(store: DemoStore, model, policy, sched: DiffusionSchedule,
               bin_edges) -> list[dict]:
    """Group trajectories by return bin; report count and mean predicted
    diffusion step per non-empty bin (empty bins are simply absent)."""
    if store.num_trajectories == 0:
        raise InvalidInputError("cannot audit an empty store")
    edges = np.asarray(bin_edges, dtype=np.float64)
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise InvalidInputError("bin_edges must be strictly increasing")
    steps, rets = [], []
    for tr in store.trajectories:
        if tr.ret is None:
            raise InvalidInputError(
                f"trajectory {tr.traj_id} carries no return")
        steps.append(predict_diffusion_step(model, policy, tr, sched))
        rets.append(tr.ret)
    steps = np.asarray(steps)
    rets = np.asarray(rets)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        # half-open bins, closed on the right for the final bin
        mask = ((rets >= lo) & (rets < hi)) if hi < edges[-1] else \
               ((rets >= lo) & (rets <= hi))
        if mask.sum() == 0:
            continue
        rows.append({"bin_lo": float(lo), "bin_hi": float(hi),
                     "count": int(mask.sum()),
                     "mean_step": float(steps[mask].mean())})
    return rows


def bench_reverse(model, policy, spec: EnvSpec, sched: DiffusionSchedule,
                  trials: int, rng: SeededRng) -> dict:
    """Per-decision latency of the one-step generator vs the naive reverse
    sampler, normalized to 1000 decisions, plus their action discrepancy.

    Each decision is a single-state call, matching how actions are produced
    while interacting with an environment.
    """
    states = [env_reset(spec, rng).obs for _ in range(trials)]
    eps = [rng.standard_normal(spec.action_dim) for _ in range(trials)]

    one_step_actions = []
    t0 = time.perf_counter()
    for s in states:
        one_step_actions.append(policy.act(s))
    one_step_time = time.perf_counter() - t0

    naive_actions = []
    t0 = time.perf_counter()
    for s, e, a in zip(states, eps, one_step_actions):
        a_init = a + sched.sigmas[sched.T] * e
        naive_actions.append(naive_reverse_sample(model, s, sched, rng, a_init))
    naive_time = time.perf_counter() - t0

    per_1000 = 1000.0 / trials
    disc = np.mean([np.abs(x - y).mean()
                    for x, y in zip(one_step_actions, naive_actions)])
    return {
        "trials": trials,
        "one_step_s_per_1000": one_step_time * per_1000,
        "naive_s_per_1000": naive_time * per_1000,
        "latency_ratio": naive_time / one_step_time,
        "mean_abs_discrepancy": float(disc),
    }
