"""Expertise scoring and self-motivated dataset filtering.

The conditioned Q-function measures how likely a reference action denoises to
a target action in exactly t steps: Q_t(a | a_ref, s) =
-||a - (a_ref - sigma_t * eps(s, a_ref, t))||^2 (the 1/2 sigma^2 prefactor is
dropped so small-t values are not blown up). Averaging over a trajectory and
taking the argmax over t in 0..T yields the predicted diffusion step between
the current policy and the trajectory's behavior policy: 0 means the policy
is at least as good, larger means the trajectory is cleaner by that many
steps.

Filtering segments the store at terminals or max_demo_len, drops segments at
or below the step threshold, and refuses to act at all (setting
stop_filtering) whenever dropping would leave fewer than min_demos segments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionSchedule
from .envs import DemoStore, Trajectory, undiscounted_return
from .errors import ConfigError, InvalidInputError


@dataclass
class FilterConfig:
    filter_every: int = 2500
    min_demos: int = 10
    step_threshold: int = 1
    max_demo_len: int = 100

    def validate(self, T: int | None = None) -> None:
        if self.min_demos < 1:
            raise ConfigError(f"min_demos must be >= 1, got {self.min_demos}")
        if self.max_demo_len < 1:
            raise ConfigError(
                f"max_demo_len must be >= 1, got {self.max_demo_len}")
        if self.step_threshold < 0 or (T is not None
                                       and self.step_threshold > T):
            raise ConfigError(
                f"step_threshold {self.step_threshold} outside 0..{T}")
        if self.filter_every < 1:
            raise ConfigError(
                f"filter_every must be >= 1, got {self.filter_every}")


@dataclass
class SegmentRecord:
    segment_id: int
    parent_id: int
    start: int
    stop: int
    predicted_step: int
    mean_q: list[float]          # curve over t' = 0..T
    verdict: str                 # "keep" | "drop"
    noise_level: float | None
    ret: float | None


@dataclass
class FilterReport:
    records: list[SegmentRecord]
    n_before: int
    n_kept: int
    n_dropped: int
    stop_filtering: bool
    iteration: int | None = None

    def summary(self) -> dict:
        return {"iteration": self.iteration, "n_before": self.n_before,
                "n_kept": self.n_kept, "n_dropped": self.n_dropped,
                "stop_filtering": self.stop_filtering}


def save_filter_report(report: FilterReport, path: str) -> None:
    payload = report.summary()
    payload["records"] = [vars(r) for r in report.records]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


# ---------------------------------------------------------------------------
# Q scoring
# ---------------------------------------------------------------------------

def q_value(model, s: np.ndarray, a_target: np.ndarray, a_ref: np.ndarray,
            t: int, sched: DiffusionSchedule) -> float:
    """Negative squared distance between the target and the t-step denoised
    reference; at t = 0 the noise term vanishes (sigma_0 = 0)."""
    if not 0 <= t <= sched.T:
        raise InvalidInputError(f"diffusion step {t} outside 0..{sched.T}")
    a_target = np.asarray(a_target, dtype=np.float64)
    a_ref = np.asarray(a_ref, dtype=np.float64)
    if t == 0:
        denoised = a_ref
    else:
        denoised = a_ref - sched.sigmas[t] * model.predict(s, a_ref, t)
    return float(-((a_target - denoised) ** 2).sum())


def q_curve_matrix(model, states: np.ndarray, targets: np.ndarray,
                   refs: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Per-transition Q values for every t' in 0..T, shape (T+1, n).

    One batched forward per t'; the reference actions are computed once by
    the caller and reused across every step, so scoring costs O(n * T).
    """
    n = len(states)
    out = np.empty((sched.T + 1, n))
    out[0] = -((targets - refs) ** 2).sum(axis=1)
    for t in range(1, sched.T + 1):
        denoised = refs - sched.sigmas[t] * model.predict(states, refs, t)
        out[t] = -((targets - denoised) ** 2).sum(axis=1)
    return out


def predict_diffusion_step(model, policy, traj: Trajectory,
                           sched: DiffusionSchedule) -> int:
    """argmax over t' of the trajectory-averaged Q between dataset actions
    and current-policy actions; ties break toward the smallest t'."""
    step, _ = predict_diffusion_step_curve(model, policy, traj, sched)
    return step


def predict_diffusion_step_curve(model, policy, traj: Trajectory,
                                 sched: DiffusionSchedule):
    if len(traj) == 0:
        raise InvalidInputError("cannot score an empty trajectory")
    refs = np.atleast_2d(policy.act(traj.states))
    curve = q_curve_matrix(model, traj.states, traj.actions, refs,
                           sched).mean(axis=1)
    return int(np.argmax(curve)), curve


# ---------------------------------------------------------------------------
# Segmentation and filtering
# ---------------------------------------------------------------------------

def segment_trajectories(trajectories: list[Trajectory],
                         max_demo_len: int) -> list[tuple[Trajectory, int, int]]:
    """Split trajectories at terminals or max_demo_len; yields
    (parent, start, stop) index ranges in store order."""
    segments = []
    for tr in trajectories:
        start = 0
        for i in range(len(tr)):
            if tr.terminals[i] or (i + 1 - start) >= max_demo_len:
                segments.append((tr, start, i + 1))
                start = i + 1
        if start < len(tr):
            segments.append((tr, start, len(tr)))
    return segments


def _segment_trajectory(parent: Trajectory, start: int, stop: int,
                        new_id: int) -> Trajectory:
    rewards = (parent.rewards[start:stop]
               if parent.rewards is not None else None)
    seg = Trajectory(
        traj_id=new_id,
        states=parent.states[start:stop],
        actions=parent.actions[start:stop],
        rewards=rewards,
        terminals=parent.terminals[start:stop],
        noise_level=parent.noise_level)
    if rewards is not None:
        seg.ret = undiscounted_return(seg)
    return seg


def score_dataset(store: DemoStore, model, policy, cfg: FilterConfig,
                  sched: DiffusionSchedule):
    """Segment the store and score every segment without touching it.

    Returns (records, kept_segments): per-segment reports with keep/drop
    verdicts against cfg.step_threshold, and the segments that would remain.
    All transitions are scored in one batched pass; the policy action per
    state is computed once and reused across every t'.
    """
    cfg.validate(sched.T)
    if store.num_trajectories == 0:
        raise InvalidInputError("cannot filter an empty store")
    segments = segment_trajectories(store.trajectories, cfg.max_demo_len)

    states, targets = store.sample_all()
    refs = np.atleast_2d(policy.act(states))
    q = q_curve_matrix(model, states, targets, refs, sched)

    offsets = {}
    pos = 0
    for tr in store.trajectories:
        offsets[tr.traj_id] = pos
        pos += len(tr)

    records = []
    kept_segments = []
    for seg_id, (parent, start, stop) in enumerate(segments):
        lo = offsets[parent.traj_id] + start
        curve = q[:, lo:offsets[parent.traj_id] + stop].mean(axis=1)
        step = int(np.argmax(curve))
        seg = _segment_trajectory(parent, start, stop, seg_id)
        keep = step > cfg.step_threshold
        if keep:
            kept_segments.append(seg)
        records.append(SegmentRecord(
            segment_id=seg_id, parent_id=parent.traj_id, start=start,
            stop=stop, predicted_step=step, mean_q=curve.tolist(),
            verdict="keep" if keep else "drop",
            noise_level=seg.noise_level, ret=seg.ret))
    return records, kept_segments


def filter_dataset(store: DemoStore, model, policy,
                   cfg: FilterConfig, sched: DiffusionSchedule,
                   iteration: int | None = None) -> FilterReport:
    """Score every segment, drop those with predicted step <= threshold, and
    commit the reduced store — unless that would leave fewer than min_demos
    segments, in which case nothing is dropped and stop_filtering is set.

    The models passed in are read-only (callers hand in EMA snapshots); the
    store commit is a single atomic swap.
    """
    records, kept_segments = score_dataset(store, model, policy, cfg, sched)
    n_before = len(records)
    if len(kept_segments) < cfg.min_demos:
        # Dropping would starve the dataset: leave the store untouched.
        for rec in records:
            rec.verdict = "keep"
        return FilterReport(records=records, n_before=n_before,
                            n_kept=n_before, n_dropped=0,
                            stop_filtering=True, iteration=iteration)

    store.replace(kept_segments)
    return FilterReport(records=records, n_before=n_before,
                        n_kept=len(kept_segments),
                        n_dropped=n_before - len(kept_segments),
                        stop_filtering=False, iteration=iteration)
