"""Objective evaluation over forward runs, forward-difference gradients,
bounded gradient descent, and wind-direction robustness checks.

Each evaluation re-voxelizes the design geometry and runs the solver from
scratch on the precomputed pressure system; nothing matrix-shaped is ever
rebuilt inside the loop, which is what keeps a design iteration cheap.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .scenario import CompiledScenario, Scenario
from .solver import make_initial_state, region_average_speed, step


@dataclass
class DesignVector:
    """Named, bounded design parameters; values always live inside their
    bounds (updates are projected)."""

    names: list[str]
    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def from_scenario(cls, sc: Scenario) -> "DesignVector":
        x0, lo, hi = sc.design_bounds()
        return cls(names=[p.name for p in sc.design], values=x0.copy(), lo=lo, hi=hi)

    def clamped(self, values: np.ndarray) -> np.ndarray:
        return np.clip(values, self.lo, self.hi)

    def as_dict(self) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.values)}


@dataclass
class ObjectiveSpec:
    target_speed: float = 0.55
    settle_steps: int = 300
    avg_fraction: float = 0.25

    @classmethod
    def from_scenario(cls, sc: Scenario) -> "ObjectiveSpec":
        ob = sc.objective
        if ob is None:
            raise ValueError("scenario has no objective section")
        return cls(target_speed=ob.target_speed, settle_steps=ob.settle_steps,
                   avg_fraction=ob.avg_fraction)


@dataclass
class Evaluation:
    loss: float
    region_speeds: np.ndarray
    theta: np.ndarray


@dataclass
class OptimizationResult:
    theta: np.ndarray
    loss: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)
    theta_history: list[np.ndarray] = field(default_factory=list)
    region_speeds: np.ndarray | None = None


def evaluate_objective(compiled: CompiledScenario, theta: np.ndarray,
                       spec: ObjectiveSpec | None = None,
                       profile=None) -> Evaluation:
    """Apply the design, run the forward simulation, time-average the
    region speeds over the trailing window, and return
    L = sum_i (u_i - u_target)^2."""
    sc = compiled.scenario
    spec = spec or ObjectiveSpec.from_scenario(sc)
    profile = profile or sc.inlet
    regions = sc.objective.regions
    labels, poros = compiled.voxelize_design(theta)
    state = make_initial_state(sc.grid, labels, poros, sc.solver, profile,
                               mode=sc.init_mode)
    window = max(1, int(round(spec.settle_steps * spec.avg_fraction)))
    sums = np.zeros(len(regions))
    count = 0
    for n in range(spec.settle_steps):
        step(state, sc.solver, compiled.psys, compiled.preconditioner, profile,
             compiled.advector, pcg_tol=sc.pcg_tol)
        if n >= spec.settle_steps - window:
            for ri, r in enumerate(regions):
                sums[ri] += region_average_speed(state, r.lo, r.hi)
            count += 1
    speeds = sums / count
    loss = float(np.sum((speeds - spec.target_speed) ** 2))
    if not np.isfinite(loss):
        raise FloatingPointError(f"objective evaluation produced {loss} at theta={theta}")
    return Evaluation(loss=loss, region_speeds=speeds, theta=np.asarray(theta, float))


def _n_workers() -> int:
    env = os.environ.get("CITYWIND_THREADS")
    return max(1, int(env)) if env else 1


def finite_diff_gradient(compiled: CompiledScenario, theta: np.ndarray,
                         spec: ObjectiveSpec, eps: float = 0.1,
                         design: DesignVector | None = None,
                         base: Evaluation | None = None):
    """Forward differences: one extra evaluation per parameter (N+1 runs
    total). Entries whose +eps step would leave the bounds use a backward
    difference instead. Evaluations are independent and may run in a small
    thread pool (CITYWIND_THREADS)."""
    theta = np.asarray(theta, dtype=float)
    design = design or DesignVector.from_scenario(compiled.scenario)
    if base is None:
        base = evaluate_objective(compiled, theta, spec)

    steps = []
    for i in range(len(theta)):
        if theta[i] + eps <= design.hi[i]:
            steps.append(eps)
        else:
            steps.append(-eps)
    jobs = []
    for i, h in enumerate(steps):
        t = theta.copy()
        t[i] += h
        jobs.append(t)

    workers = _n_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            evals = list(pool.map(lambda t: evaluate_objective(compiled, t, spec), jobs))
    else:
        evals = [evaluate_objective(compiled, t, spec) for t in jobs]

    grad = np.array([(e.loss - base.loss) / h for e, h in zip(evals, steps)])
    return grad, base


def gradient_descent(compiled: CompiledScenario, theta0=None,
                     spec: ObjectiveSpec | None = None, lam: float = 1.0,
                     eps: float = 0.1, max_iter: int = 30, rel_tol: float = 1e-3,
                     on_iteration=None) -> OptimizationResult:
    """Plain projected descent theta <- clamp(theta - lam * grad L) with the
    relative-change stopping rule (3 consecutive iterations below rel_tol).
    The loss does not need to reach zero at convergence."""
    sc = compiled.scenario
    spec = spec or ObjectiveSpec.from_scenario(sc)
    design = DesignVector.from_scenario(sc)
    theta = design.clamped(np.asarray(
        design.values if theta0 is None else theta0, dtype=float))

    base = evaluate_objective(compiled, theta, spec)
    history = [base.loss]
    thetas = [theta.copy()]
    stable = 0
    converged = False
    it = 0
    if on_iteration is not None:
        on_iteration(0, theta, base)
    for it in range(1, max_iter + 1):
        grad, base = finite_diff_gradient(compiled, theta, spec, eps=eps,
                                          design=design, base=base)
        theta = design.clamped(theta - lam * grad)
        base = evaluate_objective(compiled, theta, spec)
        if not np.isfinite(base.loss):
            break
        new_loss = base.loss
        rel = abs(history[-1] - new_loss) / max(history[-1], 1e-12)
        history.append(new_loss)
        thetas.append(theta.copy())
        if on_iteration is not None:
            on_iteration(it, theta, base)
        if rel < rel_tol:
            stable += 1
            if stable >= 3:
                converged = True
                break
        else:
            stable = 0
    return OptimizationResult(theta=theta, loss=history[-1], iterations=it,
                              converged=converged, history=history,
                              theta_history=thetas,
                              region_speeds=base.region_speeds)


def robustness_check(compiled: CompiledScenario, theta: np.ndarray,
                     spec: ObjectiveSpec | None = None,
                     offsets_deg=(-10.0, 0.0, 10.0)) -> list[dict]:
    """One forward evaluation per wind-direction offset at fixed theta."""
    sc = compiled.scenario
    spec = spec or ObjectiveSpec.from_scenario(sc)
    rows = []
    for off in offsets_deg:
        ev = evaluate_objective(compiled, theta, spec,
                                profile=sc.inlet.rotated(off))
        rows.append({"offset_deg": float(off), "loss": ev.loss,
                     "region_speeds": [float(s) for s in ev.region_speeds]})
    return rows


def write_report(out_dir: str, sc: Scenario, result: OptimizationResult,
                 robustness: list[dict] | None = None) -> None:
    """CSV iteration history plus a JSON summary."""
    os.makedirs(out_dir, exist_ok=True)
    names = [p.name for p in sc.design]
    with open(os.path.join(out_dir, "history.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss"] + names)
        for n, (loss, th) in enumerate(zip(result.history, result.theta_history)):
            w.writerow([n, f"{loss:.8g}"] + [f"{v:.6g}" for v in th])
    summary = {
        "theta": {n: float(v) for n, v in zip(names, result.theta)},
        "loss": result.loss,
        "iterations": result.iterations,
        "converged": result.converged,
        "region_speeds": [float(s) for s in (result.region_speeds
                                             if result.region_speeds is not None else [])],
    }
    if robustness is not None:
        summary["robustness"] = robustness
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
