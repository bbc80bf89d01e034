"""Declarative scenario files and the precompute/run pipeline.

A scenario JSON names the grid, boundary faces, inlet wind, solver
constants, objects (boxes, cylinders, meshes), optional painted porosity,
design parameters with geometry bindings, objective regions, and run
controls. Compiling a scenario assembles the pressure matrix and its
approximate-inverse preconditioner once; design edits only re-voxelize.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .advection import Advector
from .geometry import MeshError, box_mesh, cylinder_mesh, load_obj
from .grid import (
    CellLabel,
    GridObject,
    GridSpec,
    PorosityField,
    classify_boundary,
    decode_painted_porosity,
    load_raster,
    merge_labels,
    voxelize,
)
from .io import write_snapshot
from .linalg import build_ai_preconditioner, build_pressure_matrix
from .solver import InletProfile, SolverParams, make_initial_state, step

SCHEMA_VERSION = 1

_LABELS = {"inlet": CellLabel.INLET, "outlet": CellLabel.OUTLET,
           "solid_wall": CellLabel.SOLID_WALL}


class ScenarioError(ValueError):
    """Carries the complete list of validation problems, not just the first."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid scenario:\n  - " + "\n  - ".join(errors))
        self.errors = errors


@dataclass
class ObjectSpec:
    name: str
    kind: str                      # building | tree
    shape: str                     # box | cylinder | mesh
    lo: tuple | None = None        # box corners
    hi: tuple | None = None
    center: tuple | None = None    # cylinder footprint center (x, y)
    radius: float = 0.0
    z0: float | None = None
    z1: float | None = None
    path: str | None = None        # mesh file
    phi: float = 0.0
    lad: float = 0.0


@dataclass
class DesignParam:
    name: str
    lo: float
    hi: float
    initial: float
    object: str
    transform: str                 # translate_x|translate_y|translate_z|extent_x|extent_y|extent_z


@dataclass
class RegionSpec:
    name: str
    lo: tuple
    hi: tuple


@dataclass
class ObjectiveConfig:
    regions: list[RegionSpec]
    target_speed: float = 0.55
    settle_steps: int = 300
    avg_fraction: float = 0.25     # trailing window for the quasi-steady mean


@dataclass
class PaintConfig:
    path: str
    extrude_height: float | None = None
    tree_mask: str | None = None
    tree_lad: float = 1.0


@dataclass
class Scenario:
    name: str
    grid: GridSpec
    boundaries: dict
    inlet: InletProfile
    solver: SolverParams
    objects: list[ObjectSpec] = field(default_factory=list)
    paint: PaintConfig | None = None
    design: list[DesignParam] = field(default_factory=list)
    objective: ObjectiveConfig | None = None
    steps: int = 100
    snapshot_every: int = 0
    subdiv: int = 4
    ai_omega: float = 1.65
    ai_order: int = 1
    ai_truncate: bool = False
    pcg_tol: float | None = None
    init_mode: str = "inflow"
    perturb: float = 0.0
    base_dir: str = "."

    def design_bounds(self):
        lo = np.array([p.lo for p in self.design])
        hi = np.array([p.hi for p in self.design])
        x0 = np.array([p.initial for p in self.design])
        return x0, lo, hi


def _expect(cond, errors, msg):
    if not cond:
        errors.append(msg)
    return cond


def scenario_from_dict(doc: dict, base_dir: str = ".") -> Scenario:
    errors: list[str] = []
    if doc.get("version") != SCHEMA_VERSION:
        errors.append(f"unsupported schema version {doc.get('version')!r} "
                      f"(expected {SCHEMA_VERSION})")

    grid = None
    g = doc.get("grid")
    if _expect(isinstance(g, dict), errors, "missing grid section"):
        try:
            grid = GridSpec(int(g.get("nx", 0)), int(g.get("ny", 0)), int(g.get("nz", 1)),
                            float(g.get("dx", 0)), float(g.get("dy", 0)),
                            float(g.get("dz", g.get("dx", 0))),
                            tuple(g.get("origin", (0.0, 0.0, 0.0))))
        except (ValueError, TypeError) as e:
            errors.append(f"grid: {e}")

    boundaries = {}
    b = doc.get("boundaries", {})
    for face, lab in b.items():
        if lab not in _LABELS:
            errors.append(f"boundary face {face}: unknown label {lab!r}")
        else:
            boundaries[face] = _LABELS[lab]
    if grid is not None:
        required = ["x_min", "x_max", "y_min", "y_max"] + \
            ([] if grid.is_2d else ["z_min", "z_max"])
        for face in required:
            _expect(face in boundaries, errors, f"boundary face {face} not assigned")

    inlet = None
    try:
        i = doc.get("inlet", {})
        inlet = InletProfile(
            kind=i.get("kind", "uniform"), speed=float(i.get("speed", 1.0)),
            u_star=float(i.get("u_star", 0.5)), z0=float(i.get("z0", 0.5)),
            direction=tuple(i.get("direction", (1.0, 0.0))))
    except (ValueError, TypeError) as e:
        errors.append(f"inlet: {e}")

    solver = SolverParams()
    s = doc.get("solver", {})
    known = set(SolverParams.__dataclass_fields__)
    for key, val in s.items():
        if key not in known:
            errors.append(f"solver: unknown parameter {key!r}")
    try:
        solver = replace(solver, **{k: v for k, v in s.items() if k in known})
    except (ValueError, TypeError) as e:
        errors.append(f"solver: {e}")
    if solver.dt <= 0:
        errors.append(f"solver: dt must be > 0, got {solver.dt}")

    objects = []
    names = set()
    for n, o in enumerate(doc.get("objects", [])):
        name = o.get("name", f"object{n}")
        if name in names:
            errors.append(f"duplicate object name {name!r}")
        names.add(name)
        kind = o.get("kind", "building")
        shape = o.get("shape")
        spec = ObjectSpec(
            name=name, kind=kind, shape=shape,
            lo=tuple(o["lo"]) if "lo" in o else None,
            hi=tuple(o["hi"]) if "hi" in o else None,
            center=tuple(o["center"]) if "center" in o else None,
            radius=float(o.get("radius", 0.0)),
            z0=o.get("z0"), z1=o.get("z1"), path=o.get("path"),
            phi=float(o.get("phi", 0.0)), lad=float(o.get("lad", 0.0)))
        if kind not in ("building", "tree"):
            errors.append(f"object {name}: kind must be building or tree")
        if shape not in ("box", "cylinder", "mesh"):
            errors.append(f"object {name}: shape must be box, cylinder or mesh")
        elif shape == "box" and (spec.lo is None or spec.hi is None):
            errors.append(f"object {name}: box needs lo and hi")
        elif shape == "box" and spec.lo is not None and spec.hi is not None \
                and any(a >= b for a, b in zip(spec.lo, spec.hi)):
            errors.append(f"object {name}: box lo must be < hi componentwise")
        elif shape == "cylinder" and (spec.center is None or spec.radius <= 0):
            errors.append(f"object {name}: cylinder needs center and radius > 0")
        elif shape == "mesh":
            if spec.path is None:
                errors.append(f"object {name}: mesh needs a path")
            else:
                full = os.path.join(base_dir, spec.path)
                if not os.path.exists(full):
                    errors.append(f"object {name}: mesh file not found: {spec.path}")
                else:
                    try:
                        load_obj(full)
                    except MeshError as e:
                        errors.append(f"object {name}: {e}")
        if not 0.0 <= spec.phi <= 1.0:
            errors.append(f"object {name}: phi outside [0, 1]")
        if spec.lad < 0:
            errors.append(f"object {name}: LAD must be >= 0")
        objects.append(spec)

    paint = None
    p = doc.get("paint")
    if p is not None:
        paint = PaintConfig(path=p.get("path", ""),
                            extrude_height=p.get("extrude_height"),
                            tree_mask=p.get("tree_mask"),
                            tree_lad=float(p.get("tree_lad", 1.0)))
        full = os.path.join(base_dir, paint.path)
        if not os.path.exists(full):
            errors.append(f"paint raster not found: {paint.path}")
        elif grid is not None:
            try:
                img = load_raster(full)
                if img.shape != (grid.ny, grid.nx):
                    errors.append(
                        f"paint raster is {img.shape}, grid needs {(grid.ny, grid.nx)}")
            except ValueError as e:
                errors.append(f"paint raster: {e}")

    design = []
    transforms = {"translate_x", "translate_y", "translate_z",
                  "extent_x", "extent_y", "extent_z"}
    for d in doc.get("design", []):
        par = DesignParam(name=d.get("name", "?"), lo=float(d.get("lo", 0)),
                          hi=float(d.get("hi", 0)), initial=float(d.get("initial", 0)),
                          object=d.get("object", ""), transform=d.get("transform", ""))
        if par.lo > par.hi:
            errors.append(f"design {par.name}: lo > hi")
        if not par.lo <= par.initial <= par.hi:
            errors.append(f"design {par.name}: initial outside bounds")
        if par.object not in names:
            errors.append(f"design {par.name}: unknown object {par.object!r}")
        if par.transform not in transforms:
            errors.append(f"design {par.name}: unknown transform {par.transform!r}")
        design.append(par)

    objective = None
    ob = doc.get("objective")
    if ob is not None:
        regions = [RegionSpec(r.get("name", f"region{i}"), tuple(r["lo"]), tuple(r["hi"]))
                   for i, r in enumerate(ob.get("regions", []))]
        if len(regions) < 1:
            errors.append("objective: needs at least one region")
        objective = ObjectiveConfig(
            regions=regions, target_speed=float(ob.get("target_speed", 0.55)),
            settle_steps=int(ob.get("settle_steps", 300)),
            avg_fraction=float(ob.get("avg_fraction", 0.25)))
        if objective.target_speed < 0:
            errors.append("objective: target speed must be >= 0")

    run = doc.get("run", {})
    numerics = doc.get("numerics", {})

    if errors:
        raise ScenarioError(errors)

    return Scenario(
        name=doc.get("name", "scenario"), grid=grid, boundaries=boundaries,
        inlet=inlet, solver=solver, objects=objects, paint=paint,
        design=design, objective=objective,
        steps=int(run.get("steps", 100)),
        snapshot_every=int(run.get("snapshot_every", 0)),
        subdiv=int(numerics.get("subdiv", 4)),
        ai_omega=float(numerics.get("ai_omega", 1.65)),
        ai_order=int(numerics.get("ai_order", 1)),
        ai_truncate=bool(numerics.get("ai_truncate", False)),
        pcg_tol=numerics.get("pcg_tol"),
        init_mode=numerics.get("init", "inflow"),
        perturb=float(numerics.get("perturb", 0.0)),
        base_dir=base_dir,
    )


def load_scenario(path) -> Scenario:
    path = str(path)
    if not os.path.exists(path):
        raise ScenarioError([f"scenario file not found: {path}"])
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ScenarioError([f"not valid JSON: {e}"]) from e
    if not isinstance(doc, dict):
        raise ScenarioError(["scenario file must contain a JSON object"])
    return scenario_from_dict(doc, base_dir=os.path.dirname(path) or ".")


def bundled_scenario_path(name: str) -> str:
    here = os.path.dirname(__file__)
    return os.path.join(here, "scenarios", f"{name}.json")


# ---------------------------------------------------------------------------
# Geometry instantiation and design bindings


def _object_to_grid_object(spec: ObjectSpec, grid: GridSpec, base_dir: str,
                           offset=(0.0, 0.0, 0.0), extent=(0.0, 0.0, 0.0)) -> GridObject:
    kind = CellLabel.BUILDING if spec.kind == "building" else CellLabel.TREE
    off = np.asarray(offset, dtype=float)
    ext = np.asarray(extent, dtype=float)
    lo_d, hi_d = grid.extent()
    if spec.shape == "box":
        lo = np.asarray(spec.lo, dtype=float) + off
        hi = np.asarray(spec.hi, dtype=float) + off + ext
        return GridObject(kind=kind, box=(lo, hi), phi=spec.phi, lad=spec.lad,
                          name=spec.name)
    if spec.shape == "cylinder":
        z0 = spec.z0 if spec.z0 is not None else lo_d[2] - grid.dz
        z1 = spec.z1 if spec.z1 is not None else hi_d[2] + grid.dz
        mesh = cylinder_mesh((spec.center[0] + off[0], spec.center[1] + off[1]),
                             spec.radius + ext[0], z0 + off[2], z1 + off[2] + ext[2])
        return GridObject(kind=kind, mesh=mesh, phi=spec.phi, lad=spec.lad,
                          name=spec.name)
    mesh = load_obj(os.path.join(base_dir, spec.path))
    if off.any():
        mesh = mesh.translated(off)
    return GridObject(kind=kind, mesh=mesh, phi=spec.phi, lad=spec.lad, name=spec.name)


def combine_porosity(base_labels, base_poros, add_labels, add_poros):
    """Merge two porosity layers: lower phi wins, LAD accumulates by max."""
    phi = np.minimum(base_poros.phi, add_poros.phi)
    lad = np.maximum(base_poros.lad, add_poros.lad)
    labels = base_labels.copy()
    take = add_poros.phi < base_poros.phi
    labels[take] = add_labels[take]
    tree_only = (add_labels == int(CellLabel.TREE)) & (labels == int(CellLabel.AIR))
    labels[tree_only] = int(CellLabel.TREE)
    return labels, PorosityField(phi, lad)


@dataclass
class CompiledScenario:
    """Scenario plus everything precomputable: boundary labels, pressure
    system, preconditioner, advector. Interior edits never touch these."""

    scenario: Scenario
    boundary_labels: np.ndarray
    psys: object
    preconditioner: object
    advector: Advector

    @classmethod
    def compile(cls, sc: Scenario) -> "CompiledScenario":
        boundary = classify_boundary(sc.grid, sc.boundaries)
        psys = build_pressure_matrix(sc.grid, boundary)
        pre = build_ai_preconditioner(psys.A, sc.ai_omega, sc.ai_order,
                                      truncate=sc.ai_truncate)
        return cls(scenario=sc, boundary_labels=boundary, psys=psys,
                   preconditioner=pre, advector=Advector(sc.grid))

    def voxelize_design(self, theta: np.ndarray | None = None):
        """Labels + porosity for the design vector (None = initial values).
        Only porosity and interior labels change; the pressure system is
        untouched by construction."""
        sc = self.scenario
        offsets = {o.name: np.zeros(3) for o in sc.objects}
        extents = {o.name: np.zeros(3) for o in sc.objects}
        if sc.design:
            values = np.array([p.initial for p in sc.design]) if theta is None \
                else np.asarray(theta, dtype=float)
            for par, val in zip(sc.design, values):
                axis = "xyz".index(par.transform[-1])
                if par.transform.startswith("translate"):
                    offsets[par.object][axis] += val
                else:
                    extents[par.object][axis] += val

        labels = np.full(sc.grid.shape, int(CellLabel.AIR), dtype=np.int8)
        poros = PorosityField.open_air(sc.grid)
        if sc.paint is not None:
            img = load_raster(os.path.join(sc.base_dir, sc.paint.path))
            mask = None
            if sc.paint.tree_mask:
                mask = load_raster(os.path.join(sc.base_dir, sc.paint.tree_mask))
            labels, poros = decode_painted_porosity(
                img, sc.grid, tree_mask=mask,
                extrude_height=sc.paint.extrude_height, tree_lad=sc.paint.tree_lad)
        if sc.objects:
            gobjs = [_object_to_grid_object(o, sc.grid, sc.base_dir,
                                            offsets[o.name], extents[o.name])
                     for o in sc.objects]
            obj_labels, obj_poros = voxelize(gobjs, sc.grid, subdiv=sc.subdiv)
            labels, poros = combine_porosity(labels, poros, obj_labels, obj_poros)
        merged = merge_labels(self.boundary_labels, labels)
        return merged, poros

    def make_state(self, theta=None):
        sc = self.scenario
        labels, poros = self.voxelize_design(theta)
        state = make_initial_state(sc.grid, labels, poros, sc.solver, sc.inlet,
                                   mode=sc.init_mode)
        if sc.perturb:
            self._apply_perturbation(state)
        return state

    def _apply_perturbation(self, state):
        """Small deterministic cross-stream seed so symmetric wakes start
        shedding promptly."""
        sc = self.scenario
        eps = sc.perturb * sc.inlet.reference_speed(sc.grid)
        g = sc.grid
        dir_x, dir_y = sc.inlet.direction
        yc = (np.arange(g.ny) + 0.5) / g.ny
        xc = (np.arange(g.nx) + 0.5) / g.nx
        if abs(dir_y) >= abs(dir_x):
            state.u[1:-1, :, :] += eps * np.sin(2 * np.pi * 3 * yc)[None, :, None]
        else:
            state.v[:, 1:-1, :] += eps * np.sin(2 * np.pi * 3 * xc)[:, None, None]

    def step_state(self, state):
        sc = self.scenario
        return step(state, sc.solver, self.psys, self.preconditioner, sc.inlet,
                    self.advector, pcg_tol=sc.pcg_tol)


def run_simulation(sc: Scenario, out_dir=None, steps: int | None = None,
                   snapshot_every: int | None = None, probes=None,
                   on_step=None) -> dict:
    """Precompute once, march the configured number of steps, write
    snapshots at the cadence, and report stage timings and solver stats."""
    compiled = CompiledScenario.compile(sc)
    state = compiled.make_state()
    n_steps = sc.steps if steps is None else steps
    cadence = sc.snapshot_every if snapshot_every is None else snapshot_every
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_snapshot(os.path.join(out_dir, "snap_000000.bin"), state)

    probe_series = [[] for _ in (probes or [])]
    timings: dict[str, float] = {}
    pcg_iters: list[int] = []
    report_rows = []
    adv = compiled.advector
    last_report = None
    try:
        for n in range(1, n_steps + 1):
            last_report = compiled.step_state(state)
            for k, v in last_report.timings.items():
                timings[k] = timings.get(k, 0.0) + v
            pcg_iters.append(last_report.pcg.iterations if last_report.pcg else 0)
            if probes:
                for pi, pos in enumerate(probes):
                    c = (np.asarray(pos) - np.asarray(sc.grid.origin)) / sc.grid.spacing
                    us, vs, ws = adv.velocity_at(
                        state, np.array([c[0]]), np.array([c[1]]), np.array([c[2]]))
                    probe_series[pi].append((float(us[0]), float(vs[0]), float(ws[0])))
            if out_dir is not None and cadence and n % cadence == 0:
                write_snapshot(os.path.join(out_dir, f"snap_{n:06d}.bin"), state)
            if on_step is not None:
                on_step(n, state, last_report)
    except Exception:
        if out_dir is not None:
            write_snapshot(os.path.join(out_dir, "snap_lastgood.bin"), state)
        raise

    if out_dir is not None:
        write_snapshot(os.path.join(out_dir, "snap_final.bin"), state)
    return {
        "steps": n_steps,
        "time": state.time,
        "timings": timings,
        "pcg_iterations": pcg_iters,
        "cfl": last_report.cfl if last_report else 0.0,
        "div_before": last_report.div_before if last_report else 0.0,
        "div_after": last_report.div_after if last_report else 0.0,
        "state": state,
        "compiled": compiled,
        "probes": [np.array(s) for s in probe_series],
    }
