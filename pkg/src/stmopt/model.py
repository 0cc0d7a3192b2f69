"""Problem description, structured mesh and initial density field.

A problem is described by a JSON document (see ``README.md`` for the
schema).  :func:`parse_problem` turns it into an immutable
:class:`ProblemDefinition`, :func:`build_mesh` discretizes it into a
structured grid of square bilinear elements and :func:`init_density`
produces the uniform starting design.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

SCHEMA_VERSION = 1

EDGES = ("top", "bottom", "left", "right")


class ProblemError(ValueError):
    """Invalid problem document.  ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class NodeSelector:
    """Selects mesh nodes by explicit index, edge keyword or coordinate box.

    Exactly one of ``nodes``, ``edge`` or ``box`` is set.  ``box`` is
    ``(xmin, ymin, xmax, ymax)`` and is inclusive.
    """

    nodes: Optional[tuple[int, ...]] = None
    edge: Optional[str] = None
    box: Optional[tuple[float, float, float, float]] = None

    def to_dict(self) -> dict:
        if self.nodes is not None:
            return {"nodes": list(self.nodes)}
        if self.edge is not None:
            return {"edge": self.edge}
        return {"box": list(self.box)}


@dataclass(frozen=True)
class Load:
    selector: NodeSelector
    fx: float
    fy: float
    # "per_node": every selected node carries (fx, fy);
    # "total": (fx, fy) is the resultant, spread over the selection.
    distribution: str = "per_node"


@dataclass(frozen=True)
class Support:
    selector: NodeSelector
    fix_x: bool
    fix_y: bool


@dataclass(frozen=True)
class ProblemDefinition:
    """Everything needed for one optimization run.

    The tensile strength is given either in stress units
    (``tensile_strength``) or as a multiple of the largest first
    principal stress of the initial elastic solution
    (``tensile_strength_factor``).  ``voids`` are element boxes that are
    held at ``rho_min`` for the whole run (openings).
    """

    nx: int
    ny: int
    loads: tuple[Load, ...]
    supports: tuple[Support, ...]
    mass_fraction: float
    element_size: float = 1.0
    thickness: float = 1.0
    young_modulus: float = 1.0
    poisson_ratio: float = 0.2
    tensile_strength: Optional[float] = None
    tensile_strength_factor: Optional[float] = None
    voids: tuple[tuple[float, float, float, float], ...] = ()
    penalty: float = 3.0
    step: float = 0.05
    rho_min: float = 1e-3
    max_iterations: int = 500
    tol_d: float = 1e-4
    tol_f: float = 1e-6
    detection: str = "any"
    release_bounds: bool = True
    monotone: bool = True
    restore_every: int = 0
    name: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        _validate(self)

    @property
    def width(self) -> float:
        return self.nx * self.element_size

    @property
    def height(self) -> float:
        return self.ny * self.element_size

    def replace(self, **changes) -> "ProblemDefinition":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "mesh": {
                "nx": self.nx,
                "ny": self.ny,
                "element_size": self.element_size,
                "thickness": self.thickness,
            },
            "material": {
                "young_modulus": self.young_modulus,
                "poisson_ratio": self.poisson_ratio,
                "tensile_strength": (
                    self.tensile_strength
                    if self.tensile_strength is not None
                    else {"factor": self.tensile_strength_factor}
                ),
            },
            "loads": [
                {**ld.selector.to_dict(), "fx": ld.fx, "fy": ld.fy,
                 "distribution": ld.distribution}
                for ld in self.loads
            ],
            "supports": [
                {**s.selector.to_dict(), "fix_x": s.fix_x, "fix_y": s.fix_y}
                for s in self.supports
            ],
            "voids": [list(v) for v in self.voids],
            "optimizer": {
                "mass_fraction": self.mass_fraction,
                "penalty": self.penalty,
                "step": self.step,
                "rho_min": self.rho_min,
                "max_iterations": self.max_iterations,
                "tol_d": self.tol_d,
                "tol_f": self.tol_f,
                "detection": self.detection,
                "release_bounds": self.release_bounds,
                "monotone": self.monotone,
                "restore_every": self.restore_every,
            },
        }


def _validate(pd: ProblemDefinition) -> None:
    def check(ok, name, msg):
        if not ok:
            raise ProblemError(name, msg)

    check(pd.schema_version == SCHEMA_VERSION, "schema_version",
          f"unsupported version {pd.schema_version!r}")
    for name in ("nx", "ny"):
        v = getattr(pd, name)
        check(isinstance(v, int) and not isinstance(v, bool) and v >= 1,
              name, "must be an integer >= 1")
    check(pd.element_size > 0, "element_size", "must be > 0")
    check(pd.thickness > 0, "thickness", "must be > 0")
    check(pd.young_modulus > 0, "young_modulus", "must be > 0")
    check(0 <= pd.poisson_ratio < 0.5, "poisson_ratio", "must be in [0, 0.5)")
    check(0 < pd.mass_fraction <= 1, "mass_fraction", "must be in (0, 1]")
    check(0 < pd.rho_min < pd.mass_fraction, "rho_min",
          "must satisfy 0 < rho_min < mass_fraction")
    check(pd.step > 0, "step", "must be > 0")
    check(pd.penalty >= 1, "penalty", "must be >= 1")
    check(isinstance(pd.max_iterations, int) and pd.max_iterations >= 0,
          "max_iterations", "must be a non-negative integer")
    check(pd.tol_d >= 0, "tol_d", "must be >= 0")
    check(pd.tol_f >= 0, "tol_f", "must be >= 0")
    check(pd.detection in ("any", "average"), "detection",
          "must be 'any' or 'average'")
    check(isinstance(pd.restore_every, int) and pd.restore_every >= 0,
          "restore_every", "must be a non-negative integer")
    check((pd.tensile_strength is None) != (pd.tensile_strength_factor is None),
          "tensile_strength", "give exactly one of a value or a factor")
    if pd.tensile_strength is not None:
        check(pd.tensile_strength > 0, "tensile_strength", "must be > 0")
    else:
        check(pd.tensile_strength_factor > 0, "tensile_strength",
              "factor must be > 0")
    check(len(pd.supports) >= 1, "supports", "at least one support is required")
    check(any(s.fix_x or s.fix_y for s in pd.supports), "supports",
          "no degree of freedom is fixed")
    check(len(pd.loads) >= 1 and any(ld.fx != 0 or ld.fy != 0 for ld in pd.loads),
          "loads", "at least one nonzero load is required")
    for ld in pd.loads:
        check(ld.distribution in ("per_node", "total"), "loads",
              f"unknown distribution {ld.distribution!r}")
    for v in pd.voids:
        check(len(v) == 4 and v[0] < v[2] and v[1] < v[3], "voids",
              f"box {list(v)} must be [xmin, ymin, xmax, ymax]")


# -- parsing -------------------------------------------------------------------

def _require(doc: dict, key: str, where: str = ""):
    if key not in doc:
        raise ProblemError(where + key, "missing required field")
    return doc[key]


def _number(value, name) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProblemError(name, f"expected a number, got {value!r}")
    return float(value)


def _integer(value, name) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ProblemError(name, f"expected an integer, got {value!r}")
    return value


def _selector(doc: dict, name: str) -> NodeSelector:
    keys = [k for k in ("nodes", "edge", "box") if k in doc]
    if len(keys) != 1:
        raise ProblemError(name, "needs exactly one of 'nodes', 'edge', 'box'")
    key = keys[0]
    if key == "nodes":
        nodes = doc["nodes"]
        if not isinstance(nodes, list) or not nodes:
            raise ProblemError(name + ".nodes", "expected a non-empty list")
        return NodeSelector(nodes=tuple(_integer(n, name + ".nodes") for n in nodes))
    if key == "edge":
        if doc["edge"] not in EDGES:
            raise ProblemError(name + ".edge", f"expected one of {EDGES}")
        return NodeSelector(edge=doc["edge"])
    box = doc["box"]
    if not isinstance(box, list) or len(box) != 4:
        raise ProblemError(name + ".box", "expected [xmin, ymin, xmax, ymax]")
    return NodeSelector(box=tuple(_number(b, name + ".box") for b in box))


def problem_from_dict(doc: dict) -> ProblemDefinition:
    if not isinstance(doc, dict):
        raise ProblemError("document", "top level must be an object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    mesh = _require(doc, "mesh")
    material = _require(doc, "material")
    opt = doc.get("optimizer", {})
    if "mass_fraction" not in opt:
        raise ProblemError("optimizer.mass_fraction", "missing required field")

    strength = _require(material, "tensile_strength", "material.")
    if isinstance(strength, dict):
        tau0, tau0_factor = None, _number(
            _require(strength, "factor", "material.tensile_strength."),
            "tensile_strength")
    else:
        tau0, tau0_factor = _number(strength, "tensile_strength"), None

    loads = []
    for i, ld in enumerate(_require(doc, "loads")):
        name = f"loads[{i}]"
        loads.append(Load(
            selector=_selector(ld, name),
            fx=_number(ld.get("fx", 0.0), name + ".fx"),
            fy=_number(ld.get("fy", 0.0), name + ".fy"),
            distribution=ld.get("distribution", "per_node"),
        ))
    supports = []
    for i, s in enumerate(_require(doc, "supports")):
        name = f"supports[{i}]"
        supports.append(Support(
            selector=_selector(s, name),
            fix_x=bool(s.get("fix_x", False)),
            fix_y=bool(s.get("fix_y", False)),
        ))
    voids = []
    for i, v in enumerate(doc.get("voids", [])):
        if not isinstance(v, list) or len(v) != 4:
            raise ProblemError(f"voids[{i}]", "expected [xmin, ymin, xmax, ymax]")
        voids.append(tuple(_number(b, f"voids[{i}]") for b in v))

    kwargs: dict[str, Any] = dict(
        nx=_integer(_require(mesh, "nx", "mesh."), "nx"),
        ny=_integer(_require(mesh, "ny", "mesh."), "ny"),
        element_size=_number(mesh.get("element_size", 1.0), "element_size"),
        thickness=_number(mesh.get("thickness", 1.0), "thickness"),
        young_modulus=_number(material.get("young_modulus", 1.0), "young_modulus"),
        poisson_ratio=_number(material.get("poisson_ratio", 0.2), "poisson_ratio"),
        tensile_strength=tau0,
        tensile_strength_factor=tau0_factor,
        loads=tuple(loads),
        supports=tuple(supports),
        voids=tuple(voids),
        mass_fraction=_number(opt["mass_fraction"], "mass_fraction"),
        name=str(doc.get("name", "")),
        schema_version=version,
    )
    for key in ("penalty", "step", "rho_min", "tol_d", "tol_f"):
        if key in opt:
            kwargs[key] = _number(opt[key], key)
    for key in ("max_iterations", "restore_every"):
        if key in opt:
            kwargs[key] = _integer(opt[key], key)
    if "detection" in opt:
        kwargs["detection"] = opt["detection"]
    for key in ("release_bounds", "monotone"):
        if key in opt:
            if not isinstance(opt[key], bool):
                raise ProblemError(key, f"expected true or false, got {opt[key]!r}")
            kwargs[key] = opt[key]
    return ProblemDefinition(**kwargs)


def parse_problem(text: str) -> ProblemDefinition:
    """Parse a JSON problem document, apply defaults and validate it."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemError("document", f"malformed JSON ({exc})") from exc
    return problem_from_dict(doc)


def emit_problem(pd: ProblemDefinition) -> str:
    return json.dumps(pd.to_dict(), indent=2) + "\n"


def load_problem(path) -> ProblemDefinition:
    with open(path, encoding="utf-8") as fh:
        return parse_problem(fh.read())


# -- mesh ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Mesh:
    """Structured grid of square Q4 elements.

    Node ``(i, j)`` sits at ``(i*h, j*h)`` and has index ``j*(nx+1) + i``;
    element ``(ix, iy)`` has index ``iy*nx + ix`` and nodes listed
    counter-clockwise from the lower-left corner.  Node ``n`` owns dofs
    ``2n`` (x) and ``2n+1`` (y).
    """

    nx: int
    ny: int
    element_size: float
    thickness: float
    coords: np.ndarray          # (n_nodes, 2)
    connectivity: np.ndarray    # (n_elements, 4)
    edofs: np.ndarray           # (n_elements, 8)
    volumes: np.ndarray         # (n_elements,)
    det_j: np.ndarray           # (n_elements,) constant per element
    load_vector: np.ndarray = field(default=None)
    fixed_dofs: np.ndarray = field(default=None)
    void_elements: np.ndarray = field(default=None)

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def n_elements(self) -> int:
        return len(self.connectivity)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def free_dofs(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_dofs), self.fixed_dofs)

    @property
    def design_mask(self) -> np.ndarray:
        mask = np.ones(self.n_elements, dtype=bool)
        mask[self.void_elements] = False
        return mask

    def node_index(self, i: int, j: int) -> int:
        return j * (self.nx + 1) + i

    def element_index(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix

    def element_grid(self, values: np.ndarray) -> np.ndarray:
        """Reshape a per-element vector to ``(ny, nx)`` with row 0 at the bottom."""
        return np.asarray(values).reshape(self.ny, self.nx)

    def centroids(self) -> np.ndarray:
        return self.coords[self.connectivity].mean(axis=1)

    def select(self, selector: NodeSelector) -> np.ndarray:
        """Resolve a selector to sorted node indices; raise if nothing matches."""
        x, y = self.coords[:, 0], self.coords[:, 1]
        tol = 1e-9 * self.element_size
        if selector.nodes is not None:
            idx = np.asarray(selector.nodes, dtype=int)
            bad = idx[(idx < 0) | (idx >= self.n_nodes)]
            if len(bad):
                raise ProblemError("selector", f"node indices {bad.tolist()} out of range")
            return np.unique(idx)
        if selector.edge is not None:
            w, h = self.nx * self.element_size, self.ny * self.element_size
            mask = {
                "bottom": np.abs(y) <= tol,
                "top": np.abs(y - h) <= tol,
                "left": np.abs(x) <= tol,
                "right": np.abs(x - w) <= tol,
            }[selector.edge]
        else:
            x0, y0, x1, y1 = selector.box
            mask = (x >= x0 - tol) & (x <= x1 + tol) & (y >= y0 - tol) & (y <= y1 + tol)
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            raise ProblemError("selector", f"{selector.to_dict()} matches no node")
        return idx


def _nodal_weights(coords: np.ndarray) -> np.ndarray:
    """Tributary weights that turn a resultant into a uniform line load.

    Falls back to an equal split when the nodes are not collinear along
    x or y (or when there is a single node).
    """
    n = len(coords)
    if n == 1:
        return np.ones(1)
    for axis in (0, 1):
        other = coords[:, 1 - axis]
        if np.ptp(other) == 0 and np.ptp(coords[:, axis]) > 0:
            order = np.argsort(coords[:, axis])
            s = coords[order, axis]
            trib = np.zeros(n)
            seg = np.diff(s)
            trib[:-1] += seg / 2
            trib[1:] += seg / 2
            weights = np.empty(n)
            weights[order] = trib / trib.sum()
            return weights
    return np.full(n, 1.0 / n)


def build_mesh(pd: ProblemDefinition) -> Mesh:
    """Discretize ``pd`` and resolve its loads, supports and voids."""
    nx, ny, h = pd.nx, pd.ny, pd.element_size
    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    coords = np.column_stack([ii.ravel() * h, jj.ravel() * h]).astype(float)

    ex, ey = np.meshgrid(np.arange(nx), np.arange(ny))
    n0 = (ey * (nx + 1) + ex).ravel()
    conn = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])
    edofs = np.empty((len(conn), 8), dtype=int)
    edofs[:, 0::2] = 2 * conn
    edofs[:, 1::2] = 2 * conn + 1

    n_el = nx * ny
    volumes = np.full(n_el, h * h * pd.thickness)
    det_j = np.full(n_el, h * h / 4.0)

    mesh = Mesh(nx, ny, h, pd.thickness, coords, conn, edofs, volumes, det_j)

    load = np.zeros(mesh.n_dofs)
    for i, ld in enumerate(pd.loads):
        try:
            nodes = mesh.select(ld.selector)
        except ProblemError as exc:
            raise ProblemError(f"loads[{i}]", str(exc)) from None
        w = _nodal_weights(coords[nodes]) if ld.distribution == "total" else np.ones(len(nodes))
        np.add.at(load, 2 * nodes, ld.fx * w)
        np.add.at(load, 2 * nodes + 1, ld.fy * w)

    fixed = []
    for i, s in enumerate(pd.supports):
        try:
            nodes = mesh.select(s.selector)
        except ProblemError as exc:
            raise ProblemError(f"supports[{i}]", str(exc)) from None
        if s.fix_x:
            fixed.append(2 * nodes)
        if s.fix_y:
            fixed.append(2 * nodes + 1)
    fixed = np.unique(np.concatenate(fixed)) if fixed else np.zeros(0, dtype=int)

    cent = mesh.centroids()
    void = np.zeros(n_el, dtype=bool)
    for x0, y0, x1, y1 in pd.voids:
        void |= (cent[:, 0] > x0) & (cent[:, 0] < x1) & (cent[:, 1] > y0) & (cent[:, 1] < y1)
    if void.all():
        raise ProblemError("voids", "every element is void")

    return dataclasses.replace(
        mesh, load_vector=load, fixed_dofs=fixed, void_elements=np.flatnonzero(void))


def target_mass(pd: ProblemDefinition, mesh: Mesh) -> float:
    return pd.mass_fraction * mesh.volumes.sum()


def init_density(pd: ProblemDefinition, mesh: Mesh) -> np.ndarray:
    """Uniform start with ``sum(rho * v) == M``.

    Without voids every entry equals ``mass_fraction``.  Void elements sit
    at ``rho_min`` and the remaining mass is spread evenly over the
    design elements.
    """
    rho = np.full(mesh.n_elements, pd.mass_fraction)
    void = mesh.void_elements
    if len(void):
        design = mesh.design_mask
        m_design = target_mass(pd, mesh) - pd.rho_min * mesh.volumes[void].sum()
        start = m_design / mesh.volumes[design].sum()
        if not pd.rho_min < start <= 1:
            raise ProblemError("mass_fraction",
                               f"start density {start:.4g} outside (rho_min, 1] after voids")
        rho[design] = start
        rho[void] = pd.rho_min
    return np.clip(rho, pd.rho_min, 1.0)
