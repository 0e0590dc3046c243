"""JSON scenario files, gain files and the built-in experiment setups."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimator_static import GaussianJointModel
from .filter import GainSchedule
from .graph import CommGraph
from .model import CostModel, LinearSystem, build_average_coupling_cost, build_chain_coupling_cost

GAINS_FORMAT = "mtmse-gains"
GAINS_VERSION = 1
ORDERING = ("local entries ordered by descending lag, then ascending source agent; "
            "F_i maps the stacked local innovation of agent i to z_i; K maps stacked y(t) to the state")


class ScenarioError(ValueError):
    """Malformed scenario document; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str = "", line: int | None = None):
        where = f" (field '{field}')" if field else ""
        where += f" (line {line})" if line is not None else ""
        super().__init__(message + where)
        self.field = field
        self.line = line


@dataclass
class Scenario:
    system: LinearSystem
    cost: CostModel
    graph: CommGraph | None
    horizon: int = 1
    cost_spec: dict = field(default_factory=dict)
    static: GaussianJointModel | None = None
    static_spec: dict | None = None
    experiment: dict = field(default_factory=dict)
    name: str = ""

    def with_lambda(self, lam: float) -> "Scenario":
        spec = dict(self.cost_spec, **{"lambda": lam})
        return Scenario(self.system, _build_cost(spec, self.system), self.graph, self.horizon, spec,
                        self.static, self.static_spec, self.experiment, self.name)

    def to_dict(self) -> dict:
        s = self.system
        doc = {
            "name": self.name,
            "system": {
                "A": s.A.tolist(),
                "C": [c.tolist() for c in s.C],
                "Q": s.Q.tolist(),
                "R": [r.tolist() for r in s.R],
                "Sigma_x": s.Sigma_x.tolist(),
            },
            "cost": self.cost_spec if self.cost_spec.get("type") in ("average", "chain") else {
                "S_blocks": [[b.tolist() for b in row] for row in self.cost.S_blocks],
                "L_blocks": [b.tolist() for b in self.cost.L_blocks],
            },
            "graph": None if self.graph is None else {
                "n": self.graph.n,
                "edges": [[i, j, d] for (i, j), d in sorted(self.graph.delays.items())],
            },
            "horizon": self.horizon,
            "experiment": self.experiment,
        }
        if self.static_spec is not None:
            doc["static"] = self.static_spec
        return doc


def _get(doc: dict, key: str, path: str):
    if not isinstance(doc, dict) or key not in doc:
        raise ScenarioError("missing field", f"{path}{key}")
    return doc[key]


def _matrix(value, path: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"not a numeric matrix: {exc}", path) from None
    if arr.ndim > 2:
        raise ScenarioError("expected a matrix (nested row-major lists)", path)
    return arr


def _build_cost(spec: dict, system: LinearSystem) -> CostModel:
    kind = spec.get("type")
    if kind in ("average", "chain"):
        lam = float(_get(spec, "lambda", "cost."))
        d = int(spec.get("d", system.d_x // system.n))
        builder = build_average_coupling_cost if kind == "average" else build_chain_coupling_cost
        try:
            return builder(system.n, d, lam)
        except ValueError as exc:
            raise ScenarioError(str(exc), "cost") from None
    if kind not in (None, "explicit"):
        raise ScenarioError(f"unknown cost type {kind!r}", "cost.type")
    S = [[_matrix(b, f"cost.S_blocks[{i}][{j}]") for j, b in enumerate(row)]
         for i, row in enumerate(_get(spec, "S_blocks", "cost."))]
    L = [_matrix(b, f"cost.L_blocks[{i}]") for i, b in enumerate(_get(spec, "L_blocks", "cost."))]
    try:
        return CostModel(S, L)
    except ValueError as exc:
        raise ScenarioError(str(exc), "cost") from None


def scenario_from_dict(doc: dict) -> Scenario:
    sysd = _get(doc, "system", "")
    try:
        system = LinearSystem(
            _matrix(_get(sysd, "A", "system."), "system.A"),
            [_matrix(c, f"system.C[{i}]") for i, c in enumerate(_get(sysd, "C", "system."))],
            _matrix(_get(sysd, "Q", "system."), "system.Q"),
            [_matrix(r, f"system.R[{i}]") for i, r in enumerate(_get(sysd, "R", "system."))],
            _matrix(_get(sysd, "Sigma_x", "system."), "system.Sigma_x"),
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc), "system") from None
    cost_spec = dict(_get(doc, "cost", ""))
    cost = _build_cost(cost_spec, system)
    graph = None
    gdoc = doc.get("graph")
    if gdoc is not None:
        try:
            graph = CommGraph.from_edges(int(_get(gdoc, "n", "graph.")), _get(gdoc, "edges", "graph."))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(str(exc), "graph") from None
    horizon = doc.get("horizon", 1)
    if not isinstance(horizon, int) or horizon < 1:
        raise ScenarioError("horizon must be a positive integer", "horizon")
    static_spec = doc.get("static")
    static = None
    if static_spec is not None:
        cov = _matrix(_get(static_spec, "covariance", "static."), "static.covariance")
        dims = [int(d) for d in _get(static_spec, "dims", "static.")]
        static = GaussianJointModel.from_covariance(cov, int(_get(static_spec, "d_x", "static.")), dims)
    return Scenario(system, cost, graph, horizon, cost_spec, static, static_spec,
                    dict(doc.get("experiment", {})), str(doc.get("name", "")))


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(doc, dict):
        raise ScenarioError("top level must be an object")
    return scenario_from_dict(doc)


def dump_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2) + "\n")


def static_joint_model(scenario: Scenario) -> GaussianJointModel:
    """Explicit static block, or the one-shot problem of estimating x(1) from y(1)."""
    if scenario.static is not None:
        return scenario.static
    s = scenario.system
    n = s.n
    theta = [None] + [s.Sigma_x @ c.T for c in s.C]
    sigma = [[None] * (n + 1)] + [
        [None] + [s.C[i] @ s.Sigma_x @ s.C[j].T + (s.R[i] if i == j else 0.0) for j in range(n)]
        for i in range(n)
    ]
    return GaussianJointModel(theta, sigma, s.Sigma_x)


# -- gain files ---------------------------------------------------------------

def _checksum(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def gains_document(mode: str, K, F, dims: dict, extra: dict | None = None) -> dict:
    payload = {
        "mode": mode,
        "ordering": ORDERING,
        "dims": dims,
        "K": [np.asarray(k).tolist() for k in K],
        "F": [[np.asarray(f).tolist() for f in step] for step in F],
    }
    if extra:
        payload.update(extra)
    return {"format": GAINS_FORMAT, "version": GAINS_VERSION, "checksum": _checksum(payload), "payload": payload}


def write_gains(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc) + "\n")


def read_gains(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != GAINS_FORMAT or doc.get("version") != GAINS_VERSION:
        raise ScenarioError("not a version-1 gain file", "format")
    if _checksum(doc["payload"]) != doc.get("checksum"):
        raise ScenarioError("checksum mismatch", "checksum")
    return doc["payload"]


def schedule_from_gains(payload: dict) -> GainSchedule:
    """Rebuild an online-only schedule (K and F) from a finite-mode gain file."""
    K = tuple(np.array(k, dtype=float) for k in payload["K"])
    F = tuple(tuple(np.array(f, dtype=float).reshape(rows, cols) for f, (rows, cols) in zip(step, shapes))
              for step, shapes in zip(payload["F"], payload["dims"]["F_shapes"]))
    T = len(F)
    return GainSchedule(K, F, (), (), np.full(T, np.nan), np.full(T, np.nan), kind=payload.get("mode", "finite"))


# -- built-in experiments -------------------------------------------------------

def two_agent_scenario(sigma: float = 1.0, lam: float = 4.0) -> Scenario:
    """Two agents observe x ~ N(0, 1) with noise variance sigma^2; coupling on the average."""
    system = LinearSystem(0.0, [1.0, 1.0], 1.0, [sigma**2, sigma**2], 1.0)
    q = lam / 4.0
    spec = {"type": "explicit", "S_blocks": [[[[1 + q]], [[q]]], [[[q]], [[1 + q]]]], "L_blocks": [[[1.0]], [[1.0]]]}
    return Scenario(system, _build_cost(spec, system), CommGraph.complete(2, 1), 1, spec,
                    experiment={"paths": 100000, "seed": 0}, name="two-agent")


def uav_system(n: int = 4) -> LinearSystem:
    A = np.full((n, n), 0.1) + 0.55 * np.eye(n)
    C = [2.0 * np.ones((1, n))] + [0.1 * np.eye(n)[i:i + 1] for i in range(1, n)]
    return LinearSystem(A, C, np.eye(n), [[[0.1]]] * n, np.eye(n))


def uav_scenario(n: int = 4, lam_over_n2: float = 1.0, T: int = 100) -> Scenario:
    system = uav_system(n)
    spec = {"type": "average", "lambda": lam_over_n2 * n * n, "d": 1}
    return Scenario(system, _build_cost(spec, system), CommGraph.complete(n, 2), T, spec,
                    experiment={"paths": 1000, "seed": 0, "strategies": ["mtmse", "mmse", "ckf"],
                                "lambda_grid": [0.1, 1.0, 10.0], "consensus_iterations": 1},
                    name="uav")


PLATOON_A = np.array([
    [0.9, 0.0, 0.0, 0.0],
    [0.7, 0.9, 0.0, 0.0],
    [0.7, 0.7, 0.9, 0.0],
    [0.5, 0.7, 0.7, 0.9],
])


def platoon_system() -> LinearSystem:
    n = 4
    return LinearSystem(PLATOON_A, [np.eye(n)] * n, np.eye(n), [0.1 * np.eye(n)] * n, np.eye(n))


def platoon_scenario(lam: float = 1.0, T: int = 100) -> Scenario:
    system = platoon_system()
    spec = {"type": "chain", "lambda": lam, "d": 1}
    return Scenario(system, _build_cost(spec, system), CommGraph.chain(4, 1), T, spec,
                    experiment={"paths": 1000, "seed": 0, "strategies": ["mtmse", "mmse", "ckf"],
                                "lambda_grid": [0.1, 1.0, 10.0], "consensus_iterations": 1},
                    name="platoon")


BUILTIN = {"two-agent": two_agent_scenario, "uav": uav_scenario, "platoon": platoon_scenario}
