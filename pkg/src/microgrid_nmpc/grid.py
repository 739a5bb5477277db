"""Static microgrid description, bus admittance assembly and line power expressions.

Bus ids are 0-based throughout the API. All electrical quantities are per-unit
on a 100 kW base; angles are in radians.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import GridSpecError

logger = logging.getLogger(__name__)

DEFAULT_V_BOUNDS = (0.9, 1.1)
DEFAULT_THETA_BOUNDS = (-np.pi / 6, np.pi / 6)


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Line:
    """Undirected line with series admittance y = g + jb (p.u.)."""
    from_bus: int
    to_bus: int
    g: float
    b: float

    @property
    def admittance(self) -> complex:
        return complex(self.g, self.b)

    @classmethod
    def from_impedance(cls, from_bus: int, to_bus: int, r: float, x: float) -> Line:
        y = 1.0 / complex(r, x)
        return cls(from_bus, to_bus, y.real, y.imag)


@dataclass(frozen=True, eq=False)
class MicrogridSpec:
    """Static network of one microgrid.

    Attributes:
        n_buses: Number of buses N
        generators: Bus ids hosting a dispatchable generator, in device order
        batteries: Bus ids hosting a battery, in device order
        reference_bus: Slack bus with v = 1, theta = 0
        lines: Undirected lines with series admittance
        ground_admittance: Per-bus shunt admittance Y_l
        v_bounds: (N, 2) array of [v_min, v_max]
        theta_bounds: (N, 2) array of [theta_min, theta_max]
    """
    n_buses: int
    generators: tuple[int, ...]
    batteries: tuple[int, ...]
    reference_bus: int
    lines: tuple[Line, ...]
    ground_admittance: tuple[complex, ...] = ()
    v_bounds: np.ndarray = field(default=None)
    theta_bounds: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.n_buses
        if n < 1:
            raise GridSpecError(f"need at least one bus, got {n}")
        object.__setattr__(self, "generators", tuple(int(g) for g in self.generators))
        object.__setattr__(self, "batteries", tuple(int(b) for b in self.batteries))
        object.__setattr__(self, "lines", tuple(self.lines))
        if not 0 <= self.reference_bus < n:
            raise GridSpecError(f"reference bus {self.reference_bus} outside 0..{n - 1}")

        ground = tuple(complex(y) for y in self.ground_admittance) or (0j,) * n
        if len(ground) != n:
            raise GridSpecError(f"ground_admittance has {len(ground)} entries for {n} buses")
        object.__setattr__(self, "ground_admittance", ground)

        if self.v_bounds is None:
            v_bounds = np.tile(DEFAULT_V_BOUNDS, (n, 1))
            v_bounds[self.reference_bus] = 1.0
        else:
            v_bounds = self.v_bounds
        if self.theta_bounds is None:
            theta_bounds = np.tile(DEFAULT_THETA_BOUNDS, (n, 1))
            theta_bounds[self.reference_bus] = 0.0
        else:
            theta_bounds = self.theta_bounds
        object.__setattr__(self, "v_bounds", _frozen(v_bounds).reshape(n, 2))
        object.__setattr__(self, "theta_bounds", _frozen(theta_bounds).reshape(n, 2))

        for name, ids in (("generator", self.generators), ("battery", self.batteries)):
            for bus in ids:
                if not 0 <= bus < n:
                    raise GridSpecError(f"{name} bus {bus} outside 0..{n - 1}")
            if len(set(ids)) != len(ids):
                raise GridSpecError(f"more than one {name} on the same bus: {ids}")
        seen = set()
        for line in self.lines:
            for bus in (line.from_bus, line.to_bus):
                if not 0 <= bus < n:
                    raise GridSpecError(f"line endpoint {bus} outside 0..{n - 1}")
            if line.from_bus == line.to_bus:
                raise GridSpecError(f"self-loop line at bus {line.from_bus}")
            key = (min(line.from_bus, line.to_bus), max(line.from_bus, line.to_bus))
            if key in seen:
                raise GridSpecError(f"duplicate line between buses {key[0]} and {key[1]}")
            seen.add(key)

        if np.any(self.v_bounds[:, 0] > self.v_bounds[:, 1]):
            raise GridSpecError("v_min > v_max at some bus")
        if np.any(self.theta_bounds[:, 0] > self.theta_bounds[:, 1]):
            raise GridSpecError("theta_min > theta_max at some bus")
        ref = self.reference_bus
        if self.v_bounds[ref, 0] != self.v_bounds[ref, 1]:
            raise GridSpecError("reference bus must have a fixed voltage magnitude")
        if self.theta_bounds[ref, 0] != 0.0 or self.theta_bounds[ref, 1] != 0.0:
            raise GridSpecError("reference bus must have theta fixed to 0")

    @property
    def non_reference(self) -> np.ndarray:
        return np.array([b for b in range(self.n_buses) if b != self.reference_bus], dtype=int)

    def line_pairs(self) -> list[tuple[int, int, Line]]:
        """Lines as sorted (i, j, line) with i < j, in deterministic order."""
        pairs = [(min(ln.from_bus, ln.to_bus), max(ln.from_bus, ln.to_bus), ln) for ln in self.lines]
        return sorted(pairs, key=lambda t: (t[0], t[1]))


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    G: np.ndarray
    B: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B

    @property
    def n(self) -> int:
        return self.G.shape[0]


@dataclass
class GridAlgebraicState:
    """One quasi steady state z = (p, q, v, theta), per bus."""
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    theta: np.ndarray

    @classmethod
    def flat(cls, n: int) -> GridAlgebraicState:
        return cls(np.zeros(n), np.zeros(n), np.ones(n), np.zeros(n))

    @property
    def n(self) -> int:
        return len(self.v)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.v, self.theta])

    @classmethod
    def from_vector(cls, vec) -> GridAlgebraicState:
        vec = np.asarray(vec, dtype=float)
        if vec.size % 4:
            raise ValueError(f"state vector length {vec.size} is not a multiple of 4")
        p, q, v, theta = np.split(vec, 4)
        return cls(p.copy(), q.copy(), v.copy(), theta.copy())

    def voltage(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)


@dataclass
class PowerSetpoint:
    """Controllable device powers y, ordered as spec.generators / spec.batteries."""
    p_g: np.ndarray
    q_g: np.ndarray
    p_b: np.ndarray
    q_b: np.ndarray

    @classmethod
    def zeros(cls, spec: MicrogridSpec) -> PowerSetpoint:
        ng, nb = len(spec.generators), len(spec.batteries)
        return cls(np.zeros(ng), np.zeros(ng), np.zeros(nb), np.zeros(nb))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p_g, self.q_g, self.p_b, self.q_b])

    def bus_injections(self, spec: MicrogridSpec) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus generation + battery output (p, q)."""
        p = np.zeros(spec.n_buses)
        q = np.zeros(spec.n_buses)
        gens = np.array(spec.generators, dtype=int)
        bats = np.array(spec.batteries, dtype=int)
        np.add.at(p, gens, self.p_g)
        np.add.at(q, gens, self.q_g)
        np.add.at(p, bats, self.p_b)
        np.add.at(q, bats, self.q_b)
        return p, q


@dataclass
class DemandSnapshot:
    """Per-bus demand d; PV output enters as negative p_d at its bus."""
    p_d: np.ndarray
    q_d: np.ndarray

    def __post_init__(self):
        self.p_d = np.asarray(self.p_d, dtype=float)
        self.q_d = np.asarray(self.q_d, dtype=float)
        if self.p_d.shape != self.q_d.shape:
            raise ValueError(f"p_d and q_d differ in shape: {self.p_d.shape} vs {self.q_d.shape}")

    @classmethod
    def zeros(cls, n: int) -> DemandSnapshot:
        return cls(np.zeros(n), np.zeros(n))


def build_admittance(spec: MicrogridSpec) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix.

    Off-diagonal (l, m) holds the negated line admittance; the diagonal holds
    the ground admittance plus all incident line admittances.
    """
    n = spec.n_buses
    Y = np.diag(np.array(spec.ground_admittance, dtype=complex))
    for line in spec.lines:
        l, m, y = line.from_bus, line.to_bus, line.admittance
        Y[l, l] += y
        Y[m, m] += y
        Y[l, m] -= y
        Y[m, l] -= y
    logger.debug("built %dx%d admittance matrix from %d lines", n, n, len(spec.lines))
    return AdmittanceMatrix(_frozen(Y.real), _frozen(Y.imag))


def line_power(z: GridAlgebraicState, l: int, m: int, Y: AdmittanceMatrix) -> tuple[float, float]:
    """Power term (p_lm, q_lm) of bus l associated with matrix entry (l, m)."""
    t = z.theta[l] - z.theta[m]
    vv = z.v[l] * z.v[m]
    G, B = Y.G[l, m], Y.B[l, m]
    return vv * (G * np.cos(t) + B * np.sin(t)), vv * (G * np.sin(t) - B * np.cos(t))


def line_power_matrix(z: GridAlgebraicState, Y: AdmittanceMatrix) -> tuple[np.ndarray, np.ndarray]:
    """All (p_lm, q_lm) at once as N x N matrices."""
    t = z.theta[:, None] - z.theta[None, :]
    vv = np.outer(z.v, z.v)
    return vv * (Y.G * np.cos(t) + Y.B * np.sin(t)), vv * (Y.G * np.sin(t) - Y.B * np.cos(t))


def injections(z: GridAlgebraicState, Y: AdmittanceMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Net injections implied by v and theta."""
    P, Q = line_power_matrix(z, Y)
    return P.sum(axis=1), Q.sum(axis=1)


def branch_flow(z: GridAlgebraicState, line: Line) -> tuple[tuple[float, float], tuple[float, float]]:
    """Physical series flows ((p_lm, q_lm), (p_ml, q_ml)) entering the line at each end."""
    V = z.voltage()
    l, m, y = line.from_bus, line.to_bus, line.admittance
    s_lm = V[l] * np.conj(y * (V[l] - V[m]))
    s_ml = V[m] * np.conj(y * (V[m] - V[l]))
    return (s_lm.real, s_lm.imag), (s_ml.real, s_ml.imag)


def relabel(spec: MicrogridSpec, perm) -> MicrogridSpec:
    """Return the spec with old bus b renamed to perm[b]."""
    perm = np.asarray(perm, dtype=int)
    n = spec.n_buses
    if sorted(perm.tolist()) != list(range(n)):
        raise GridSpecError(f"not a permutation of 0..{n - 1}: {perm.tolist()}")
    inv = np.argsort(perm)
    return MicrogridSpec(
        n_buses=n,
        generators=tuple(int(perm[b]) for b in spec.generators),
        batteries=tuple(int(perm[b]) for b in spec.batteries),
        reference_bus=int(perm[spec.reference_bus]),
        lines=tuple(Line(int(perm[ln.from_bus]), int(perm[ln.to_bus]), ln.g, ln.b) for ln in spec.lines),
        ground_admittance=tuple(spec.ground_admittance[i] for i in inv),
        v_bounds=spec.v_bounds[inv],
        theta_bounds=spec.theta_bounds[inv],
    )
