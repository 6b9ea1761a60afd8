"""Network topology, case-file ingestion and the derived graph matrices.

A case file is plain text split into ``[section]`` blocks. Blank lines and
anything after ``#`` are ignored::

    [system]
    base_mva 100

    [bus]
    1
    2

    [branch]
    # from to susceptance_pu
    1 2 16.90

    [gen]
    # one bus id per controllable unit, in input order
    2

    [area]
    # bus area
    1 1
    2 2

    [tie]
    # ordered area pair; members are every branch joining the two areas
    1 2

Only ``[bus]`` and ``[branch]`` are mandatory. Without ``[area]`` every bus
sits in area 1 and there are no tie rows. Branch orientation is the
from -> to order written in the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CaseFormatError",
    "NetworkValidationError",
    "Branch",
    "NetworkSpec",
    "NetworkMatrices",
    "parse_case",
    "load_case",
    "build_matrices",
    "reactance_to_susceptance",
]

_SECTIONS = ("system", "bus", "branch", "gen", "area", "tie")


class CaseFormatError(ValueError):
    """Raised when a case file cannot be parsed."""


class NetworkValidationError(ValueError):
    """Raised when a parsed network violates a structural requirement."""


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    susceptance: float

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class NetworkSpec:
    """Validated network description.

    ``tie_pairs`` maps an ordered area pair ``(a, b)`` to the indices of the
    branches that join areas ``a`` and ``b`` (in either stored direction).
    """

    buses: tuple[int, ...]
    branches: tuple[Branch, ...]
    generators: tuple[int, ...]
    areas: dict[int, int]
    tie_pairs: dict[tuple[int, int], tuple[int, ...]] = field(default_factory=dict)
    base_mva: float = 100.0

    def __post_init__(self):
        _validate(self)

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def m(self) -> int:
        return len(self.branches)

    @property
    def n_g(self) -> int:
        return len(self.generators)

    @property
    def n_t(self) -> int:
        return len(self.tie_pairs)

    @property
    def n_areas(self) -> int:
        return len(set(self.areas.values()))

    def bus_index(self, bus: int) -> int:
        return self.buses.index(bus)

    def branch_index(self, from_bus: int, to_bus: int) -> int:
        """Index of the branch joining two buses, in either orientation."""
        for k, br in enumerate(self.branches):
            if {br.from_bus, br.to_bus} == {from_bus, to_bus}:
                return k
        raise KeyError(f"no branch between buses {from_bus} and {to_bus}")


@dataclass(frozen=True, eq=False)
class NetworkMatrices:
    """Dense matrices derived from a :class:`NetworkSpec`.

    ``C`` is the signed n x m incidence, ``B`` the diagonal susceptance,
    ``L = C B C^T``, ``G`` the n x n_g generator selector and ``T`` the
    n_t x m signed tie aggregation. ``K = B C^T`` maps angles to branch flows.
    """

    spec: NetworkSpec
    C: np.ndarray
    B: np.ndarray
    L: np.ndarray
    G: np.ndarray
    T: np.ndarray

    @property
    def K(self) -> np.ndarray:
        return self.B @ self.C.T

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[1]

    @property
    def n_g(self) -> int:
        return self.G.shape[1]

    @property
    def n_t(self) -> int:
        return self.T.shape[0]

    @property
    def gen_buses(self) -> np.ndarray:
        """Row index of the bus hosting each generator."""
        return np.argmax(self.G, axis=0)

    def algebraic_connectivity(self) -> float:
        return float(np.linalg.eigvalsh(self.L)[1]) if self.n > 1 else 0.0


def reactance_to_susceptance(x: float, tap: float = 1.0) -> float:
    """DC susceptance of a branch with series reactance ``x`` [pu].

    Off-nominal transformers follow the usual DC convention ``1 / (x * tap)``.
    """
    if x <= 0 or tap <= 0:
        raise ValueError("reactance and tap ratio must be positive")
    return 1.0 / (x * tap)


def _validate(spec: NetworkSpec) -> None:
    buses = set(spec.buses)
    if len(buses) != len(spec.buses):
        raise NetworkValidationError("duplicate bus ids")
    if not spec.buses:
        raise NetworkValidationError("network has no buses")
    for br in spec.branches:
        for b in (br.from_bus, br.to_bus):
            if b not in buses:
                raise NetworkValidationError(f"branch {br.name} references undeclared bus {b}")
        if br.from_bus == br.to_bus:
            raise NetworkValidationError(f"branch {br.name} is a self-loop")
        if not br.susceptance > 0:
            raise NetworkValidationError(f"branch {br.name} has nonpositive susceptance")
    for g in spec.generators:
        if g not in buses:
            raise NetworkValidationError(f"generator at undeclared bus {g}")
    if set(spec.areas) != buses:
        raise NetworkValidationError("every bus needs exactly one area")
    if spec.base_mva <= 0:
        raise NetworkValidationError("base_mva must be positive")

    # connectivity by union-find
    parent = {b: b for b in buses}

    def find(b):
        while parent[b] != b:
            parent[b] = parent[parent[b]]
            b = parent[b]
        return b

    for br in spec.branches:
        parent[find(br.from_bus)] = find(br.to_bus)
    if len({find(b) for b in buses}) != 1:
        raise NetworkValidationError("network graph is disconnected")

    for (a, b), members in spec.tie_pairs.items():
        if a == b:
            raise NetworkValidationError(f"tie pair ({a}, {b}) joins an area to itself")
        if not members:
            raise NetworkValidationError(f"tie pair ({a}, {b}) has no member branch")
        for k in members:
            br = spec.branches[k]
            if {spec.areas[br.from_bus], spec.areas[br.to_bus]} != {a, b}:
                raise NetworkValidationError(
                    f"branch {br.name} does not cross areas {a} and {b}")


def parse_case(text: str) -> NetworkSpec:
    """Parse case-file text into a validated :class:`NetworkSpec`."""
    rows: dict[str, list[tuple[int, list[str]]]] = {s: [] for s in _SECTIONS}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise CaseFormatError(f"line {lineno}: malformed section header {raw!r}")
            current = line[1:-1].strip().lower()
            if current not in rows:
                raise CaseFormatError(f"line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise CaseFormatError(f"line {lineno}: data outside of a section")
        rows[current].append((lineno, line.split()))

    def ints(lineno, toks, count, what):
        if len(toks) != count:
            raise CaseFormatError(f"line {lineno}: expected {count} fields for {what}")
        try:
            return [int(t) for t in toks]
        except ValueError:
            raise CaseFormatError(f"line {lineno}: non-integer id in {what}") from None

    base_mva = 100.0
    for lineno, toks in rows["system"]:
        if len(toks) != 2 or toks[0] != "base_mva":
            raise CaseFormatError(f"line {lineno}: expected 'base_mva <value>'")
        try:
            base_mva = float(toks[1])
        except ValueError:
            raise CaseFormatError(f"line {lineno}: bad base_mva") from None

    buses = tuple(ints(ln, t, 1, "bus")[0] for ln, t in rows["bus"])
    if not buses:
        raise CaseFormatError("case has no [bus] entries")

    branches = []
    for lineno, toks in rows["branch"]:
        if len(toks) != 3:
            raise CaseFormatError(f"line {lineno}: branch needs 'from to susceptance'")
        f, t = ints(lineno, toks[:2], 2, "branch")
        try:
            b = float(toks[2])
        except ValueError:
            raise CaseFormatError(f"line {lineno}: bad susceptance {toks[2]!r}") from None
        branches.append(Branch(f, t, b))

    generators = tuple(ints(ln, t, 1, "gen")[0] for ln, t in rows["gen"])

    if rows["area"]:
        areas = {}
        for lineno, toks in rows["area"]:
            bus, area = ints(lineno, toks, 2, "area")
            if bus in areas:
                raise CaseFormatError(f"line {lineno}: bus {bus} assigned twice")
            areas[bus] = area
    else:
        areas = {b: 1 for b in buses}

    tie_pairs = {}
    for lineno, toks in rows["tie"]:
        a, b = ints(lineno, toks, 2, "tie")
        if (a, b) in tie_pairs:
            raise CaseFormatError(f"line {lineno}: duplicate tie pair ({a}, {b})")
        tie_pairs[(a, b)] = tuple(
            k for k, br in enumerate(branches)
            if {areas.get(br.from_bus), areas.get(br.to_bus)} == {a, b})

    return NetworkSpec(buses=buses, branches=tuple(branches), generators=generators,
                       areas=areas, tie_pairs=tie_pairs, base_mva=base_mva)


def load_case(path: str | os.PathLike) -> NetworkSpec:
    """Read and validate a case file.

    The string ``"ieee14"`` (or ``"builtin:ieee14"``) selects the embedded
    14-bus benchmark instead of a path on disk.
    """
    if str(path) in ("ieee14", "builtin:ieee14"):
        from freqnet.builtin import IEEE14_CASE
        return parse_case(IEEE14_CASE)
    with open(path, encoding="utf-8") as fh:
        return parse_case(fh.read())


def build_matrices(spec: NetworkSpec) -> NetworkMatrices:
    n, m = spec.n, spec.m
    pos = {b: i for i, b in enumerate(spec.buses)}

    C = np.zeros((n, m))
    for k, br in enumerate(spec.branches):
        C[pos[br.from_bus], k] = 1.0
        C[pos[br.to_bus], k] = -1.0
    B = np.diag([br.susceptance for br in spec.branches])
    L = C @ B @ C.T

    G = np.zeros((n, spec.n_g))
    for j, bus in enumerate(spec.generators):
        G[pos[bus], j] = 1.0

    # +1 when the stored orientation points a -> b, -1 when it points b -> a
    T = np.zeros((spec.n_t, m))
    for row, ((a, b), members) in enumerate(spec.tie_pairs.items()):
        for k in members:
            br = spec.branches[k]
            T[row, k] = 1.0 if spec.areas[br.from_bus] == a else -1.0

    return NetworkMatrices(spec=spec, C=C, B=B, L=L, G=G, T=T)
