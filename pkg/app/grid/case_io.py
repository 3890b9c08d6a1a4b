"""MATPOWER case ingestion.

Reads the ``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen``, ``mpc.branch`` and optional ``mpc.gencost``
tables of a MATPOWER ``.m`` file into an immutable per-unit :class:`Network`.
Column meanings follow the MATPOWER manual.
"""

import logging
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from app.grid.errors import CaseParseError, CaseValidationError, UnsupportedCostError

logger = logging.getLogger(__name__)

DEFAULT_ANGLE_LIMIT = math.pi / 3

_SECTION_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
_SCALAR = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^\[\{;]+);?\s*$")
_FUNCTION = re.compile(r"^\s*function\s+mpc\s*=\s*(\w+)")

# minimum column counts per table
_MIN_COLUMNS = {"bus": 13, "gen": 10, "branch": 11}


class BusKind(str, Enum):
    PQ = "PQ"
    PV = "PV"
    SLACK = "Vtheta"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_load: float
    q_load: float
    v_min: float
    v_max: float
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p: float
    q: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_setpoint: float
    # per-unit polynomial (quadratic, linear, constant) mapping p.u. output to cost/h
    cost: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def cost_of(self, p: float) -> float:
        c2, c1, c0 = self.cost
        return c2 * p * p + c1 * p + c0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_c: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    s_max: Optional[float] = None
    angle_min: float = -DEFAULT_ANGLE_LIMIT
    angle_max: float = DEFAULT_ANGLE_LIMIT

    @property
    def y(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class ControlLayout:
    """Index layout of the control vector u = (p, v, q).

    ``p_gens`` are generators whose active power is set by the operator (all not at the slack bus),
    ``v_buses`` are bus positions whose voltage is a control (PV and slack), ``q_gens`` are
    dispatchable injections at PQ buses whose reactive output is also a control.
    """

    p_gens: np.ndarray
    v_buses: np.ndarray
    q_gens: np.ndarray

    @property
    def n_p(self) -> int:
        return len(self.p_gens)

    @property
    def n_v(self) -> int:
        return len(self.v_buses)

    @property
    def n_q(self) -> int:
        return len(self.q_gens)

    @property
    def size(self) -> int:
        return self.n_p + self.n_v + self.n_q

    @property
    def sl_p(self) -> slice:
        return slice(0, self.n_p)

    @property
    def sl_v(self) -> slice:
        return slice(self.n_p, self.n_p + self.n_v)

    @property
    def sl_q(self) -> slice:
        return slice(self.n_p + self.n_v, self.size)


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    name: str = "case"
    notes: tuple[str, ...] = field(default=(), compare=False)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_line(self) -> int:
        return len(self.branches)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {bus.id: pos for pos, bus in enumerate(self.buses)}

    @cached_property
    def slack(self) -> int:
        return next(pos for pos, bus in enumerate(self.buses) if bus.kind is BusKind.SLACK)

    @cached_property
    def pq(self) -> np.ndarray:
        return np.array([pos for pos, bus in enumerate(self.buses) if bus.kind is BusKind.PQ], dtype=int)

    @cached_property
    def pv(self) -> np.ndarray:
        return np.array([pos for pos, bus in enumerate(self.buses) if bus.kind is BusKind.PV], dtype=int)

    @cached_property
    def non_slack(self) -> np.ndarray:
        return np.array([pos for pos in range(self.n_bus) if pos != self.slack], dtype=int)

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([self.bus_index[gen.bus] for gen in self.generators], dtype=int)

    @cached_property
    def slack_gens(self) -> np.ndarray:
        return np.flatnonzero(self.gen_bus == self.slack)

    @cached_property
    def controls(self) -> ControlLayout:
        kinds = [self.buses[pos].kind for pos in self.gen_bus]
        p_gens = np.flatnonzero(self.gen_bus != self.slack)
        q_gens = np.array([g for g, kind in enumerate(kinds) if kind is BusKind.PQ], dtype=int)
        v_buses = np.array(sorted({int(pos) for pos, kind in zip(self.gen_bus, kinds) if kind is not BusKind.PQ}), dtype=int)
        return ControlLayout(p_gens=p_gens, v_buses=v_buses, q_gens=q_gens)

    @cached_property
    def p_load(self) -> np.ndarray:
        return np.array([bus.p_load for bus in self.buses])

    @cached_property
    def q_load(self) -> np.ndarray:
        return np.array([bus.q_load for bus in self.buses])

    @cached_property
    def v_min(self) -> np.ndarray:
        return np.array([bus.v_min for bus in self.buses])

    @cached_property
    def v_max(self) -> np.ndarray:
        return np.array([bus.v_max for bus in self.buses])

    def control_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        layout = self.controls
        gens = self.generators
        lo = np.concatenate(
            [
                [gens[g].p_min for g in layout.p_gens],
                self.v_min[layout.v_buses],
                [gens[g].q_min for g in layout.q_gens],
            ]
        )
        hi = np.concatenate(
            [
                [gens[g].p_max for g in layout.p_gens],
                self.v_max[layout.v_buses],
                [gens[g].q_max for g in layout.q_gens],
            ]
        )
        return lo, hi

    def control_names(self) -> list[str]:
        layout = self.controls
        first_gen = {int(self.gen_bus[g]): g for g in reversed(range(self.n_gen))}
        return (
            [f"pg:{g + 1}" for g in layout.p_gens]
            + [f"vg:{first_gen[int(pos)] + 1}" for pos in layout.v_buses]
            + [f"qg:{g + 1}" for g in layout.q_gens]
        )

    def control_index(self, name: str) -> int:
        """Position of a named control (``pg:<gen>``, ``vg:<gen>``, ``qg:<gen>``, 1-based generator numbers)."""
        kind, _, number = name.partition(":")
        try:
            gen = int(number) - 1
        except ValueError:
            raise CaseValidationError(f"Bad control name {name!r}") from None
        if not 0 <= gen < self.n_gen:
            raise CaseValidationError(f"Generator {gen + 1} does not exist")
        layout = self.controls
        if kind == "pg":
            hits = np.flatnonzero(layout.p_gens == gen)
            if not hits.size:
                raise CaseValidationError(f"Active power of slack-bus generator {gen + 1} is not a control")
            return int(hits[0])
        if kind == "vg":
            hits = np.flatnonzero(layout.v_buses == self.gen_bus[gen])
            if not hits.size:
                raise CaseValidationError(f"Generator {gen + 1} sits on a PQ bus and has no voltage control")
            return layout.n_p + int(hits[0])
        if kind == "qg":
            hits = np.flatnonzero(layout.q_gens == gen)
            if not hits.size:
                raise CaseValidationError(f"Reactive power of generator {gen + 1} is not a control")
            return layout.n_p + layout.n_v + int(hits[0])
        raise CaseValidationError(f"Bad control name {name!r}")

    def u_from_dispatch(self, pg: np.ndarray, vg: np.ndarray, qg: Optional[np.ndarray] = None) -> np.ndarray:
        """Control vector from per-generator arrays in per-unit."""
        layout = self.controls
        pg = np.asarray(pg, dtype=float)
        vg = np.asarray(vg, dtype=float)
        qg = np.zeros(self.n_gen) if qg is None else np.asarray(qg, dtype=float)
        if pg.shape != (self.n_gen,) or vg.shape != (self.n_gen,) or qg.shape != (self.n_gen,):
            raise CaseValidationError(f"Dispatch must list {self.n_gen} generators")
        first_gen = {int(self.gen_bus[g]): g for g in reversed(range(self.n_gen))}
        v = np.array([vg[first_gen[int(pos)]] for pos in layout.v_buses])
        return np.concatenate([pg[layout.p_gens], v, qg[layout.q_gens]])

    def file_dispatch(self) -> np.ndarray:
        gens = self.generators
        return self.u_from_dispatch(
            np.array([g.p for g in gens]),
            np.array([g.v_setpoint for g in gens]),
            np.array([g.q for g in gens]),
        )


def _strip_comment(line: str) -> str:
    return line.split("%", 1)[0]


def _parse_row(chunk: str, line_no: int) -> Optional[list[float]]:
    tokens = chunk.replace(",", " ").split()
    if not tokens:
        return None
    try:
        return [float(tok) for tok in tokens]
    except ValueError:
        raise CaseParseError(f"non-numeric entry in {chunk.strip()!r}", line=line_no) from None


def _read_tables(text: str) -> tuple[str, dict[str, float], dict[str, list[tuple[int, list[float]]]]]:
    name = "case"
    scalars: dict[str, float] = {}
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    current: Optional[str] = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is None:
            match = _FUNCTION.match(line)
            if match:
                name = match.group(1)
                continue
            match = _SECTION_START.match(line)
            if match:
                current = match.group(1)
                tables[current] = []
                line = match.group(2)
            else:
                match = _SCALAR.match(line)
                if match:
                    value = match.group(2).strip().strip("'\"")
                    try:
                        scalars[match.group(1)] = float(value)
                    except ValueError:
                        pass
                continue

        closing = "]" in line
        body = line.split("]", 1)[0]
        for chunk in body.split(";"):
            row = _parse_row(chunk, line_no)
            if row is not None:
                tables[current].append((line_no, row))
        if closing:
            current = None

    if current is not None:
        raise CaseParseError(f"table mpc.{current} is never closed", line=len(text.splitlines()))
    return name, scalars, tables


def _check_columns(table: str, rows: list[tuple[int, list[float]]]) -> None:
    need = _MIN_COLUMNS[table]
    for line_no, row in rows:
        if len(row) < need:
            raise CaseParseError(f"mpc.{table} row has {len(row)} columns, expected at least {need}", line=line_no)


def _angle_limits(ang_min_deg: float, ang_max_deg: float) -> tuple[float, float]:
    lo, hi = math.radians(ang_min_deg), math.radians(ang_max_deg)
    if (lo == 0.0 and hi == 0.0) or lo <= -math.pi * 2 + 1e-9 or hi >= math.pi * 2 - 1e-9:
        return -DEFAULT_ANGLE_LIMIT, DEFAULT_ANGLE_LIMIT
    return max(lo, -math.pi), min(hi, math.pi)


def _cost_coefficients(row: list[float], line_no: int, base_mva: float) -> tuple[float, float, float]:
    model = int(row[0])
    if model == 1:
        raise UnsupportedCostError(f"line {line_no}: piecewise-linear cost model is not supported")
    if model != 2:
        raise CaseParseError(f"unknown cost model {model}", line=line_no)
    n = int(row[3])
    coeffs = row[4 : 4 + n]
    if len(coeffs) < n:
        raise CaseParseError(f"gencost row declares {n} coefficients, found {len(coeffs)}", line=line_no)
    # highest order first in MATPOWER
    coeffs = list(reversed(coeffs))
    if any(abs(c) > 0.0 for c in coeffs[3:]):
        raise UnsupportedCostError(f"line {line_no}: cost polynomial of degree {n - 1} is not supported")
    c0, c1, c2 = (coeffs + [0.0, 0.0, 0.0])[:3]
    if c1 < 0.0 or c2 < 0.0:
        raise UnsupportedCostError(f"line {line_no}: cost polynomial must have nonnegative coefficients")
    return c2 * base_mva**2, c1 * base_mva, c0


def parse_case(text: str) -> Network:
    """Parse MATPOWER case text into a validated per-unit network."""
    name, scalars, tables = _read_tables(text)
    if "baseMVA" not in scalars:
        raise CaseParseError("mpc.baseMVA is missing")
    base = scalars["baseMVA"]
    if base <= 0.0:
        raise CaseValidationError("baseMVA must be positive")
    for table in ("bus", "gen", "branch"):
        if table not in tables:
            raise CaseParseError(f"mpc.{table} table is missing")
        _check_columns(table, tables[table])

    notes: list[str] = []

    bus_rows = tables["bus"]
    gen_rows = tables["gen"]
    branch_rows = tables["branch"]
    cost_rows = tables.get("gencost", [])

    dropped_buses = {int(row[0]) for _, row in bus_rows if int(row[1]) == 4}
    live_gens: list[tuple[int, list[float], Optional[tuple[int, list[float]]]]] = []
    for g, (line_no, row) in enumerate(gen_rows):
        cost = cost_rows[g] if g < len(cost_rows) else None
        if row[7] <= 0 or int(row[0]) in dropped_buses:
            continue
        live_gens.append((line_no, row, cost))
    if cost_rows and len(cost_rows) < len(gen_rows):
        raise CaseParseError("mpc.gencost has fewer rows than mpc.gen", line=cost_rows[-1][0])

    hosted = {int(row[0]) for _, row, _ in live_gens}
    buses: list[Bus] = []
    seen: set[int] = set()
    for line_no, row in bus_rows:
        bus_id, code = int(row[0]), int(row[1])
        if bus_id in seen:
            raise CaseValidationError(f"line {line_no}: duplicate bus id {bus_id}")
        seen.add(bus_id)
        if code == 4:
            notes.append(f"bus {bus_id} is isolated and was dropped")
            continue
        if code == 3:
            kind = BusKind.SLACK
        elif code == 2:
            kind = BusKind.PV
            if bus_id not in hosted:
                kind = BusKind.PQ
                notes.append(f"PV bus {bus_id} has no generator and was made PQ")
                logger.warning("PV bus %s has no in-service generator, treating it as PQ", bus_id)
        elif code == 1:
            kind = BusKind.PQ
        else:
            raise CaseParseError(f"unknown bus type {code}", line=line_no)
        v_max, v_min = row[11], row[12]
        if v_min > v_max:
            raise CaseValidationError(f"line {line_no}: bus {bus_id} has v_min > v_max")
        buses.append(
            Bus(
                id=bus_id,
                kind=kind,
                p_load=row[2] / base,
                q_load=row[3] / base,
                v_min=v_min,
                v_max=v_max,
                shunt_g=row[4] / base,
                shunt_b=row[5] / base,
            )
        )

    kinds = {bus.id: bus.kind for bus in buses}
    q_fold: dict[int, float] = {}
    generators: list[Generator] = []
    for line_no, row, cost_row in live_gens:
        bus_id = int(row[0])
        if bus_id not in kinds:
            raise CaseValidationError(f"line {line_no}: generator at unknown bus {bus_id}")
        p_max, p_min, q_max, q_min = row[8] / base, row[9] / base, row[3] / base, row[4] / base
        if p_min > p_max:
            raise CaseValidationError(f"line {line_no}: generator at bus {bus_id} has p_min > p_max")
        if q_min > q_max:
            raise CaseValidationError(f"line {line_no}: generator at bus {bus_id} has q_min > q_max")
        if cost_row is None:
            cost = (0.0, base, 0.0)
        else:
            cost = _cost_coefficients(cost_row[1], cost_row[0], base)
        q = row[2] / base
        if q_min == q_max and kinds[bus_id] is not BusKind.PQ:
            q_fold[bus_id] = q_fold.get(bus_id, 0.0) + q_min
            q = q_min = q_max = 0.0
        generators.append(
            Generator(
                bus=bus_id,
                p=row[1] / base,
                q=q,
                p_min=p_min,
                p_max=p_max,
                q_min=q_min,
                q_max=q_max,
                v_setpoint=row[5],
                cost=cost,
            )
        )
    if q_fold:
        buses = [replace(bus, q_load=bus.q_load - q_fold[bus.id]) if bus.id in q_fold else bus for bus in buses]

    branches: list[Branch] = []
    for line_no, row in branch_rows:
        f, t = int(row[0]), int(row[1])
        if row[10] <= 0 or f in dropped_buses or t in dropped_buses:
            continue
        if f not in kinds or t not in kinds:
            raise CaseValidationError(f"line {line_no}: branch {f}-{t} references an unknown bus")
        if row[2] == 0.0 and row[3] == 0.0:
            raise CaseValidationError(f"line {line_no}: branch {f}-{t} has zero impedance")
        tap = row[8] if row[8] != 0.0 else 1.0
        if tap < 0.0:
            raise CaseValidationError(f"line {line_no}: branch {f}-{t} has a negative tap ratio")
        angle_min, angle_max = _angle_limits(row[11], row[12]) if len(row) >= 13 else _angle_limits(0.0, 0.0)
        if angle_min > angle_max:
            raise CaseValidationError(f"line {line_no}: branch {f}-{t} has angmin > angmax")
        branches.append(
            Branch(
                from_bus=f,
                to_bus=t,
                r=row[2],
                x=row[3],
                b_c=row[4],
                tap=tap,
                shift=math.radians(row[9]),
                s_max=row[5] / base if row[5] > 0.0 else None,
                angle_min=angle_min,
                angle_max=angle_max,
            )
        )

    net = Network(
        buses=tuple(buses),
        generators=tuple(generators),
        branches=tuple(branches),
        base_mva=base,
        name=name,
        notes=tuple(notes),
    )
    validate_network(net)
    logger.info("parsed case %s: %d buses, %d generators, %d branches", name, net.n_bus, net.n_gen, net.n_line)
    return net


def validate_network(net: Network) -> None:
    slacks = [bus.id for bus in net.buses if bus.kind is BusKind.SLACK]
    if len(slacks) != 1:
        raise CaseValidationError(f"network needs exactly one slack bus, found {len(slacks)}")
    if not net.branches:
        raise CaseValidationError("network has no in-service branches and is disconnected")
    for bus in net.buses:
        if bus.v_min > bus.v_max:
            raise CaseValidationError(f"bus {bus.id} has v_min > v_max")
        if bus.v_min <= 0.0:
            raise CaseValidationError(f"bus {bus.id} needs a positive v_min")
    rows = [net.bus_index[br.from_bus] for br in net.branches]
    cols = [net.bus_index[br.to_bus] for br in net.branches]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(net.n_bus, net.n_bus))
    n_parts, _ = connected_components(graph, directed=False)
    if n_parts != 1:
        raise CaseValidationError(f"network is disconnected into {n_parts} islands")
    for br in net.branches:
        if br.tap <= 0.0:
            raise CaseValidationError(f"branch {br.from_bus}-{br.to_bus} needs a positive tap ratio")
    slack_id = slacks[0]
    if not any(gen.bus == slack_id for gen in net.generators):
        raise CaseValidationError(f"slack bus {slack_id} hosts no generator")
    setpoints: dict[int, float] = {}
    for gen in net.generators:
        if net.buses[net.bus_index[gen.bus]].kind is BusKind.PQ:
            continue
        known = setpoints.setdefault(gen.bus, gen.v_setpoint)
        if abs(known - gen.v_setpoint) > 1e-9:
            raise CaseValidationError(f"generators at bus {gen.bus} disagree on the voltage setpoint")


def load_case(path: Union[str, Path]) -> Network:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseParseError(f"cannot read {path}: {exc}") from exc
    net = parse_case(text)
    if net.name == "case":
        net = replace(net, name=path.stem)
    return net


def _fmt(value: float) -> str:
    return format(value, ".17g")


def write_case(net: Network) -> str:
    """Serialize a network back to MATPOWER text (in MW/MVAr/degrees on the stored base)."""
    base = net.base_mva
    codes = {BusKind.PQ: 1, BusKind.PV: 2, BusKind.SLACK: 3}
    out = [f"function mpc = {net.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(base)};", "mpc.bus = ["]
    for bus in net.buses:
        cols = [bus.id, codes[bus.kind], bus.p_load * base, bus.q_load * base, bus.shunt_g * base, bus.shunt_b * base, 1, 1.0, 0.0, 0.0, 1, bus.v_max, bus.v_min]
        out.append("\t" + "\t".join(_fmt(float(c)) for c in cols) + ";")
    out += ["];", "mpc.gen = ["]
    for gen in net.generators:
        cols = [gen.bus, gen.p * base, gen.q * base, gen.q_max * base, gen.q_min * base, gen.v_setpoint, base, 1, gen.p_max * base, gen.p_min * base]
        out.append("\t" + "\t".join(_fmt(float(c)) for c in cols) + ";")
    out += ["];", "mpc.branch = ["]
    for br in net.branches:
        cols = [
            br.from_bus,
            br.to_bus,
            br.r,
            br.x,
            br.b_c,
            (br.s_max or 0.0) * base,
            0.0,
            0.0,
            br.tap,
            math.degrees(br.shift),
            1,
            math.degrees(br.angle_min),
            math.degrees(br.angle_max),
        ]
        out.append("\t" + "\t".join(_fmt(float(c)) for c in cols) + ";")
    out += ["];", "mpc.gencost = ["]
    for gen in net.generators:
        c2, c1, c0 = gen.cost
        cols = [2, 0.0, 0.0, 3, c2 / base**2, c1 / base, c0]
        out.append("\t" + "\t".join(_fmt(float(c)) for c in cols) + ";")
    out.append("];")
    return "\n".join(out) + "\n"
