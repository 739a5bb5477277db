from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np

from .grid import GridAlgebraicState, PowerSetpoint

if TYPE_CHECKING:
    from .acpf import DeviationResult
    from .conic import Solution
    from .dispatch import DeviceParams
    from .nmpc import NmpcSubproblem, PeriodicReference
    from .simulate import ClosedLoopRecord


def _device_columns(params: DeviceParams) -> tuple[list[str], list[str]]:
    gens = [f"g{g + 1}" for g in range(len(params.generators))]
    bats = [f"b{b + 1}" for b in range(len(params.batteries))]
    return gens, bats


def closed_loop_fields(params: DeviceParams) -> list[str]:
    gens, bats = _device_columns(params)
    fields = ["step"]
    fields += [f"{key}_{g}" for key in ("p", "q", "on", "counter", "switch") for g in gens]
    fields += [f"{key}_{b}" for key in ("p", "q", "soc") for b in bats]
    fields += ["stage_cost", "cumulative_cost", "status", "nodes", "v_check", "distance",
               "terminal_residual", "extension_ok"]
    return fields


def write_closed_loop_csv(record: ClosedLoopRecord, params: DeviceParams, out_dir: Path,
                          filename: str = "closed_loop.csv") -> Path:
    """One row per step with the realized state x(k+1) and the input applied at k."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / filename
    gens, bats = _device_columns(params)

    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=closed_loop_fields(params))
        w.writeheader()
        for s in record.steps:
            row = {"step": s.k}
            for g, name in enumerate(gens):
                row[f"p_{name}"] = s.state.p_g[g]
                row[f"q_{name}"] = s.state.q_g[g]
                row[f"on_{name}"] = int(s.state.on[g])
                row[f"counter_{name}"] = int(s.state.counter[g])
                row[f"switch_{name}"] = int(s.applied.switch[g])
            for b, name in enumerate(bats):
                row[f"p_{name}"] = s.state.p_b[b]
                row[f"q_{name}"] = s.state.q_b[b]
                row[f"soc_{name}"] = s.state.soc[b]
            row.update(
                stage_cost=s.stage_cost,
                cumulative_cost=s.cumulative_cost,
                status=s.status,
                nodes=s.nodes,
                v_check=s.v_check,
                distance=s.distance,
                terminal_residual=s.terminal_residual,
                extension_ok="" if s.extension is None else int(s.extension.ok),
            )
            w.writerow(row)
    return path


def read_closed_loop_csv(path: Path) -> list[dict]:
    """Rows of a closed-loop CSV with numeric columns as numbers."""
    out = []
    with Path(path).open("r", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            parsed = {}
            for key, value in row.items():
                if key == "status" or value == "":
                    parsed[key] = value
                elif key in ("step", "nodes", "extension_ok") or key.split("_")[0] in ("on", "counter", "switch"):
                    parsed[key] = int(value)
                else:
                    parsed[key] = float(value)
            out.append(parsed)
    return out


def write_plot_data(record: ClosedLoopRecord, params: DeviceParams, dt: float, out_dir: Path,
                    filename: str = "plot_data.csv") -> Path:
    """Columns of the usual dispatch panels: demand and PV, device powers, charge, modes, costs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / filename
    gens, bats = _device_columns(params)
    fields = (["hour", "load", "pv"] + [f"p_{g}" for g in gens] + [f"on_{g}" for g in gens]
              + [f"p_{b}" for b in bats] + [f"soc_{b}" for b in bats]
              + ["stage_cost", "cumulative_cost", "v_check"])

    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for s in record.steps:
            p_d = np.asarray(s.demand.p_d)
            row = {
                "hour": (s.k + 1) * dt,
                "load": float(p_d[p_d > 0].sum()),
                "pv": float(-p_d[p_d < 0].sum()),
                "stage_cost": s.stage_cost,
                "cumulative_cost": s.cumulative_cost,
                "v_check": s.v_check,
            }
            for g, name in enumerate(gens):
                row[f"p_{name}"] = s.state.p_g[g]
                row[f"on_{name}"] = int(s.state.on[g])
            for b, name in enumerate(bats):
                row[f"p_{name}"] = s.state.p_b[b]
                row[f"soc_{name}"] = s.state.soc[b]
            w.writerow(row)
    return path


def read_plot_data(path: Path) -> list[dict]:
    """Rows of a plot-data CSV; mode columns as int, everything else as float."""
    with Path(path).open("r", newline="", encoding="utf-8") as f:
        return [{k: int(v) if k.startswith("on_") else float(v) for k, v in row.items()}
                for row in csv.DictReader(f)]


def _fmt(value: float) -> str:
    return "n/a" if math.isnan(value) else f"{value:.3e}"


def run_summary(record: ClosedLoopRecord, params: DeviceParams) -> str:
    lines = [
        "CLOSED-LOOP SUMMARY",
        "=" * 40,
        f"steps:              {len(record)}",
        f"total cost:         {record.cumulative_costs[-1] if len(record) else 0.0:.4f}",
        f"max distance:       {record.max_distance():.3e}",
        f"max v_check:        {_fmt(record.max_v_check())}",
        f"max terminal resid: {max((s.terminal_residual for s in record.steps), default=0.0):.3e}",
    ]
    checked = [s for s in record.steps if s.extension is not None]
    if checked:
        ok = sum(1 for s in checked if s.extension.ok)
        lines.append(f"extension feasible: {ok}/{len(checked)}")
    sw = record.switches()
    for g, prm in enumerate(params.generators):
        on_steps = int(sum(s.state.on[g] for s in record.steps))
        n_sw = int(sw[:, g].sum()) if sw.size else 0
        lines.append(f"{prm.name}: on {on_steps}/{len(record)} steps, {n_sw} switches")
    return "\n".join(lines) + "\n"


def write_run_summary(record: ClosedLoopRecord, params: DeviceParams, out_dir: Path,
                      filename: str = "summary.txt") -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / filename
    path.write_text(run_summary(record, params), encoding="utf-8")
    return path


def _parse_number(text: str) -> float:
    return math.nan if text == "n/a" else float(text)


def read_run_summary(path: Path) -> dict:
    """Totals of a summary file; per-generator lines under ``generators``."""
    out: dict = {"generators": {}}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[2:]:
        key, _, value = line.partition(":")
        value = value.strip()
        if key == "steps":
            out["steps"] = int(value)
        elif key in ("total cost", "max distance", "max v_check", "max terminal resid"):
            out[key.replace(" ", "_")] = _parse_number(value)
        elif key == "extension feasible":
            ok, total = value.split("/")
            out["extension_feasible"] = (int(ok), int(total))
        elif value.startswith("on "):
            on_part, sw_part = value.split(", ")
            out["generators"][key] = {
                "on_steps": int(on_part.split()[1].split("/")[0]),
                "switches": int(sw_part.split()[0]),
            }
    return out


def write_reference_summary(ref: PeriodicReference, params: DeviceParams, out_dir: Path,
                            filename: str = "reference_summary.txt") -> Path:
    """Human-readable table of the periodic reference."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / filename
    gens, bats = _device_columns(params)
    header = ["j"] + [f"p_{g}" for g in gens] + [f"on_{g}" for g in gens] + [f"p_{b}" for b in bats] + [f"soc_{b}" for b in bats]
    lines = [f"periodic reference: n_per={ref.n_per}, dt={ref.dt} h, objective {ref.objective:.6f}",
             "  ".join(f"{h:>8}" for h in header)]
    for j, s in enumerate(ref.states):
        values = [f"{j:>8d}"] + [f"{v:8.4f}" for v in s.p_g] + [f"{v:>8d}" for v in s.on]
        values += [f"{v:8.4f}" for v in s.p_b] + [f"{v:8.4f}" for v in s.soc]
        lines.append("  ".join(values))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_reference_summary(path: Path) -> dict:
    """Header values and table rows of a reference summary."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split(": ", 1)[1]
    n_per, dt, objective = head.split(", ")
    header = lines[1].split()
    rows = []
    for line in lines[2:]:
        row = {}
        for key, value in zip(header, line.split()):
            row[key] = int(value) if key == "j" or key.startswith("on_") else float(value)
        rows.append(row)
    return {
        "n_per": int(n_per.split("=")[1]),
        "dt": float(dt.split("=")[1].split()[0]),
        "objective": float(objective.split()[1]),
        "rows": rows,
    }


def write_solution_json(sub: NmpcSubproblem, sol: Solution, out_dir: Path,
                        filename: str = "nmpc_solution.json") -> Path:
    """Predicted trajectory of one solved subproblem."""
    from .dispatch import decode_trajectory

    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / filename
    data = {"step": sub.k, "status": sol.status.value, "nodes": sol.nodes}
    if sol.x is not None:
        traj = decode_trajectory(sol.x, sub.encoding)
        data.update(
            objective=sol.objective,
            gap=sol.gap,
            states=[s.as_dict() for s in traj.states],
            inputs=[u.as_dict() for u in traj.inputs],
            stage_costs=traj.costs,
        )
    with path.open("w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
    return path


def read_solution_json(path: Path) -> dict:
    """A subproblem solution file with states and inputs as domain objects."""
    from .dispatch import ControlInput, DispatchState

    with Path(path).open("r", encoding="utf-8") as f:
        data = json.load(f)
    if "states" in data:
        data["states"] = [DispatchState.from_dict(s) for s in data["states"]]
        data["inputs"] = [ControlInput.from_dict(u) for u in data["inputs"]]
    return data


def read_setpoint_json(path: Path) -> tuple[PowerSetpoint, Optional[dict], Optional[np.ndarray]]:
    """Setpoint file of ``check-pf``.

    Keys p_g, q_g, p_b, q_b; optional demand {p_d, q_d} and generator modes ``on``.
    """
    with Path(path).open("r", encoding="utf-8") as f:
        data = json.load(f)
    y = PowerSetpoint(*(np.asarray(data[k], dtype=float) for k in ("p_g", "q_g", "p_b", "q_b")))
    on = data.get("on")
    if on is not None:
        on = np.asarray(on, dtype=int)
        if on.shape != y.p_g.shape or not np.all(np.isin(on, (0, 1))):
            raise ValueError(f"{path}: \"on\" needs one 0/1 entry per generator")
    return y, data.get("demand"), on


def write_deviation_json(result: DeviationResult, out_dir: Path, filename: str = "deviation.json") -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / filename
    p = result.projected
    z = result.solved_state
    data = {
        "v_check": result.v_check,
        "projected": {k: getattr(p, k).tolist() for k in ("p_g", "q_g", "p_b", "q_b")},
        "state": {k: getattr(z, k).tolist() for k in ("p", "q", "v", "theta")},
        "starts_tried": result.starts_tried,
        "starts_feasible": result.starts_feasible,
    }
    with path.open("w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
    return path


def read_deviation_json(path: Path) -> DeviationResult:
    from .acpf import DeviationResult

    with Path(path).open("r", encoding="utf-8") as f:
        data = json.load(f)
    projected = PowerSetpoint(*(np.asarray(data["projected"][k], dtype=float) for k in ("p_g", "q_g", "p_b", "q_b")))
    state = GridAlgebraicState(*(np.asarray(data["state"][k], dtype=float) for k in ("p", "q", "v", "theta")))
    return DeviationResult(data["v_check"], projected, state, data["starts_tried"], data["starts_feasible"])
