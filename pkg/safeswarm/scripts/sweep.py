# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""This script repeats a scenario over several effective ranges of the spoofing device"""
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import lightning as L
import yaml

from safeswarm.config import ScenarioConfig
from safeswarm.simulate import emit_trace, path_lengths, resolve_config, run, summarize
from safeswarm.utils import CLI, ConfigurationError, NumericalError, atomic_write, exit_with, init_out_dir


def sweep_radii(config: ScenarioConfig, radii: List[float], workers: int = 1) -> Dict[str, Any]:
    """Runs ``config`` without its spoofing device and then once per radius, all with the same seed."""
    nominal = run(replace(config, attacker=replace(config.attacker, enabled=False)), workers=workers)
    nominal_lengths = path_lengths(nominal)
    cases = []
    for radius in radii:
        attacked = replace(config, attacker=replace(config.attacker, enabled=True, r_effect=float(radius)))
        trace = run(attacked, workers=workers)
        summary = summarize(trace)
        lengths = path_lengths(trace)
        agents = sorted({episode.agent for episode in trace.episodes})
        cases.append(
            {
                "r_effect": float(radius),
                "completed": summary["completed"],
                "arrival_spread": summary["arrival_spread"],
                "attacked_agents": agents,
                "margins": [episode["margin"] for episode in summary["episodes"]],
                "escaped": all(episode.margin is not None and episode.margin > 0 for episode in trace.episodes),
                "path_increase": {
                    i: round(lengths[i] / nominal_lengths[i] - 1.0, 6) for i in agents if nominal_lengths.get(i)
                },
                "trace": trace,
            }
        )
    return {"nominal": summarize(nominal), "cases": cases}


def sweep(
    scenario: Optional[Path] = None,
    preset: Optional[str] = None,
    r_effect: List[float] = [15.0, 50.0, 60.0, 70.0],
    out_dir: Path = Path("out/sweep"),
    workers: int = 1,
) -> None:
    """Runs a scenario once without the spoofing device and once per effective range, and reports the escapes.

    Args:
        scenario: Path to a scenario YAML file. Mutually exclusive with ``preset``.
        preset: Name of a scenario preset in ``safeswarm.config``. Defaults to ``attack``.
        r_effect: Effective ranges of the spoofing device in m.
        out_dir: Directory in which one trace per range and ``sweep.yaml`` are written.
        workers: Number of threads the per-agent work of a tick fans out to.
    """
    try:
        config = resolve_config(scenario, preset or (None if scenario is not None else "attack"))
        if not r_effect or any(radius < 0 for radius in r_effect):
            raise ConfigurationError(f"r_effect must list non-negative radii, got {r_effect}")
        L.seed_everything(config.seed)
        result = sweep_radii(config, r_effect, workers)
    except ConfigurationError as ex:
        exit_with(ex, 1)
    except NumericalError as ex:
        exit_with(ex, 3)

    out_dir = init_out_dir(out_dir)
    report = {"nominal": {"completed": result["nominal"]["completed"]}, "cases": []}
    for case in result["cases"]:
        emit_trace(case.pop("trace"), out_dir / f"r{case['r_effect']:g}")
        report["cases"].append(case)
    atomic_write(out_dir / "sweep.yaml", yaml.safe_dump(report, sort_keys=False))
    print(yaml.safe_dump(report, sort_keys=False))
    print(f"Wrote the sweep to {str(out_dir)!r}", file=sys.stderr)
    if not all(case["escaped"] for case in report["cases"]):
        raise SystemExit(2)


if __name__ == "__main__":
    CLI(sweep)
