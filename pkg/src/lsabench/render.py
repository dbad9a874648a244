from __future__ import annotations

import json
from pathlib import Path
from typing import Any


class RenderError(RuntimeError):
    pass


def _load_artifact(path: Path) -> dict[str, Any]:
    if not path.exists() or path.is_dir():
        raise RenderError("Artifact file does not exist or is a directory")

    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise RenderError(f"Artifact is not valid JSON: {e}") from e

    if payload.get("kind") != "bench":
        raise RenderError("Artifact kind must be 'bench' for report rendering")
    if not isinstance(payload.get("summary"), list):
        raise RenderError("Artifact has no summary table")
    return payload


def _cell(value: Any, spec: str = ".4g") -> str:
    if value is None:
        return "N/A"
    if isinstance(value, float):
        return format(value, spec)
    return str(value)


def _summary_table(rows: list[dict[str, Any]]) -> list[str]:
    lines = [
        "| Scenario | Method | n (ok) | Mean throughput (bit/s) | Std. err. | Valid rate |",
        "|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r.get('scenario_id')} | {r.get('solver_name')} | {r.get('n')} ({r.get('n_ok')}) "
            f"| {_cell(r.get('mean_throughput'), '.6g')} | {_cell(r.get('stderr_throughput'))} "
            f"| {_cell(r.get('mean_valid_rate'), '.3f')} |"
        )
    return lines


def _latency_table(rows: list[dict[str, Any]]) -> list[str]:
    lines = ["| Scenario | Method | Mean latency (ms) | p95 latency (ms) |", "|---|---|---|---|"]
    for r in rows:
        lines.append(
            f"| {r.get('scenario_id')} | {r.get('solver_name')} "
            f"| {float(r.get('mean_latency', 0.0)) * 1000:.3f} | {float(r.get('p95_latency', 0.0)) * 1000:.3f} |"
        )
    return lines


def render_report(artifact_path: str, output_path: str) -> Path:
    artifact = Path(artifact_path)
    payload = _load_artifact(artifact)
    summary = payload["summary"]
    audit = payload.get("audit", {})
    notes = sorted({str(r.get("note")) for r in summary if r.get("note")})
    flagged = [r for r in payload.get("records", []) if r.get("status") != "ok"]

    lines: list[str] = []
    lines.append(f"# Benchmark Report: {payload.get('name', 'unnamed')}")
    lines.append("")
    lines.append("## Meta")
    lines.append(f"- Artifact: `{artifact}`")
    lines.append(f"- Run id: `{payload.get('run_id', 'unknown')}`")
    lines.append(f"- Created at: `{payload.get('created_at', 'unknown')}`")
    lines.append(f"- Seeds: `{len(payload.get('seeds', []))}`")
    lines.append("")
    lines.append("## Throughput")
    lines.extend(_summary_table(summary))
    lines.append("")
    lines.append("## Latency")
    lines.extend(_latency_table(summary))
    lines.append("")
    lines.append("## Audit")
    lines.append(f"- Deployed allocations: `{audit.get('deployed', 'unknown')}`")
    lines.append(f"- Infeasible deployments: `{audit.get('infeasible', 'unknown')}`")
    lines.append(f"- Passed: `{audit.get('passed', 'unknown')}`")
    lines.append("")
    lines.append("## Flagged Records")
    if flagged:
        for r in flagged:
            lines.append(f"- {r.get('scenario_id')} / {r.get('solver_name')} / seed {r.get('seed')}: `{r.get('status')}`")
    else:
        lines.append("- none")
    if notes:
        lines.append("")
        lines.append("## Notes")
        lines.extend(f"- Presets are {n}." for n in notes)
    lines.append("")

    out = Path(output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines), encoding="utf-8")
    return out
