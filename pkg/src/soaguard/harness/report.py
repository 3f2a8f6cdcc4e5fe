from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Union

__all__ = ["Report", "ScenarioReport"]


@dataclass
class ScenarioReport:
    name: str
    sent: int
    allowed: int
    denied_by_stage: dict[str, int]
    expected: str
    passed: bool
    detail: str = ""
    denied_by_class: dict[str, int] = field(default_factory=dict)
    errors_by_stage: dict[str, int] = field(default_factory=dict)

    @property
    def denied(self) -> int:
        return sum(self.denied_by_stage.values())


@dataclass
class Report:
    seed: int
    scenarios: list[ScenarioReport]

    @property
    def passed(self) -> bool:
        return bool(self.scenarios) and all(s.passed for s in self.scenarios)

    @property
    def failed(self) -> list[str]:
        return [s.name for s in self.scenarios if not s.passed]

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "overall": "pass" if self.passed else "fail",
            "scenarios": [asdict(s) for s in self.scenarios],
        }

    def to_text(self) -> str:
        lines = [f"{'scenario':<14}{'sent':>6}{'allowed':>9}{'denied':>8}{'errors':>8}  result"]
        for s in self.scenarios:
            errors = sum(s.errors_by_stage.values())
            verdict = "PASS" if s.passed else "FAIL"
            lines.append(f"{s.name:<14}{s.sent:>6}{s.allowed:>9}{s.denied:>8}{errors:>8}  {verdict}")
        lines.append("")
        for s in self.scenarios:
            lines.append(f"[{s.name}] expected: {s.expected}")
            if s.denied_by_stage:
                lines.append(f"  denied by stage: {_fmt(s.denied_by_stage)}")
                lines.append(f"  denied by class: {_fmt(s.denied_by_class)}")
            if s.errors_by_stage:
                lines.append(f"  errors by stage: {_fmt(s.errors_by_stage)}")
            lines.append(f"  {s.detail}")
        lines.append("")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (seed {self.seed})")
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        text_path = path.with_name(path.name + ".txt")
        text_path.write_text(self.to_text(), encoding="utf-8")
        return path, text_path


def _fmt(counts: dict[str, int]) -> str:
    return ", ".join(f"{k}={v}" for k, v in counts.items())
