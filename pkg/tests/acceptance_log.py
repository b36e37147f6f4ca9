"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

RESULTS: list[str] = []


def record(name: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return passed
