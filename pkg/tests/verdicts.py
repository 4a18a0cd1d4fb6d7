"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

VERDICTS: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line)
    return ok
