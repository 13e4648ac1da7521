"""Pass/fail lines collected by the acceptance suite and echoed in the pytest summary."""
LINES = []


def record(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}"
    LINES.append(line)
    print(line)
