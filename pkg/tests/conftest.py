"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

ACCEPTANCE = {}


def record_acceptance(number: int, title: str, ok: bool, detail: str = ""):
    """Record one outcome for criterion ``number``; a criterion passes only if every outcome does."""
    entry = ACCEPTANCE.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and bool(ok)
    if detail:
        entry["details"].append(("PASS" if ok else "FAIL") + ": " + detail)
    print(f"acceptance {number} ({title}): {'PASS' if ok else 'FAIL'} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if entry['ok'] else 'FAIL'}] {number}. {entry['title']}")
        for d in entry["details"]:
            if d.startswith("FAIL"):
                terminalreporter.write_line(f"      {d}")
