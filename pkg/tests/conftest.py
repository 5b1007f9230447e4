import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None) and not _acceptance_ran(terminalreporter):
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in mod.TITLES.items():
        parts = mod.RESULTS.get(n)
        if not parts:
            verdict = _skip_or_error(tr, n)
            tr.write_line(f"criterion {n:2d} {title}: {verdict}")
            continue
        ok = all(v[0] for v in parts.values())
        detail = "; ".join(f"{p}: {d}" if p else d for p, (_, d) in parts.items())
        tr.write_line(f"criterion {n:2d} {title}: {'PASS' if ok else 'FAIL'} - {detail}")


def _reports(tr):
    for key in ("passed", "failed", "skipped", "error"):
        for rep in tr.stats.get(key, []):
            if "test_acceptance" in getattr(rep, "nodeid", ""):
                yield key, rep


def _acceptance_ran(tr):
    return any(True for _ in _reports(tr))


def _skip_or_error(tr, n):
    for key, rep in _reports(tr):
        if f"test_criterion_{n}_" in rep.nodeid:
            if key == "skipped":
                reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else ""
                return f"SKIPPED - {reason.removeprefix('Skipped: ')}"
            return "FAIL - raised before reaching a verdict"
    return "NOT RUN"
