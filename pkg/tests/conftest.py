import os

from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")

# acceptance verdicts, echoed in the terminal summary
VERDICTS = []


def record_verdict(number, title, ok, detail=""):
    line = f"criterion {number:>2} {title}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    VERDICTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
