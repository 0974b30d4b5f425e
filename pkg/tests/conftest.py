import pytest

from funion import bacap

_RESULTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def accept(request):
    """Record one acceptance criterion; ``accept(n, name, ok, detail)`` prints and asserts."""
    seen = []

    def record(number, name, ok, detail=""):
        seen.append(number)
        _RESULTS[number] = (name, bool(ok), detail)
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}  {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    yield record
    if not seen:
        number = getattr(request.function, "criterion", None)
        if number is not None:
            _RESULTS[number] = (request.function.__name__, False, "raised before reporting")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        name, ok, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def caps():
    return bacap.generate_capability(bytes(range(64)))
