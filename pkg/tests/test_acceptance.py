"""Acceptance criteria 1-12, each at its stated sizes and tolerances.

Every test prints one ``[PASS]``/``[FAIL]`` line to the terminal.
"""

import pytest

from jumpfield import acceptance


@pytest.mark.slow
@pytest.mark.parametrize("number", range(1, 13))
def test_criterion(number, capsys):
    result = acceptance.run(number)
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.line()
