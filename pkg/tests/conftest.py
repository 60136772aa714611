import functools

import numpy as np
import pytest
import torch

from style_diff.features import BackendDescriptor
from style_diff.image_io import GlyphSpec, ImageTensor, rasterize_glyph
from style_diff.transfer import TransferConfig

torch.set_num_threads(1)


@functools.lru_cache(maxsize=None)
def _glyph(font, char, size):
    return rasterize_glyph(GlyphSpec.from_char(font, char, canvas=size))


def glyph(font, char="T", size=32) -> ImageTensor:
    return _glyph(font, char, size).copy()


@pytest.fixture
def tiny():
    return BackendDescriptor.tiny()


@pytest.fixture
def tiny_cfg(tiny):
    return TransferConfig(backend=tiny, iterations=5)


@pytest.fixture
def serif_triple():
    """(content, style1, style2): other-family sans, serif, same-family sans."""
    return glyph("cmss10.ttf"), glyph("DejaVuSerif.ttf"), glyph("DejaVuSans.ttf")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------
# Tests marked ``@pytest.mark.acceptance(n, "title")`` report one line each at
# the end of the session. Details come from ``record_property("detail", ...)``
# on success or from the exception on failure.

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    number, title = marker.args[0], marker.args[1]
    if rep.when == "call" or rep.failed or rep.skipped:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if rep.failed and call.excinfo is not None:
            msg = str(call.excinfo.value).strip().splitlines()
            reason = f"{call.excinfo.typename}: {msg[0] if msg else ''}"
            detail = f"{detail}; {reason}" if detail else reason
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        if number not in _ACCEPTANCE or status != "PASS":
            _ACCEPTANCE[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
