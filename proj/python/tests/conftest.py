import os
import pathlib

import ontraffic


def pytest_report_header(config):
    return f"ontraffic from {pathlib.Path(ontraffic._core.__file__).parent}"


def pytest_sessionstart(session):
    expected = os.environ.get("ONTRAFFIC_EXPECT_DIR")
    if expected:
        got = pathlib.Path(ontraffic._core.__file__).resolve().parent
        if got != pathlib.Path(expected).resolve():
            raise RuntimeError(f"imported ontraffic from {got}, expected {expected}; an installed copy shadows the build")
