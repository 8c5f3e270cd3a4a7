"""
Test top-level
"""

from importlib.metadata import metadata  # type: ignore[import]

convnorm_metadata = metadata("convnorm")

import convnorm


def test_version():
    assert convnorm.__version__ == convnorm_metadata["version"]


def test_short_description_consistency():
    module_descrip = convnorm.__doc__.strip().split("\n")[0]

    assert module_descrip == convnorm_metadata["summary"]
