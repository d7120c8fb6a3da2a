import pytest

from ncflow.core import (
    NUMERICAL_ERRORS,
    ChecksumError,
    ConfigError,
    DatasetError,
    ErrorCode,
    IntegrationError,
    NcfError,
    NonFiniteError,
    ShapeError,
)


class TestNcfError:
    def test_truthiness_follows_code(self):
        assert bool(NcfError("fine"))
        assert not ShapeError("bad")
        assert not NcfError("bad", ErrorCode.SHAPE_MISMATCH)

    @pytest.mark.parametrize(
        "cls,code",
        [
            (ShapeError, ErrorCode.SHAPE_MISMATCH),
            (NonFiniteError, ErrorCode.NON_FINITE),
            (IntegrationError, ErrorCode.STEP_LIMIT),
            (ConfigError, ErrorCode.INVALID_CONFIG),
            (ChecksumError, ErrorCode.CHECKSUM_MISMATCH),
        ],
    )
    def test_default_codes(self, cls, code):
        assert cls().code == code

    def test_dataset_family(self):
        assert issubclass(ChecksumError, DatasetError)
        assert issubclass(DatasetError, NcfError)

    def test_integration_error_coordinates(self):
        err = IntegrationError("step cap exceeded", last_time=1.5, coordinates=(1, 0, 2))
        assert err.last_time == 1.5
        assert err.coordinates == (1, 0, 2)
        assert "(1, 0, 2)" in str(err)

    def test_non_finite_names_primitive(self):
        assert NonFiniteError("nan", primitive="log").primitive == "log"

    def test_numerical_errors(self):
        assert NonFiniteError in NUMERICAL_ERRORS
        assert IntegrationError in NUMERICAL_ERRORS
        assert ConfigError not in NUMERICAL_ERRORS
