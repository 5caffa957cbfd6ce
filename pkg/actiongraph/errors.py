# Error hierarchy shared by the library and the CLI
from typing import Optional


class ActionGraphError(Exception):
    """
    Base error carrying a stable machine-readable code and a human detail.
    """

    code = "actiongraph_error"
    exit_code = 1

    def __init__(self, detail: str, code: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        if code is not None:
            self.code = code

    def as_dict(self) -> dict:
        return {"error": self.code, "detail": self.detail}


class ShapeError(ActionGraphError):
    code = "shape_error"
    exit_code = 3


class ParameterError(ActionGraphError):
    code = "parameter_error"
    exit_code = 3


class ContractError(ActionGraphError):
    code = "contract_error"
    exit_code = 3


class InputError(ActionGraphError):
    code = "input_error"
    exit_code = 4


class EmptyVideoError(InputError):
    code = "empty_video"


class DegenerateVideoError(InputError):
    code = "degenerate_video"


class FormatError(ActionGraphError):
    code = "format_error"
    exit_code = 5


class TruncationError(FormatError):
    code = "truncation_error"


class DataError(FormatError):
    code = "data_error"


class SchemaError(ActionGraphError):
    code = "schema_error"
    exit_code = 6


class SpecError(ActionGraphError):
    code = "spec_error"
    exit_code = 6


class PairingError(ActionGraphError):
    code = "pairing_error"
    exit_code = 7


class DivergedError(ActionGraphError):
    code = "diverged"
    exit_code = 8


class GradcheckError(ActionGraphError):
    code = "gradcheck_failed"
    exit_code = 9
