"""Typed failures and the process exit codes they map to"""
from typing import Optional


class AmoptError(Exception):
    """Base class for every failure the command line reports"""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(AmoptError):
    """Invalid run configuration or command options"""

    exit_code = 2


class CompatibilityError(AmoptError):
    """Inputs that cannot be used together (checkpoint version, env mismatch)"""

    exit_code = 3


class NumericalError(AmoptError):
    """Non-finite values in parameters, gradients or losses"""

    exit_code = 4


class GraphError(AmoptError):
    """Misuse of the differentiation graph"""


class ShapeError(AmoptError):
    """Operands of an operation have incompatible shapes"""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class ActionBoundsError(AmoptError):
    """Action outside the [-1, 1] box accepted by every environment"""
