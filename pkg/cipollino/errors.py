"""
Exception hierarchy shared by every cipollino component
"""

from typing import Iterable, Optional


class CipollinoError(Exception):
    """Base class for all cipollino errors"""

    exit_code = 3

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ParseError(CipollinoError):
    """Malformed line or record in an input file"""

    def __init__(self, message: str, line_number: Optional[int] = None, source: str = ""):
        self.line_number = line_number
        self.source = source
        where = ""
        if source:
            where = f"{source}:"
        if line_number is not None:
            where = f"{where}{line_number}: "
        elif where:
            where = f"{where} "
        super().__init__(f"{where}{message}")


class ConsistencyError(CipollinoError):
    """Input contradicts itself (e.g. two kinds for one AS pair)"""


class IntegrityError(CipollinoError):
    """Loaded data violates a structural invariant"""


class UnknownAsError(CipollinoError, LookupError):
    """AS number not present in the topology"""

    def __init__(self, asn: int):
        self.asn = asn
        super().__init__(f"AS{asn} is not in the topology")


class ArgumentError(CipollinoError, ValueError):
    """Caller passed an argument outside the accepted domain"""

    exit_code = 2


class ConfigError(CipollinoError):
    """Invalid client configuration"""

    exit_code = 2


class FetchError(CipollinoError):
    """A bundle or feed location could not be retrieved"""

    exit_code = 2


class SelectionError(CipollinoError):
    """Relay or circuit selection could not produce a result"""


class NoExitError(SelectionError):
    """No exit relay supports the requested destination"""

    def __init__(self, message: str, ports: Iterable[int] = ()):
        self.ports = tuple(sorted(set(ports)))
        super().__init__(message)


class ExposureError(CipollinoError):
    """A circuit end could not be mapped to an AS"""


class GenerationError(CipollinoError):
    """Workload generation failed"""


class CircuitStateError(CipollinoError):
    """Illegal circuit lifecycle transition"""


class VerificationError(CipollinoError):
    """Bundle verification found measurement ids missing from the archive"""

    exit_code = 4

    def __init__(self, message: str, offenders: Iterable[str] = ()):
        self.offenders = tuple(offenders)
        super().__init__(message)
