__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"


class BuildMonitorError(Exception):
    """
    Raised when a general ``build-monitor`` error has occurred.
    """
    pass


class BuildMonitorConfigError(BuildMonitorError):
    """
    Raised when a config value is missing, malformed, or violates a physical constraint.
    """
    pass


class BuildMonitorIOError(BuildMonitorError):
    """
    Raised when an input file cannot be read or an output file cannot be written.
    """
    pass


class BuildMonitorToolpathError(BuildMonitorIOError):
    """
    Raised when a toolpath file violates the CSV schema, or a toolpath query is out of range.
    """

    def __init__(self,
                 message: str,
                 line_number: int = 0) -> None:
        if line_number:
            message = f"Line {line_number}: {message}"
        super().__init__(message)

        #: The 1-based line number of the offending row, or ``0`` if not tied to a row.
        self.line_number: int = line_number


class BuildMonitorStreamError(BuildMonitorError):
    """
    Raised when a scan or pose stream fails an integrity check (for example, time going backwards).
    """
    pass


class BuildMonitorGeometryError(BuildMonitorError):
    """
    Raised when a transform is not rigid, or geometry contains non-finite values where they are rejected.
    """
    pass


class BuildMonitorMeshError(BuildMonitorError):
    """
    Raised when a mesh query is made against an empty mesh, or mesh file content is malformed.
    """
    pass


class BuildMonitorReferenceError(BuildMonitorError):
    """
    Raised when a reference model cannot be built for the requested layer or time.
    """
    pass


class BuildMonitorEntityError(BuildMonitorError):
    """
    Raised when a ``build-monitor`` stream record parsing error has occurred.
    """
    pass
