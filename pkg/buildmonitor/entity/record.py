__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
from typing import Any, Callable, Dict, Optional

from buildmonitor.exception import BuildMonitorEntityError, BuildMonitorError

logger = logging.getLogger(__name__)


class Record:
    """
    A base class that holds one decoded stream record (a JSON object), and can be extended to be made up of the
    record's fields utilizing the helper methods.
    """

    def __init__(self,
                 parsed: Dict[str, Any],
                 line_number: int = 0) -> None:
        if not isinstance(parsed, dict):
            raise BuildMonitorEntityError(f"A stream record must be a JSON object, got {type(parsed).__name__}.")

        #: Decoded JSON data that can be used to populate the fields of the record.
        self.parsed: Dict[str, Any] = parsed
        #: The 1-based line of the stream file the record came from, ``0`` if not read from a file.
        self.line_number: int = line_number
        #: The names of fields that failed to parse.
        self.failed_fields: list = []

    def __getstate__(self) -> Dict:
        state = self.__dict__.copy()
        state.pop("parsed")
        return state

    @property
    def usable(self) -> bool:
        """
        ``True`` if every field parsed.
        """
        return not self.failed_fields

    def safe_parse(self,
                   parse_function: Callable[..., Any],
                   **kwargs: Any) -> Any:
        """
        Execute the given parse function on a field, handling any common parse exceptions and passing them as
        warnings to the logger, suppressing them as exceptions. Fields that fail are remembered, so the record can
        be skipped as a whole.

        :param parse_function: The parse function to attempt safe execution.
        :param kwargs: The ``kwargs`` will be passed to ``parse_function``.
        :return: The return value from ``parse_function``.
        """
        if not parse_function.__name__.startswith("_parse_") and parse_function.__name__ != "simple_parse":
            raise BuildMonitorError("The name of the `parse_function` passed "
                                    "to this method must start with `_parse_`.")

        field_name = kwargs.get("key") or parse_function.__name__[len("_parse_"):]
        try:
            return parse_function(**kwargs)
        except (BuildMonitorError, KeyError, IndexError, TypeError, ValueError):
            logger.warning(f"When building {self.__class__.__name__} on line {self.line_number}, "
                           f"`{field_name}` could not be parsed.")
            logger.debug("Parse failure.", exc_info=True)
            self.failed_fields.append(field_name)
            return None

    def simple_parse(self,
                     key: str,
                     cast: Optional[Callable[[Any], Any]] = None,
                     required: bool = False) -> Any:
        """
        Read a top-level field of the record, optionally converting it with ``cast``.

        :param key: The JSON key.
        :param cast: Applied to the raw value when present.
        :param required: If required, an exception will be thrown instead of returning ``None``.
        :return: The (converted) value.
        """
        value = self.parsed.get(key)

        if value is None:
            if required:
                raise BuildMonitorEntityError(f"When building {self.__class__.__name__}, field `{key}` was None, "
                                              f"but this is not allowed.")
            return None

        return cast(value) if cast else value

    def safe_simple_parse(self,
                          key: str,
                          **kwargs: Any) -> Any:
        """
        A helper function that uses :func:`simple_parse` as the ``parse_function()`` passed to :func:`safe_parse`.
        """
        return self.safe_parse(self.simple_parse, key=key, **kwargs)
