__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import importlib
import json
import logging
import os
import re
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import yaml

from buildmonitor.exception import BuildMonitorConfigError, BuildMonitorIOError

logger = logging.getLogger(__name__)

LAYER_RANGE_PATTERN = re.compile(r"^\s*(\d+)?\s*\.\.\s*(\d+)?\s*$")


def to_type(value: Optional[str]) -> Any:
    """
    Attempt to convert ``value`` to its primitive type of ``int``, ``float``, or ``bool``. Values that look like
    a YAML/JSON list or mapping (starting with ``[`` or ``{``) are parsed as such, so whole config blocks can be
    overridden from the command line.

    If ``value`` is an empty string, ``None`` will be returned.

    :param value: The value to convert.
    :return: The converted value.
    """
    if not value or value == "":
        return None

    rv: Union[int, float, bool, str, list, dict] = value

    if value.lstrip().startswith(("[", "{")):
        try:
            return yaml.safe_load(value)
        except yaml.YAMLError:
            return value

    try:
        rv = int(rv)
    except ValueError:
        try:
            rv = float(rv)
        except ValueError:
            pass

    if isinstance(rv, str):
        if rv.lower() == "true":
            rv = True
        elif rv.lower() == "false":
            rv = False

    return rv


def load_class(package: List, clazz: str) -> Callable:
    """
    Import the given class from the given package, and return it.

    :param package: The package.
    :param clazz: The class to import.
    :return: The return class.
    """
    constants_mod = importlib.import_module(".".join(package))
    return getattr(constants_mod, clazz)


def parse_layer_range(value: Optional[str]) -> Tuple[Optional[int], Optional[int]]:
    """
    Parse a ``--layers`` value of the form ``a..b`` (inclusive). Either bound may be omitted, and a single
    integer selects exactly one layer.

    :param value: The range expression.
    :return: The ``(first, last)`` bounds, ``None`` where open.
    """
    if value is None or value.strip() == "":
        return None, None

    if value.strip().isdigit():
        layer = int(value)
        return layer, layer

    match = LAYER_RANGE_PATTERN.match(value)
    if not match:
        raise BuildMonitorConfigError(f"Layer range \"{value}\" is not of the form a..b.")

    first = int(match.group(1)) if match.group(1) is not None else None
    last = int(match.group(2)) if match.group(2) is not None else None
    if first is not None and last is not None and last < first:
        raise BuildMonitorConfigError(f"Layer range \"{value}\" ends before it starts.")

    return first, last


def in_layer_range(layer: int,
                   layer_range: Tuple[Optional[int], Optional[int]]) -> bool:
    first, last = layer_range
    return (first is None or layer >= first) and (last is None or layer <= last)


def parse_set_option(option: str) -> Tuple[str, Any]:
    """
    Split a ``--set key=value`` option in to its key and converted value.

    :param option: The raw ``key=value`` string.
    :return: The key and the value converted with :func:`to_type`.
    """
    if "=" not in option:
        raise BuildMonitorConfigError(f"Override \"{option}\" must be of the form key=value.")

    key, value = option.split("=", 1)
    key = key.strip()
    if not key:
        raise BuildMonitorConfigError(f"Override \"{option}\" has an empty key.")

    return key, to_type(value.strip())


def set_dotted(data: Dict[str, Any],
               key: str,
               value: Any) -> None:
    """
    Set ``value`` in the nested ``data`` structure addressed by a dotted ``key``. Integer path parts index in to
    lists, so ``profilers.1.noise_sigma_mm`` addresses the second profiler block.

    :param data: The nested structure to update in place.
    :param key: The dotted key.
    :param value: The value to set.
    """
    parts = key.split(".")
    node: Any = data
    for i, part in enumerate(parts[:-1]):
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise BuildMonitorConfigError(f"Config key \"{key}\" indexes past the end of "
                                              f"\"{'.'.join(parts[:i])}\".")
            node = node[int(part)]
        elif isinstance(node, dict):
            if node.get(part) is None:
                node[part] = {}
            node = node[part]
        else:
            raise BuildMonitorConfigError(f"Config key \"{key}\" does not address a block.")

    leaf = parts[-1]
    if isinstance(node, list):
        if not leaf.isdigit() or int(leaf) >= len(node):
            raise BuildMonitorConfigError(f"Config key \"{key}\" indexes past the end of a list.")
        node[int(leaf)] = value
    else:
        node[leaf] = value


def write_json(path: str,
               data: Any) -> str:
    """
    Write ``data`` as stable, human-readable JSON (sorted keys, so equal data is byte-identical).

    :param path: The file to write.
    :param data: The JSON-serializable data.
    :return: The path written.
    """
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise BuildMonitorIOError(f"Could not write {path}: {e}") from e

    logger.debug(f"Wrote {path}")

    return path


def read_json(path: str) -> Any:
    if not os.path.exists(path):
        raise BuildMonitorIOError(f"File not found: {path}")

    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise BuildMonitorIOError(f"Could not read {path}: {e}") from e


def ensure_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise BuildMonitorIOError(f"Could not create directory {path}: {e}") from e

    return path
