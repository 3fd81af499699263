"""
Exception hierarchy for sgkit.

Everything the library raises on bad input derives from SgkitError so that the
CLI can map it onto exit code 2; VerificationError maps onto exit code 1.
"""

from typing import Any, Optional, Sequence, Union


class SgkitError(Exception):
    """Base class for all sgkit errors."""


class FixtureError(SgkitError):
    """A fixture or input file is missing, unparsable or violates the schema."""

    def __init__(self, message: str, path: Optional[str] = None, field: Optional[str] = None):
        self.path = path
        self.field = field
        parts = []
        if path:
            parts.append(str(path))
        if field:
            parts.append(field)
        prefix = ': '.join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class InvariantError(SgkitError):
    """A domain invariant does not hold (out-of-range class id, bad split, ...)."""


class DimensionError(SgkitError):
    """Matrix or vector shapes disagree."""


class ConfigError(SgkitError):
    """The run configuration is invalid or references a missing path."""


class GroundingError(SgkitError):
    """A grounder failed; the prompt that triggered the failure is attached."""

    def __init__(self, prompt: str, cause: BaseException):
        self.prompt = prompt
        self.cause = cause
        super().__init__(f"grounding failed for prompt {prompt!r}: {cause}")


class VerificationError(SgkitError):
    """A gradient check or oracle comparison failed."""


def format_location(loc: Sequence[Union[str, int]]) -> str:
    """
    Render a pydantic error location as a dotted path.

    ("graphs", 0, "edges", 2, "sub") -> "graphs[0].edges[2].sub"
    """
    out = ''
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        elif out:
            out += f".{part}"
        else:
            out = str(part)
    return out


def describe_validation_error(exc: Any) -> str:
    """First error of a pydantic ValidationError as 'location: message'."""
    errors = exc.errors()
    if not errors:
        return str(exc)
    first = errors[0]
    location = format_location(first.get('loc', ()))
    message = first.get('msg', 'invalid value')
    if message.startswith('Value error, '):
        message = message[len('Value error, '):]
    return f"{location}: {message}" if location else message
