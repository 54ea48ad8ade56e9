"""Exception hierarchy.

``InputError`` subclasses describe bad caller input (CLI exit code 2);
``InvariantViolation`` signals an internal bug (exit code 3).
"""


class FlowTrackError(Exception):
    pass


class InputError(FlowTrackError, ValueError):
    pass


class NoJoints(InputError):
    pass


class DegenerateBox(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class InvalidConfig(InputError):
    pass


class NoVisibleJoints(InputError):
    pass


class MissingFlow(InputError):
    pass


class OutOfOrderFrame(InputError):
    pass


class EmptyGroundTruth(InputError):
    pass


class InvalidScenario(InputError):
    pass


class SchemaMismatch(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset


class InvariantViolation(FlowTrackError, AssertionError):
    pass
