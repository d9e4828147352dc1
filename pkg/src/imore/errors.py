"""Exception hierarchy shared across the package."""


class IMoReError(Exception):
    pass


# program DSL

class ProgramSyntaxError(IMoReError):
    pass


class UnknownConcept(IMoReError):
    pass


class AmbiguousConcept(IMoReError):
    pass


class ArityError(IMoReError):
    pass


class EmptyVocabulary(IMoReError):
    pass


# motion / io

class ConfigError(IMoReError):
    pass


class FormatError(IMoReError):
    pass


# symbolic execution

class ExecError(IMoReError):
    pass


class EmptyResult(ExecError):
    pass


class AmbiguousResult(ExecError):
    pass


class MissingAttribute(ExecError):
    """Queried attribute is undefined on the selected segment (e.g. no direction)."""


# dataset

class QuotaUnreachable(IMoReError):
    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = dict(achieved or {})


class UnparsableQuestion(IMoReError):
    def __init__(self, message, fallback=None):
        super().__init__(message)
        self.fallback = fallback


class SchemaError(IMoReError):
    pass


class MissingMotion(IMoReError):
    pass


# numerics

class ShapeError(IMoReError):
    pass


class NonFiniteValue(IMoReError):
    pass


class DivergenceError(IMoReError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump
