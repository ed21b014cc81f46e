"""Exception hierarchy shared across the package."""


class CexRepairError(Exception):
    """Base class for all errors raised by this package."""


# --- verifier driver ---

class VerifierNotFound(CexRepairError):
    pass


class WorkspaceError(CexRepairError):
    pass


class EmptyDiagnostics(CexRepairError):
    pass


# --- source model ---

class ParseError(CexRepairError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{message} (line {line}, col {col})" if line else message)
        self.line = line
        self.col = col


class UnsupportedLoop(CexRepairError):
    pass


class MissingAssignment(CexRepairError):
    def __init__(self, name: str):
        super().__init__(f"counterexample has no assignment for live variable {name!r}")
        self.name = name


class TypeRenderError(CexRepairError):
    def __init__(self, name: str, detail: str = ""):
        super().__init__(f"cannot render value for {name!r}: {detail}")
        self.name = name


class NotVerified(CexRepairError):
    pass


# --- llm gateway ---

class MissingBinding(CexRepairError):
    def __init__(self, name: str):
        super().__init__(f"template placeholder {name!r} has no binding")
        self.name = name


class NoCodeBlock(CexRepairError):
    pass


class ProviderError(CexRepairError):
    pass


class RateLimited(ProviderError):
    pass


class AuthError(ProviderError):
    pass


# --- cex engine ---

class RunnerUnavailable(CexRepairError):
    pass


class RangeViolation(CexRepairError):
    def __init__(self, name: str, type_name: str, value=None):
        super().__init__(f"value {value!r} for {name!r} outside {type_name} range")
        self.name = name
        self.type_name = type_name
        self.value = value


class NonContiguousVector(CexRepairError):
    def __init__(self, name: str):
        super().__init__(f"vector {name!r} has non-contiguous element indices")
        self.name = name


class MalformedAggregate(CexRepairError):
    def __init__(self, name: str, raw: str = ""):
        super().__init__(f"aggregate value for {name!r} is not a vec![..] literal: {raw!r}")
        self.name = name


# --- repair engine / pipeline ---

class NoViableMutant(CexRepairError):
    pass


class TaskSetupError(CexRepairError):
    pass


class DatasetNotFound(CexRepairError):
    pass
