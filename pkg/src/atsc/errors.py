"""Exception types raised across the package."""


class ATSCError(Exception):
    pass


class ConfigurationError(ATSCError, ValueError):
    pass


class ContractViolation(ATSCError, ValueError):
    """An operation was called with arguments outside its preconditions."""


class UnsupportedShapeError(ConfigurationError):
    pass


class IngestionError(ATSCError, ValueError):
    pass


class IntegrityError(ATSCError):
    """A checkpoint blob does not match the fingerprint in its manifest."""


class DivergenceError(ATSCError, FloatingPointError):
    """Training loss became non-finite or exceeded the divergence bound."""

    def __init__(self, component: str, value: float, epoch=None, batch=None):
        self.component = component
        self.value = value
        self.epoch = epoch
        self.batch = batch
        where = ""
        if epoch is not None:
            where = f" at epoch {epoch}, batch {batch}"
        super().__init__(f"training diverged{where}: {component}={value!r}")
