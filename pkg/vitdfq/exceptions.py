class VitDfqError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(VitDfqError):
    pass


class CheckpointError(VitDfqError):
    def __init__(self, tensor, reason):
        self.tensor = tensor
        super().__init__(f"{tensor}: {reason}")


class ModelStateError(VitDfqError):
    pass


class NumericalError(VitDfqError):
    def __init__(self, component, detail=''):
        self.component = component
        super().__init__(f"non-finite value in {component}" + (f" ({detail})" if detail else ''))


class ContractError(VitDfqError):
    pass
