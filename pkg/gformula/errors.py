class GFormulaError(Exception):
    """Base error; `module` names the component that raised it"""

    module = "gformula"

    def __init__(self, message: str, module: str = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def describe(self) -> str:
        return f"{self.module}: {self}"
