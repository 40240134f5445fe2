"""Assembly-subset toolchain: IR, parser/printer, assembler, rewriter and verifier."""


class AsmError(ValueError):
    """Base class for assembly parsing and encoding errors."""
