"""AArch64 instruction classification: decoder and operand allowlist."""
