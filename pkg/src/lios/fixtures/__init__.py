"""Fixture generation: a tiny arm64 assembler and a Mach-O builder.

Real App Store binaries cannot be redistributed, so the test suite and the
`lios fixturegen` subcommand construct synthetic ones with known ground truth.
"""
