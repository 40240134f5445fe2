"""Tests for isa.allowlist."""
from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import pytest

from isa.allowlist import (
    EMPTY_ALLOWLIST,
    AllowlistError,
    canonical_sysreg,
    load_allowlist,
    parse_allowlist,
    sysreg_encoding,
)


class TestNames:
    def test_canonical_spelling(self):
        assert canonical_sysreg("tpidr_el0") == "TPIDR_EL0"

    def test_generic_name_of_known_register(self):
        enc = sysreg_encoding("TPIDR_EL0")
        generic = "S{}_{}_C{}_C{}_{}".format(*enc)
        assert canonical_sysreg(generic) == "TPIDR_EL0"

    def test_generic_name_of_unknown_register(self):
        assert canonical_sysreg("s3_3_c15_c2_0") == "S3_3_C15_C2_0"
        assert sysreg_encoding("S3_3_C15_C2_0") == (3, 3, 15, 2, 0)

    def test_unknown_name_has_no_encoding(self):
        assert sysreg_encoding("NOT_A_REGISTER") is None


class TestParse:
    def test_default_file_loads(self):
        allow = load_allowlist()
        assert allow.allows_sysreg("TPIDR_EL0", write=True)
        assert allow.allows_sysreg("CNTVCT_EL0", write=False)
        assert not allow.allows_sysreg("CNTVCT_EL0", write=True)
        assert allow.allows_cacheop("DC_ZVA")
        assert not allow.allows_cacheop("DC_IVAC")

    def test_directions(self):
        allow = parse_allowlist(["sysreg TPIDR_EL0 write", "sysreg FPCR read"])
        assert allow.allows_sysreg("tpidr_el0", write=True)
        assert not allow.allows_sysreg("tpidr_el0", write=False)
        assert allow.allows_sysreg("FPCR", write=False)

    def test_repeated_entries_merge(self):
        allow = parse_allowlist(["sysreg FPCR read", "sysreg FPCR write"])
        assert allow.allows_sysreg("FPCR", write=True)
        assert allow.allows_sysreg("FPCR", write=False)

    def test_comments_and_blanks(self):
        allow = parse_allowlist(["# header", "", "cacheop ic_ivau  # trailing"])
        assert allow.allows_cacheop("IC_IVAU")

    def test_unknown_kind(self):
        with pytest.raises(AllowlistError, match="unknown entry kind"):
            parse_allowlist(["register TPIDR_EL0"])

    def test_bad_direction(self):
        with pytest.raises(AllowlistError, match="direction"):
            parse_allowlist(["sysreg TPIDR_EL0 sometimes"])

    def test_unknown_register_is_kept_with_a_warning(self, caplog):
        allow = parse_allowlist(["sysreg MADE_UP_EL0"])
        assert allow.allows_sysreg("MADE_UP_EL0", write=False)
        assert "not a known system register" in caplog.text

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_allowlist(tmp_path / "absent.txt")

    def test_empty_allowlist_allows_nothing(self):
        assert not EMPTY_ALLOWLIST.allows_sysreg("NZCV", write=False)
        assert not EMPTY_ALLOWLIST.allows_cacheop("DC_ZVA")
