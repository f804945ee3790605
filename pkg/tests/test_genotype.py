import csv
import hashlib
import io
import math
from decimal import Decimal
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnaprivacy.genotype import (
    FrequencyPanel,
    GenotypeProfile,
    Locus,
    PanelParseError,
    PanelValidationError,
    component_grids,
    default_panel_text,
    dosage_grid,
    load_panel,
    parse_panel,
    random_panel,
    sample_genotype,
)
from dnaprivacy.streams import child, stream

SHIPPED_SHA256 = "c79228f3828c89ed47a129b347a02d037784ed61a3fd150483d8c52fbf785132"


def test_minimal_panel_parses():
    p = parse_panel("locus,allele,frequency\nX,8,0.5\nX,9,0.5\n")
    assert p.locus_names == ("X",)
    assert p.locus("X").alleles == (8, 9)


def test_sum_not_one_names_locus(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("locus,allele,frequency\nX,8,0.5\nX,9,0.5\nY,8,0.5\nY,9,0.4\n")
    with pytest.raises(PanelValidationError) as err:
        load_panel(f)
    assert err.value.locus == "Y"
    assert "Y" in str(err.value)


@pytest.mark.parametrize("value", ["nan", "inf", "-0.1", "1.5", "abc"])
def test_bad_frequency_rejected_with_row(value):
    with pytest.raises(PanelParseError) as err:
        parse_panel(f"locus,allele,frequency\nX,8,{value}\nX,9,0.5\n")
    assert err.value.row == 2


def test_duplicate_allele_rejected():
    with pytest.raises(PanelValidationError):
        parse_panel("locus,allele,frequency\nX,8,0.5\nX,8,0.5\n")


def test_ungrouped_rows_rejected():
    with pytest.raises(PanelParseError) as err:
        parse_panel("locus,allele,frequency\nX,8,0.5\nY,8,1\nX,9,0.5\n")
    assert err.value.row == 4


def test_bad_header_rejected():
    with pytest.raises(PanelParseError):
        parse_panel("name,allele,p\nX,8,1\n")


def test_locus_needs_two_alleles():
    with pytest.raises(PanelValidationError):
        Locus("X", (8,))


def test_load_preserves_file_order():
    p = parse_panel("locus,allele,frequency\nZ,8,0.5\nZ,9,0.5\nA,1,0.5\nA,2,0.5\n")
    assert p.locus_names == ("Z", "A")


def test_shipped_panel_checksum_and_sums_by_standalone_parse():
    # independent of the package parser: plain csv plus exact decimal sums
    text = resources.files("dnaprivacy").joinpath("data/default_panel.csv").read_text(encoding="utf-8")
    assert hashlib.sha256(text.encode()).hexdigest() == SHIPPED_SHA256
    sums: dict[str, Decimal] = {}
    for row in csv.DictReader(io.StringIO(text)):
        sums[row["locus"]] = sums.get(row["locus"], Decimal(0)) + Decimal(row["frequency"])
    assert len(sums) == 15
    assert all(v == 1 for v in sums.values())
    panel = load_panel("default")
    assert len(panel.loci) == 15
    assert default_panel_text() == text


def test_degenerate_locus_always_homozygous():
    # a locus cannot have a single allele, so put almost all mass on one
    p = FrequencyPanel((Locus("X", (8, 9)),), {("X", 8): 1.0 - 1e-300, ("X", 9): 1e-300})
    for i in range(20):
        assert sample_genotype(p, stream(0, i))["X"] == (8, 8)


def test_heterozygosity_two_equal_alleles():
    p = parse_panel("locus,allele,frequency\nX,1,0.5\nX,2,0.5\n")
    rng = stream(11, "het")
    n = 100_000
    het = sum(len(set(sample_genotype(p, rng)["X"])) == 2 for _ in range(n)) / n
    assert abs(het - 0.5) <= 0.01


def test_allele_and_homozygosity_frequencies_match_panel(panel):
    name = panel.locus_names[0]
    locus = panel.locus(name)
    single = FrequencyPanel((locus,), {(name, a): panel.freq[(name, a)] for a in locus.alleles})
    rng = stream(3, "freq")
    n = 100_000
    pairs = np.array([sample_genotype(single, rng)[name] for _ in range(n)])
    p = panel.frequencies(name)
    for a, pa in zip(locus.alleles, p):
        emp = np.mean(pairs == a)
        assert abs(emp - pa) <= 4 * math.sqrt(pa * (1 - pa) / (2 * n))
    homo = np.mean(pairs[:, 0] == pairs[:, 1])
    expected = float(np.sum(p * p))
    assert abs(homo - expected) <= 4 * math.sqrt(expected * (1 - expected) / n)


def test_sample_genotype_deterministic(panel):
    assert sample_genotype(panel, stream(5, "x")) == sample_genotype(panel, stream(5, "x"))
    assert sample_genotype(panel, stream(5, "x")) != sample_genotype(panel, stream(6, "x"))


def test_random_panel_shapes():
    p = random_panel(1, 2, stream(1))
    assert len(p.loci) == 1 and len(p.loci[0].alleles) == 2
    assert abs(p.frequencies("L01").sum() - 1) <= 1e-9
    p = random_panel(15, 8, stream(2))
    assert len(p.loci) == 15
    for name in p.locus_names:
        assert abs(p.frequencies(name).sum() - 1) <= 1e-9


def test_random_panel_high_concentration_is_uniform():
    freqs = np.array([random_panel(1, 8, stream(9, i), concentration=1e6).frequencies("L01") for i in range(1000)])
    assert np.all(np.abs(freqs.mean(axis=0) - 1 / 8) <= 0.01)


@pytest.mark.parametrize("args", [(0, 2), (1, 1)])
def test_random_panel_invalid_counts(args):
    with pytest.raises(ValueError):
        random_panel(*args, stream(0))


def test_panel_csv_round_trip():
    p = random_panel(3, 4, stream(4))
    q = parse_panel(p.to_csv())
    assert q.locus_names == p.locus_names
    assert dict(q.freq) == dict(p.freq)


def test_profile_is_unordered_and_checked(tiny_panel):
    a = GenotypeProfile({"A": (14, 10), "B": (20, 22)})
    b = GenotypeProfile({"B": (22, 20), "A": (10, 14)})
    assert a == b and hash(a) == hash(b)
    a.check(tiny_panel)
    with pytest.raises(ValueError):
        GenotypeProfile({"A": (10, 11), "B": (20, 20)}).check(tiny_panel)
    with pytest.raises(ValueError):
        GenotypeProfile({"A": (10, 10)}).check(tiny_panel)
    assert GenotypeProfile.from_json(a.to_json()) == a


def test_dosage_grid_counts(tiny_panel):
    prof = GenotypeProfile({"A": (14, 14), "B": (20, 22)})
    d = dosage_grid(tiny_panel, prof)
    idx = tiny_panel.grid.index
    assert d[0, idx[0][14]] == 2 and d.sum() == 4
    _, sq = component_grids(tiny_panel, prof)
    assert sq[0, idx[0][14]] == 4 and sq[1, idx[1][20]] == 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), loci=st.integers(1, 5), alleles=st.integers(2, 9))
def test_sampled_profiles_are_valid(seed, loci, alleles):
    p = random_panel(loci, alleles, stream(seed, "panel"))
    prof = sample_genotype(p, stream(seed, "person"))
    prof.check(p)
    for name in p.locus_names:
        a, b = prof[name]
        assert a <= b
