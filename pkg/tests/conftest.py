import pytest

from dnaprivacy.assay import EpgParams
from dnaprivacy.genotype import default_panel, parse_panel


@pytest.fixture(scope="session")
def panel():
    return default_panel()


@pytest.fixture(scope="session")
def epg():
    return EpgParams()


@pytest.fixture(scope="session")
def tiny_panel():
    """Two loci with well separated alleles, handy for hand-computed oracles."""
    return parse_panel(
        "locus,allele,frequency\n"
        "A,10,0.25\nA,12,0.25\nA,14,0.5\n"
        "B,20,0.5\nB,22,0.5\n"
    )
