"""Regenerate src/dnaprivacy/data/default_panel.csv (synthetic frequencies)."""

from decimal import Decimal
from pathlib import Path

from dnaprivacy.genotype import CODIS_LIKE_NAMES
from dnaprivacy.streams import stream

OUT = Path(__file__).resolve().parents[1] / "src" / "dnaprivacy" / "data" / "default_panel.csv"


def main():
    rng = stream(20200601, "default-panel")
    lines = ["locus,allele,frequency"]
    for name in CODIS_LIKE_NAMES:
        first = int(rng.integers(6, 15))
        p = rng.dirichlet([2.0] * 8)
        q = [Decimal(f"{x:.6f}") for x in p]
        q = [max(x, Decimal("0.000500")) for x in q]
        big = max(range(8), key=lambda i: q[i])
        q[big] += Decimal(1) - sum(q)
        assert sum(q) == 1 and all(x > 0 for x in q)
        for i, x in enumerate(q):
            lines.append(f"{name},{first + i},{x}")
    OUT.write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
