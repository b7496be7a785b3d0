"""Regenerate ``src/iconasim/data/geant.topo``.

The adjacency is a hand-made approximation of the GEANT PoP map (41 PoPs,
58 circuits). Only aggregate facts are known for the real circuits, so delays
are drawn uniformly from [10, 50] ms and capacities from {1, 10, 40, 100} Gbps
with a fixed seed, in link order.

    python scripts/make_geant.py > src/iconasim/data/geant.topo
"""

import random
import sys

SEED = 2015

POPS = [
    "London", "Amsterdam", "Frankfurt", "Paris", "Geneva", "Milan", "Vienna",
    "Prague", "Budapest", "Madrid", "Lisbon", "Dublin", "Copenhagen",
    "Stockholm", "Oslo", "Helsinki", "Tallinn", "Riga", "Kaunas", "Poznan",
    "Bratislava", "Ljubljana", "Zagreb", "Bucharest", "Sofia", "Athens",
    "Nicosia", "Valletta", "Luxembourg", "Brussels", "Hamburg", "Belgrade",
    "Podgorica", "Skopje", "Tirana", "Chisinau", "Reykjavik", "TelAviv",
    "Marseille", "Istanbul", "Moscow",
]

CIRCUITS = [
    (0, 1), (0, 3), (0, 11), (0, 29), (0, 36),
    (1, 2), (1, 12), (1, 29), (1, 30),
    (2, 3), (2, 4), (2, 7), (2, 28), (2, 30), (2, 6), (2, 19), (2, 40), (2, 37),
    (3, 4), (3, 9), (3, 28), (3, 38),
    (4, 5),
    (5, 6), (5, 27), (5, 25),
    (6, 7), (6, 8), (6, 20), (6, 21),
    (7, 19),
    (8, 20), (8, 22), (8, 23), (8, 31),
    (9, 10), (9, 38),
    (11, 36),
    (12, 13), (12, 14), (12, 30),
    (13, 15),
    (15, 16), (15, 40),
    (16, 17), (17, 18), (18, 19),
    (21, 22),
    (23, 24), (23, 35),
    (24, 25), (24, 39),
    (25, 26), (26, 37),
    (31, 32), (31, 33), (32, 34),
    (39, 25),
]


def main(out=sys.stdout):
    rng = random.Random(SEED)
    out.write("# GEANT-like fixture: 41 PoPs, %d circuits\n" % len(CIRCUITS))
    out.write("# delays ~ U[10,50] ms, capacities ~ {1,10,40,100} Gbps, seed %d\n" % SEED)
    out.write("# generated by scripts/make_geant.py\n")
    for i, name in enumerate(POPS):
        out.write(f"node {i} {name}\n")
    for a, b in CIRCUITS:
        delay = round(rng.uniform(10.0, 50.0), 1)
        cap = rng.choice((1, 10, 40, 100))
        out.write(f"link {a} {b} {delay} {cap}\n")


if __name__ == "__main__":
    main()
