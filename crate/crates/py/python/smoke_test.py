"""Smoke test for the p4qs extension module.

Build the module first, e.g. `maturin develop -m crates/py/Cargo.toml`, or
copy `target/release/libp4qs.so` to `p4qs.so` somewhere on PYTHONPATH.
"""

import json
import math
import pathlib
import sys

import p4qs

ROOT = pathlib.Path(__file__).resolve().parents[3]
WIRE = ROOT / "crates" / "core" / "tests" / "golden" / "wire"


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    check(p4qs.geo_hash(13.4, 52.5) == 13.4 + 52.5, "geo_hash is lon + lat")
    check(p4qs.zone_side(1.0, 1.0) == "low_longitude", "zone tie goes low")
    check(p4qs.zone_side(5.0, 1.0) == "high_longitude", "zone side by sign")

    p = p4qs.ownership_probability(10, 5, 3, 100)
    mc = p4qs.ownership_probability_mc(10, 5, 3, 100, trials=20_000, seed=3)
    check(abs(p - mc) < 0.02, f"analytic {p:.4f} vs monte carlo {mc:.4f}")
    check(p4qs.ownership_probability(10, 0, 3, 100) == 1.0, "no exchange keeps every ticket")

    ov = p4qs.Overlay(64, seed=5)
    check(len(ov) == 64, "overlay size")
    ring = ov.peers()
    for key in (-250.0, -3.5, 0.0, 66.0, 269.0):
        best = min(ring, key=lambda r: (abs(r[1] - key), r[1]))[0]
        check(ov.lookup(key) == best, f"lookup {key} matches brute force")
    check(ov.route_hops(ring[0][0], 100.0) <= math.ceil(math.log2(64)) + 1, "route length bound")

    store = p4qs.PoiStore.generate(7, 500)
    again = p4qs.PoiStore.from_fixture(store.to_fixture())
    check(len(again) == 500, "POI fixture round trip")
    nid = store.nearest("cafe", 13.4, 52.5)
    if nid is not None:
        lon, lat, cat, _ = store.get(nid)
        check(cat == "cafe", "nearest returns the asked category")

    if WIRE.is_dir():
        for f in sorted(WIRE.glob("*.bin")):
            data = f.read_bytes()
            check(p4qs.reencode(data) == data, f"{f.name} re-encodes byte for byte")
        kind = p4qs.message_kind((WIRE / "query.bin").read_bytes())
        check(kind == 1, "query kind tag")

    reports = json.loads(p4qs.run(preset="DUSQ", seeds=[1]))
    r = reports[0]
    check(r["min_anonymity_set"] >= 4, "every batch has at least K members")
    check(r["queries_completed"] > 0, "queries complete")
    check(p4qs.run(preset="DUSQ", seeds=[1]) == p4qs.run(preset="DUSQ", seeds=[1]), "deterministic reruns")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
