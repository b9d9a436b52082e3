"""Smoke test for the gpumux Python bindings.

Build and install first:  pip install --no-build-isolation -e crates/py
"""

import json
import pathlib
import tempfile

import gpumux_py as g

ROOT = pathlib.Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"


def main() -> None:
    cat = g.catalog()
    assert len(cat) == 8, cat
    by_name = {m.name: m for m in cat}
    assert by_name["ResNet-50"].knee_pct == 40

    knees = [g.analytic_knee(n1) for n1 in (20, 40, 60)]
    assert knees == sorted(knees) and len(set(knees)) == 3, knees

    prof = g.ProfileSet.catalog()
    assert "Mobilenet" in prof.models()
    assert prof.latency("Mobilenet", 100, 1) <= prof.latency("Mobilenet", 10, 1)
    point = prof.optimize("Mobilenet", 50.0, 2079.0)
    assert point is not None and point["provisioned_pct"] >= point["gpu_pct"], point

    pair = [by_name["ResNet-50"], by_name["VGG-19"]]
    plan = g.dstack_schedule(pair)
    assert {r["model"] for r in plan["runs"]} == {"ResNet-50", "VGG-19"}
    assert 0 < plan["utilization"] <= 100
    assert g.temporal_schedule(pair)["utilization"] <= plan["utilization"] + 1e-9

    assert abs(sum(g.static_spatial([40, 50, 30])) - 100) < 1e-9
    assert sum(g.wmax_min([40, 50, 30])) <= 100 + 1e-9
    seven = [by_name[n] for n in ("Alexnet", "Mobilenet", "ResNet-50", "VGG-19", "ResNet-18", "Inception", "ResNeXt-50")]
    try:
        g.dstack_schedule(seven)
        raise AssertionError("catalog batches of seven models cannot fit one session")
    except OverflowError:
        pass

    rows = g.ideal_compare((SCENARIOS / "convnet_trio.json").read_text())
    util = {r["scheduler"]: r["utilization"] for r in rows}
    assert util["ideal"] >= util["dstack"] >= util["temporal"], util

    sc = g.Scenario.load(str(SCENARIOS / "c2_dstack.json"))
    sc.seed = 3
    m = sc.run()
    assert m.throughput > 0 and m.miss_fraction < 0.01
    again = g.Scenario.from_json(sc.to_json()).run()
    assert again.to_dict() == m.to_dict(), "same seed must reproduce"
    many = g.run_many([sc, sc], jobs=2)
    assert [x.throughput for x in many] == [m.throughput] * 2

    with tempfile.TemporaryDirectory() as d:
        out = pathlib.Path(d) / "metrics.csv"
        m.write_csv(str(out))
        assert "ResNet-50" in out.read_text()

    print(json.dumps({"c2_throughput": round(m.throughput, 1), "ideal_rows": len(rows)}))
    print("smoke test ok")


if __name__ == "__main__":
    main()
