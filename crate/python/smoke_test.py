"""Smoke test for the `consult` extension module.

Install with `pip install --no-build-isolation -e crates/py`, then run
`python python/smoke_test.py`.
"""

import math

import consult


def close(a, b, tol=5e-4):
    return abs(a - b) <= tol


def main():
    suite = consult.Suite.bundled()
    assert len(suite) >= 5, suite.case_ids
    print("cases:", ", ".join(suite.case_ids))

    cfg = consult.Config()
    assert consult.Config(cfg.to_toml()).hash == cfg.hash
    try:
        consult.Config("[stabilizer]\nlambda = 0.95\n")
        raise AssertionError("lambda outside [0.7, 0.9] accepted")
    except ValueError:
        pass

    prf = consult.event_prf(91, 16, 19)
    assert close(prf["f1"], 0.8387), prf
    e2e = consult.end_to_end_metrics([{
        "covered_items": 150, "gold_items": 180,
        "structural_hits": 114, "structural_slots": 140,
        "risks_closed": 48, "gold_risks": 60,
        "redundant_prompts": 15, "prompts": 95, "t_goal": None,
    }])
    assert e2e["coverage"]["hits"] == 150 and close(e2e["coverage"]["rate"], 0.833)

    assert consult.entropy([0.5, 0.5]) == 1.0
    p = consult.temperature_scale([2.0, 1.0, 0.0], 1.5)
    assert math.isclose(sum(p), 1.0)
    eig = consult.estimate_eig([0.7, 0.3], [[0.9, 0.2], [0.1, 0.8]], seed=1, mc_samples=4096)
    assert -0.5 * eig["v"] <= eig["eig"] <= eig["h0"]

    session = consult.Session(suite, "acs_01", seed=3)
    update = session.push_text("chest feels tight since this morning")
    assert update["turn"] == 1 and update["utterances"]
    assert math.isclose(sum(update["belief"]["smoothed"]), 1.0)
    snap = session.snapshot()
    assert snap["belief"] == update["belief"]["smoothed"]
    print("turn 1 selected:", update["selected"]["action"]["action_id"])

    run = consult.run_case(suite, "gerd_01", seed=11)
    assert run["concluded"], run["outcome"]
    verdict = consult.replay(run["trace_jsonl"], suite)
    assert verdict["matches"], verdict
    print("gerd_01 outcome:", run["outcome"])

    reports = consult.evaluate(suite, "B,D", cfg)
    for r in reports:
        cov = r["end_to_end"]["coverage"]
        print(f'{r["baseline"]}: coverage {cov["hits"]}/{cov["total"]} = {cov["rate"]:.3f}')

    rows = consult.ablate(suite, "punctuation")
    assert [r["setting"] for r in rows] == ["none", "pause_only", "pause_lexical", "full"]

    print("smoke test passed")


if __name__ == "__main__":
    main()
