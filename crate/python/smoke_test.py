"""Smoke test for the adapterlab_py extension module.

Build and install first, e.g. `maturin develop --release -m crates/python/Cargo.toml`,
or copy target/release/libadapterlab_py.so to adapterlab_py.so on PYTHONPATH.
"""

import json
import math
import os
import sys
import tempfile

import adapterlab_py as al


def main() -> int:
    texts = [
        "the crew measured the bridge and wrote the speed in knots",
        "a student wrote the price in dollars and the rent in euros",
        "the load was recorded in tons while the distance was in miles",
    ] * 20
    vocab = al.Vocabulary.train(texts, 200)
    ids = vocab.encode("the crew measured the speed")
    assert vocab.decode(ids).strip() == "the crew measured the speed", vocab.decode(ids)
    assert len(vocab) <= 200

    model = al.Model.new(len(vocab), num_layers=2, hidden=32, heads=4, ffn=64, seed=3, language_adapters=True)
    assert model.num_layers == 2 and model.hidden == 32
    plan = model.plan()
    assert plan["language"] == [1, 2] and plan["invertible"], plan
    full = model.embed(vocab, texts[:3])
    model.set_language_layers(0)
    assert model.plan()["language"] == []
    bare = model.embed(vocab, texts[:3])
    # fresh adapters are the identity, so switching them off changes nothing
    assert all(abs(a - b) < 1e-12 for u, v in zip(full, bare) for a, b in zip(u, v))
    assert all(abs(math.sqrt(sum(x * x for x in row)) - 1.0) < 1e-9 for row in full)

    hand = [[0.0], [3.0], [1.0], [1.2]]
    assert al.mean_average_precision_at_r(hand, ["A", "A", "B", "B"], "neg_euclidean") == 0.5
    p, r, f = al.f1_score([True, True, False, True], [True, False, True, True])
    assert abs(f - 2 / 3) < 1e-12 and p == r

    report = al.budget()
    comps = {c["name"]: c for c in report["components"]}
    assert comps["t_adapter_stack"]["parameters"] == 894_528
    assert abs(comps["l_adapter_stack"]["parameters"] / 7.39e6 - 1) < 0.02

    with tempfile.TemporaryDirectory() as out:
        path = os.path.join(out, "backbone.ckpt")
        model.save(path, "backbone")
        again = al.Model.compose(path)
        assert again.param_count() < model.param_count()
        assert al.run_cli(["--out", out, "budget", "--paper-scale"]) == 0
        with open(os.path.join(out, "report.json")) as fh:
            assert json.load(fh)["command"] == "budget"
        assert al.run_cli(["--out", out, "no-such-command"]) == 2

    try:
        al.mean_average_precision_at_r([[1.0], [2.0]], ["A", "B"])
    except ValueError as e:
        assert "A" in str(e) or "B" in str(e), e
    else:
        raise AssertionError("singleton classes must be rejected")

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
