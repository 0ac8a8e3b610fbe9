"""Smoke test for the compiled lorasc_py module.

Build it first, e.g. `maturin develop` from crates/python, then run this file.
"""

import os
import tempfile

import lorasc_py as L


def main():
    p = L.LoraPair([[3.0, 4.0]], [[1.0], [2.0]])
    assert p.delta() == [[3.0, 4.0], [6.0, 8.0]]
    assert L.effective_rank([[1.0, 2.0], [2.0, 4.0]]) == 1

    with tempfile.TemporaryDirectory() as tmp:
        cfg = L.Config(overrides={"run.out": tmp, "cascade.epochs": 2})
        print(cfg)
        [run] = L.train(cfg)
        print("val loss", run["final_val_loss"])
        for r in L.rank(run["checkpoint"]):
            print(r["target"], "effective rank", r["effective_rank"])
        assert os.path.exists(run["metrics"])

        try:
            L.Config(overrides={"cascade.alpha": 2})
        except L.ConfigError as e:
            print("rejected:", e)
        else:
            raise SystemExit("alpha 2 was accepted")
    print("ok")


if __name__ == "__main__":
    main()
