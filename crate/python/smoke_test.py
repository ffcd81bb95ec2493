"""Smoke test for the fedhet extension module.

Build and run from the repository root:

    cargo build --release -p fedhet-py --features extension-module
    python3 python/smoke_test.py

The script copies the compiled library next to itself as ``fedhet.so`` when
it is not already importable.
"""

import math
import pathlib
import shutil
import sys

HERE = pathlib.Path(__file__).resolve().parent


def load():
    try:
        import fedhet
        return fedhet
    except ImportError:
        pass
    target = HERE.parent / "target"
    for profile in ("release", "debug"):
        built = target / profile / "libfedhet.so"
        if built.exists():
            shutil.copy(built, HERE / "fedhet.so")
            sys.path.insert(0, str(HERE))
            import fedhet
            return fedhet
    sys.exit("libfedhet.so not found; build fedhet-py first")


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    fh = load()

    a = fh.accumulation_vector("momentum", 3, 0.01, 0.5)
    assert all(close(x, y) for x, y in zip(a, [1.75, 1.5, 1.0])), a
    assert fh.extract_coefficients("sgd", 4, 0.1) == [1.0] * 4

    w, q, l1 = [0.5, 0.5], [0.5, 0.0], [1.0, 3.0]
    p = fh.probs_fedacs(w, q, l1)
    stats = fh.surrogate_stats(p, q, l1, w)
    assert all(close(x, 0.5) for x in stats["omega_eff"]), stats
    assert stats["chi_square"] <= 1e-12

    plain = fh.surrogate_stats(w, q, l1, w)
    assert close(plain["omega_eff"][1], 6.0 / 7.0)

    etas = fh.calibrate(1e-3, w, q, l1)
    assert close(etas["fedacs"], 1e-3 * 1.75 * 7.0 / 6.0)
    assert close(etas["ca-fedavg"], 0.875e-3)

    co = fh.codesign([0.5, 0.5], 0.01, 2.0, [2.0, 3.0])
    assert close(co["failure"][1], 0.34)

    inst = fh.achievability([1, 2], [0.0, 0.0], 1.0)
    assert close(inst["limit_grad_sq"], 1.0 / 9.0)

    assert "fig4-codesign" in fh.preset_names()
    runs = fh.simulate(preset="example2-static", replicates=2, rounds=3000, jobs=2)
    assert len(runs) == 4
    acs = [r for r in runs if r["algorithm"] == "fedacs"]
    assert all(len(r["dist_true"]) == 3000 for r in acs)
    assert all(r["dist_true"][-1] < r["dist_true"][0] for r in acs)

    try:
        fh.simulate(preset="nope")
    except ValueError as err:
        assert "nope" in str(err)
    else:
        raise AssertionError("unknown preset accepted")

    print("fedhet smoke test ok:", math.fsum(stats["omega_eff"]))


if __name__ == "__main__":
    main()
