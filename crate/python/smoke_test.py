"""Smoke test for the selfnpo Python extension.

Build and install first, e.g.

    cd crates/py && maturin build --release -o dist && pip install dist/*.whl

then run `python python/smoke_test.py`.
"""

import json
import math
import os
import random
import tempfile

import selfnpo


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    sched = selfnpo.NoiseSchedule(1000)
    assert sched.alpha(0) == 1.0 and sched.sigma(0) == 0.0
    assert abs(sched.alpha(500) ** 2 + sched.sigma(500) ** 2 - 1.0) < 1e-12

    # Tweedie on the exact score equals the posterior mean.
    ring = selfnpo.GaussianMixture.ring()
    rng = random.Random(0)
    for _ in range(50):
        t = rng.randint(1, 1000)
        x = [rng.uniform(-2, 2), rng.uniform(-2, 2)]
        score = ring.marginal_score(sched, x, t)
        assert close(selfnpo.tweedie_x0(x, score, sched, t), ring.posterior_mean(sched, x, t), 1e-10)

    # Guidance on unit normals has variance 2w^2 + 2w + 1.
    omega, n = 1.0, 50_000
    vals = [selfnpo.cfg_combine([rng.gauss(0, 1)], [rng.gauss(0, 1)], omega)[0] for _ in range(n)]
    var = sum(v * v for v in vals) / n
    assert abs(var - 5.0) < 0.15, var

    # Corrected re-noising from t to itself is the identity.
    x = [0.3, -0.7]
    assert close(selfnpo.renoise_corrected(x, sched, 400, 400, [1.0, 1.0]), x, 1e-15)

    base, first, last = selfnpo.train_base(ring, sched, iterations=150, batch_size=128, seed=1)
    assert last < first, (first, last)

    cond = [i % 8 for i in range(32)]
    samples, nfe = selfnpo.sample(base, sched, cond, k=10, omega=2.0, seed=3)
    assert nfe == 20 and len(samples) == 32
    again, _ = selfnpo.sample(base, sched, cond, k=10, omega=2.0, seed=3)
    assert again == samples
    _, nfe0 = selfnpo.sample(base, sched, cond, k=10, omega=0.0, seed=3)
    assert nfe0 == 10

    tuned, losses, gen_nfe, train_nfe = selfnpo.self_npo_train(
        base, ring, sched, iterations=4, batch_size=8, seed=2
    )
    assert len(losses) == 4 and all(math.isfinite(v) for v in losses)
    assert gen_nfe == 5 * 2 * 8 * 4 and train_nfe == 8 * 4
    assert tuned.max_abs_diff(base) > 0.0

    neg = selfnpo.mix_negative(base, tuned, beta=1.0)
    assert neg.max_abs_diff(tuned) < 1e-12
    assert selfnpo.mix_negative(base, tuned, beta=0.0).max_abs_diff(base) == 0.0

    guided, _ = selfnpo.sample(base, sched, cond, k=10, neg=neg, seed=3)
    r_guided = selfnpo.rewards(ring, guided, cond)
    r_vanilla = selfnpo.rewards(ring, samples, cond)
    ratio = selfnpo.winning_ratio(r_guided, r_vanilla)
    assert 0.0 <= ratio <= 1.0
    assert selfnpo.winning_ratio(r_vanilla, r_vanilla) == 0.5
    assert selfnpo.kl_histogram(samples, samples) == 0.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "base.json")
        digest = base.save(path)
        assert len(digest) == 64
        assert selfnpo.ScoreNet.load(path).max_abs_diff(base) == 0.0
        manifest = selfnpo.run_cli(
            ["sample", "--base-ckpt", path, "--set", "n=16", "--set", "k=5", "--out", os.path.join(d, "s")]
        )
        with open(manifest) as f:
            m = json.load(f)
        assert m["command"] == "sample" and m["nfe"]["sampling"] == 16 * 10

    try:
        selfnpo.run_cli(["sample", "--base-ckpt", "/does/not/exist.json"])
    except ValueError as e:
        assert "does not exist" in str(e)
    else:
        raise AssertionError("missing checkpoint accepted")

    print(f"python smoke test passed (winning ratio on an undertrained base: {ratio:.3f})")


if __name__ == "__main__":
    main()
