"""Smoke test for the dmwa extension module.

Build and install first:
    pip install --no-build-isolation ./crates/py
"""

import math
import tempfile

import dmwa


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    assert close(dmwa.kl_divergence([0.5, 0.5], [0.5, 0.5]), 0.0)
    assert close(dmwa.cosine_similarity([1.0, 0.0], [0.0, 2.0]), 0.0)
    assert close(sum(dmwa.softmax([1.0, 2.0, 3.0])), 1.0)

    assert dmwa.apply_threshold([0.3, 0.9], 0.5, "literal") == [1.0, math.exp(0.9) - 1.0]
    assert close(dmwa.batch_threshold([0.2, 0.4]), 0.3)
    assert dmwa.final_weights([0.5, 1.0], [2.0, 0.25]) == [1.0, 0.25]

    same = [[[0.1, 0.2, 0.3], [0.0, 1.0, -1.0]], [[0.5, 0.5, 0.0], [2.0, 0.0, 1.0]]]
    assert all(close(s, 0.0) for s in dmwa.local_alignment_scores(same, same))

    assert close(dmwa.triplet_original([0.0], [1.0], [3.0], 0.3), 0.0)
    assert close(dmwa.triplet_domain([0.0], [2.0], [1.0], 0.5), 1.5)

    report = dmwa.rank_and_score([[0.9, 0.1, 0.5]], [1], [1, 0, 1], [2])
    assert close(report["map_all"], 1.0)
    assert close(report["prec@2"], 1.0)

    with tempfile.TemporaryDirectory() as tmp:
        sizes = dmwa.generate_dataset(tmp + "/data", seed=3, corruption_rate=0.2)
        assert sizes == {"train": 480, "corrupted": 96, "queries": 40, "gallery": 100}, sizes
        config = "d = 16\nlayers = 1\nheads = 2\nd_text = 16\nepochs = 1\nbatch_size = 8\nscore_mode = fast\n"
        losses = dmwa.train_model(tmp + "/data", config, tmp + "/run")
        assert len(losses) == 1 and math.isfinite(losses[0])
        metrics = dmwa.evaluate(tmp + "/data", tmp + "/run/checkpoints/epoch_000", config)
        assert 0.0 <= metrics["map_all"] <= 1.0

    print("smoke test passed")


if __name__ == "__main__":
    main()
