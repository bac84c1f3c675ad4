import json
import math

import numpy as np
import pytest

import patchpu


def test_loss_examples():
    ln2 = math.log(2.0)
    assert abs(patchpu.ce_loss([1, 0], [0.5, 0.9]) - ln2) < 1e-9
    assert abs(patchpu.bce_loss([1, 0], [0, 1], [0.5, 0.5]) - 2 * ln2) < 1e-9
    assert abs(patchpu.an_loss([1, 0, 0], [0.5, 0.5, 0.5]) - 3 * ln2) < 1e-9
    assert abs(patchpu.wn_loss([1, 0], [0, 0.5], [0.5, 0.5]) - 1.5 * ln2) < 1e-9
    assert abs(patchpu.epr_loss([1, 0], [0.5, 0.5], k=1.38) - (ln2 + 0.38**2)) < 1e-9


def test_batch_loss_and_identities():
    rng = np.random.default_rng(0)
    y = rng.uniform(0.05, 0.95, size=(3, 4))
    z = np.zeros((3, 4))
    z[np.arange(3), [0, 2, 1]] = 1
    assert patchpu.wn_loss(z, np.zeros_like(z), y) == patchpu.ce_loss(z, y)
    assert patchpu.wn_loss(z, 1 - z, y) == patchpu.an_loss(z, y)
    per_image = sum(patchpu.ce_loss(z[i], y[i]) for i in range(3))
    assert patchpu.ce_loss(z, y) == per_image


def test_errors_map_to_python_exceptions():
    with pytest.raises(ValueError):
        patchpu.an_loss([1, 0], [0.5, 0.5], lam=-1)
    with pytest.raises(ValueError):
        patchpu.cosine_similarity([0, 0], [1, 0])


def test_negative_estimation():
    zt, beta = patchpu.estimate_negatives(np.array([[1.0, 0.0], [0.8, 0.6], [-0.2, math.sqrt(0.96)]]), [1, 0, 0])
    assert zt[0] == 0
    assert abs(zt[1] - 0.8) < 1e-12
    assert zt[2] == 0
    assert np.allclose(beta, beta.T)


def test_metrics():
    assert abs(patchpu.average_precision([0.9, 0.8, 0.7], [1, 0, 1]) - (1 + 2 / 3) / 2) < 1e-12
    assert patchpu.average_precision([0.1, 0.2], [0, 0]) is None
    report = patchpu.mean_average_precision(np.eye(3), np.eye(3), ["a", "b", "c"])
    assert report["mAP"] == 1.0


def test_patch_count():
    assert patchpu.expected_patch_count(640, 640) == 129
    patches, origins = patchpu.extract_patches(np.zeros((128, 128, 3)))
    assert patches.shape == (5, 64, 64, 3)
    assert origins[0] == (0, 0, 0)


def test_end_to_end(tmp_path):
    data = {"num_labels": 3, "train_images": 16, "val_images": 8, "shapes_per_image_range": [1, 2], "seed": 4}
    manifests = patchpu.gen_data(data, tmp_path / "data")
    config = {
        "loss": "wn",
        "epochs": 1,
        "batch_size": 8,
        "train_manifest": manifests["train"],
        "val_manifest": manifests["val"],
        "output_dir": str(tmp_path / "run"),
        "embedder": {"embedding_dim": 8, "blocks": [{"kind": "conv", "out_channels": 4, "stride": 4},
                                                    {"kind": "conv", "out_channels": 4, "stride": 4}]},
        "mlp_hidden": 8,
    }
    config_path = tmp_path / "train.json"
    config_path.write_text(json.dumps(config))
    log = patchpu.train(str(config_path))
    assert len(log["steps"]) == 2
    report = patchpu.evaluate(log["checkpoint"], manifests["val"])
    assert 0.0 <= report["mAP"] <= 1.0
    with open(manifests["val"]) as f:
        item = json.load(f)["items"][0]
    image = tmp_path / "data" / "val" / item["image"]
    label = item["positives"][0]
    loc = patchpu.localize(log["checkpoint"], image, label, tmp_path / "loc")
    assert loc["csv"].endswith(".csv")
    with open(loc["csv"]) as f:
        assert len(f.read().strip().splitlines()) == 1 + 5
    with pytest.raises(KeyError):
        patchpu.localize(log["checkpoint"], image, "unicorn", tmp_path / "loc")
