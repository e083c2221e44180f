import numpy as np
import pytest

from cafnet.checkpoint import Checkpoint
from cafnet.data.manifest import ManifestError, PatchManifest
from cafnet.networks import SpecMismatchError, architecture, build_network
from cafnet.training import TrainConfig, finetune, metrics_to_csv, normalize_patches, train

SMALL = dict(unit_channels=(2, 4))


def small_net(tag="ca3", n=3, seed=0):
    return build_network(architecture(tag, **SMALL), n, seed)


def test_normalize_patches_removes_mean():
    x = np.random.default_rng(0).random((3, 1, 4, 4)) + 2
    out = normalize_patches(x)
    np.testing.assert_allclose(out.mean(axis=(1, 2, 3)), 0, atol=1e-15)
    np.testing.assert_allclose(out - x, (out - x)[:, :, :1, :1] * np.ones((1, 1, 4, 4)))


def test_train_logs_and_selects_best(tiny_dataset):
    _, m = tiny_dataset
    cfg = TrainConfig(max_iterations=6, eval_interval=2, batch_size=8, early_stopping=False)
    result = train(small_net(), m, cfg)
    assert [r["iteration"] for r in result.metrics] == [2, 4, 6]
    best = max(result.metrics, key=lambda r: r["val_accuracy"])
    assert result.best_val_accuracy == best["val_accuracy"]
    assert result.best_iteration == min(r["iteration"] for r in result.metrics if r["val_accuracy"] == best["val_accuracy"])
    assert result.checkpoint.metadata["best_iteration"] == result.best_iteration
    assert metrics_to_csv(result.metrics).splitlines()[0] == "iteration,lr,train_loss,val_accuracy"


def test_training_is_deterministic(tiny_dataset):
    _, m = tiny_dataset
    cfg = TrainConfig(max_iterations=4, eval_interval=2, batch_size=8, seed=3)
    a, b = train(small_net(seed=3), m, cfg), train(small_net(seed=3), m, cfg)
    assert a.metrics == b.metrics
    assert all(np.array_equal(a.checkpoint.params[k], b.checkpoint.params[k]) for k in a.checkpoint.params)


def test_early_stopping(tiny_dataset):
    _, m = tiny_dataset
    cfg = TrainConfig(max_iterations=400, eval_interval=1, patience=2, batch_size=8, base_lr=1e-12)
    result = train(small_net(), m, cfg)
    assert result.stopped_early and result.iterations_run < 400


def test_zero_iterations_returns_initial_state(tiny_dataset):
    _, m = tiny_dataset
    net = small_net()
    before = {k: v.copy() for k, v in net.parameters().items()}
    result = train(net, m, TrainConfig(max_iterations=0))
    assert result.metrics == [] and all(np.array_equal(before[k], result.checkpoint.params[k]) for k in before)


def test_train_rejects_bad_inputs(tiny_dataset):
    _, m = tiny_dataset
    with pytest.raises(ValueError, match="outputs"):
        train(small_net(n=2), m, TrainConfig(max_iterations=1))
    empty_val = PatchManifest([e for e in m.entries if e.split != "val"], m.labels, m.root)
    with pytest.raises(ManifestError, match="validation"):
        train(small_net(), empty_val, TrainConfig(max_iterations=1))
    no_class = PatchManifest([e for e in m.entries if not (e.label == "device_2" and e.split == "train")], m.labels, m.root)
    with pytest.raises(ManifestError, match="device_2"):
        train(small_net(), no_class, TrainConfig(max_iterations=1))


def test_finetune_new_head_keeps_backbone(tiny_dataset):
    _, m = tiny_dataset
    src = small_net("caf")
    ckpt = Checkpoint.from_network(src, m.labels)
    two = m.subset(["device_0", "device_1"])
    result = finetune(ckpt, two, TrainConfig(max_iterations=0))
    params = result.checkpoint.params
    assert params["head.weight"].shape == (2, src.head.n_inputs)
    for name, value in ckpt.params.items():
        if not name.startswith("head."):
            assert np.array_equal(params[name], value), name
    assert result.checkpoint.metadata["head_reinitialized"] is True


def test_finetune_same_labels_keeps_head(tiny_dataset):
    _, m = tiny_dataset
    ckpt = Checkpoint.from_network(small_net("ca5"), m.labels)
    result = finetune(ckpt, m, TrainConfig(max_iterations=0))
    assert np.array_equal(result.checkpoint.params["head.weight"], ckpt.params["head.weight"])
    with pytest.raises(SpecMismatchError):
        finetune(ckpt, m, TrainConfig(max_iterations=0), spec=architecture("ca3", **SMALL))


def test_finetune_nine_to_three_classes(tiny_dataset):
    _, m = tiny_dataset
    src = build_network(architecture("caf", **SMALL), 9, seed=1)
    ckpt = Checkpoint.from_network(src, [f"k{i}" for i in range(9)])
    result = finetune(ckpt, m, TrainConfig(max_iterations=0))
    assert result.checkpoint.params["head.weight"].shape == (3, src.head.n_inputs)
    full = build_network(architecture("caf"), 9)
    assert full.head.weights.shape == (9, 384)
    assert all(np.array_equal(result.checkpoint.params[k], v) for k, v in ckpt.params.items() if not k.startswith("head."))


def test_finetune_zero_iterations_same_classes_is_identity(tiny_dataset):
    _, m = tiny_dataset
    ckpt = Checkpoint.from_network(small_net("ca3", seed=4), m.labels)
    result = finetune(ckpt, m, TrainConfig(max_iterations=0))
    assert all(np.array_equal(result.checkpoint.params[k], v) for k, v in ckpt.params.items())
    assert all(np.array_equal(result.checkpoint.buffers[k], v) for k, v in ckpt.buffers.items())
