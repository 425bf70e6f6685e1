import numpy as np
import pytest

from fedbench.nn import Batch, LayerSpec, ModelSpec, init_params, model_forward


def make_model(kinds, input_dim=5, hidden=6, num_classes=3, groups=2):
    """dense -> [norm] -> relu -> dense -> softmax head, per requested kinds."""
    layers = [LayerSpec(kind="dense", width=hidden)]
    for kind in kinds:
        layers.append(LayerSpec(kind=kind, groups=groups))
    layers += [
        LayerSpec(kind="relu"),
        LayerSpec(kind="dense", width=num_classes),
        LayerSpec(kind="softmax_ce_head"),
    ]
    return ModelSpec(input_dim=input_dim, layers=layers, loss="cross_entropy",
                     num_classes=num_classes)


def random_batch(spec, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, spec.input_dim))
    y = rng.integers(0, spec.num_classes, n)
    return Batch.from_arrays(x, y)


def finite_difference_grads(loss_fn, params, names=None, h=1e-5):
    """Central finite differences of a scalar loss over ParamSet entries."""
    grads = {}
    names = names if names is not None else params.trainable_names()
    for name in names:
        arr = params.entries[name]
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(params)
            flat[i] = orig - h
            down = loss_fn(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4):
    for name, num in numeric.items():
        ana = analytic[name]
        scale = np.maximum(np.abs(num), 1e-3)
        err = np.max(np.abs(ana - num) / scale)
        assert err <= rtol, f"{name}: max relative error {err:.3g}"


@pytest.fixture
def bn_model():
    return make_model(["batch_norm"])


@pytest.fixture
def seeded_params(bn_model):
    return init_params(bn_model, seed=0)


def forward_loss(spec, batch, mode="train"):
    def loss_fn(params):
        _, loss, _ = model_forward(spec, params, batch, mode=mode)
        return loss
    return loss_fn
