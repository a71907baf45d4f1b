import time

import numpy as np
import pytest

from xpose.datasets import make_synthetic_shapes
from xpose.graph import ModelGraph
from xpose.layers import AvgPoolGlobal, BatchNorm, Conv2d, Dense, Flatten, MaxPool, ReLU, Residual
from xpose.zoo import TrainConfig, accuracy, build_zoo, train

CRITERIA = []
TIMINGS = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def tiny_model(seed=0, size=8, channels=2, classes=3, name="tiny"):
    """Small net with every layer kind, BN moments randomised."""
    layers = [
        Conv2d("c1", 4, 3, 1, 1), BatchNorm("bn"), ReLU("r1"), MaxPool("p1", 2),
        Residual("res", [Conv2d("res.c", 4, 3, 1, 1), ReLU("res.r")]),
        Conv2d("c2", 5, 3, 2, 0), AvgPoolGlobal("gap"), Flatten("flat"), Dense("fc", classes),
    ]  # fmt: skip
    model = ModelGraph(name, (size, size, channels, classes), layers, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    bn = next(layer for layer in model.iter_layers() if layer.kind == "batchnorm")
    c = bn.params["gamma"].shape[0]
    bn.params.update(
        running_mean=(rng.normal(size=c) * 0.1).astype(np.float32),
        running_var=rng.uniform(0.5, 2, c).astype(np.float32),
        gamma=rng.uniform(0.5, 2, c).astype(np.float32),
        beta=(rng.normal(size=c) * 0.1).astype(np.float32),
    )
    return model


def linear_model(weight, bias=None, shape=(4, 4, 1), name="linear"):
    """Flatten + Dense with the given ``(d, classes)`` weight."""
    weight = np.asarray(weight, dtype=np.float32)
    model = ModelGraph(name, (*shape, weight.shape[1]), [Flatten("flat"), Dense("fc", weight.shape[1])])
    model.set_parameter("fc.weight", weight)
    if bias is not None:
        model.set_parameter("fc.bias", np.asarray(bias, dtype=np.float32))
    return model


@pytest.fixture(scope="session")
def shapes_data():
    return make_synthetic_shapes(2000, 500, seed=0)


@pytest.fixture(scope="session")
def trained_zoo(shapes_data):
    """The four zoo models trained with the default schedule."""
    start = time.perf_counter()
    zoo = build_zoo((32, 32, 3, 10), seed=0)
    for i, model in enumerate(zoo):
        train(model, shapes_data.X_train, shapes_data.y_train, TrainConfig(seed=i))
    TIMINGS["zoo_training"] = time.perf_counter() - start
    TIMINGS["zoo_built_at"] = time.time()
    TIMINGS["zoo_accuracy"] = {m.name: accuracy(m, shapes_data.X_test, shapes_data.y_test) for m in zoo}
    return zoo


@pytest.fixture(scope="session")
def quick_model(shapes_data):
    """A plain model trained briefly; enough signal for protocol tests."""
    from xpose.zoo import build_model

    model = build_model("plain", (32, 32, 3, 10), seed=3, name="quick")
    train(model, shapes_data.X_train[:600], shapes_data.y_train[:600], TrainConfig(epochs=2, seed=3))
    return model
