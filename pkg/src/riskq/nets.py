"""Function approximators for continuous-state estimation: Gaussian RBF
networks with fixed centers and a linear read-out per action, small tanh
MLPs with one output head per action, and a per-timestep router that gives
each horizon step its own net.  All of them train by single gradient steps
toward a supplied target (squared-error loss on one action head).
"""

from __future__ import annotations

import numpy as np
from scipy.cluster.vq import kmeans2

__all__ = [
    "RbfNet",
    "MlpNet",
    "TimeIndexedNet",
    "place_rbf_centers",
    "save_net",
    "load_net",
]

_FORMAT_VERSION = 1


class RbfNet:
    """Gaussian radial basis network.

    Prediction for action ``a`` is ``w[:, a] . phi(x) + b[a]`` with
    ``phi_i(x) = exp(-||s(x) - c_i||^2 / (2 sigma_i^2))`` over scaled inputs
    ``s(x) = (x - offset) / scale``.  Centers and widths are fixed after
    placement; training touches only the read-out weights and biases.
    """

    def __init__(self, centers: np.ndarray, widths, n_actions: int,
                 offset=None, scale=None):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        widths = np.broadcast_to(np.asarray(widths, dtype=float),
                                 (self.centers.shape[0],)).copy()
        if (widths <= 0).any():
            raise ValueError("widths must be positive")
        self.widths = widths
        self.n_actions = int(n_actions)
        d = self.centers.shape[1]
        self.offset = np.zeros(d) if offset is None else np.asarray(offset, dtype=float)
        self.scale = np.ones(d) if scale is None else np.asarray(scale, dtype=float)
        self.w = np.zeros((self.centers.shape[0], n_actions))
        self.b = np.zeros(n_actions)

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]

    def _scaled(self, x: np.ndarray) -> np.ndarray:
        return (x - self.offset) / self.scale

    def features(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.input_dim,):
            raise ValueError(f"expected input of dimension {self.input_dim}, got {x.shape}")
        d2 = ((self._scaled(x) - self.centers) ** 2).sum(axis=1)
        return np.exp(-d2 / (2.0 * self.widths ** 2))

    def predict(self, x, action: int) -> float:
        return float(self.features(x) @ self.w[:, action] + self.b[action])

    def predict_all(self, x) -> np.ndarray:
        """All action heads at once (one feature evaluation)."""
        return self.features(x) @ self.w + self.b

    def predict_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s = (X - self.offset) / self.scale
        d2 = ((s[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        phi = np.exp(-d2 / (2.0 * self.widths ** 2))
        return phi @ self.w + self.b

    def train_step(self, x, action: int, target: float, rate: float) -> None:
        """One gradient-descent step on the squared error of one head."""
        if rate == 0.0:
            return
        phi = self.features(x)
        err = float(phi @ self.w[:, action] + self.b[action]) - float(target)
        self.w[:, action] -= rate * err * phi
        self.b[action] -= rate * err

    # -- gradient-check support -----------------------------------------
    def get_params(self) -> np.ndarray:
        return np.concatenate([self.w.ravel(), self.b])

    def set_params(self, theta: np.ndarray) -> None:
        k = self.w.size
        self.w = theta[:k].reshape(self.w.shape).copy()
        self.b = theta[k:].copy()

    def loss(self, x, action: int, target: float) -> float:
        return 0.5 * (self.predict(x, action) - float(target)) ** 2

    def loss_gradient(self, x, action: int, target: float) -> np.ndarray:
        phi = self.features(x)
        err = float(phi @ self.w[:, action] + self.b[action]) - float(target)
        gw = np.zeros_like(self.w)
        gb = np.zeros_like(self.b)
        gw[:, action] = err * phi
        gb[action] = err
        return np.concatenate([gw.ravel(), gb])

    def _state(self) -> dict:
        return {
            "type": "rbf", "centers": self.centers, "widths": self.widths,
            "offset": self.offset, "scale": self.scale, "w": self.w, "b": self.b,
        }


class MlpNet:
    """One-hidden-layer tanh perceptron with a linear head per action.

    Training a single head backpropagates through the shared hidden layer,
    so other heads move only through the shared representation.
    """

    def __init__(self, input_dim: int, n_actions: int, hidden: int = 20,
                 rng: np.random.Generator | None = None,
                 offset=None, scale=None):
        rng = rng or np.random.default_rng(0)
        self.input_dim = int(input_dim)
        self.n_actions = int(n_actions)
        self.hidden = int(hidden)
        self.offset = np.zeros(input_dim) if offset is None else np.asarray(offset, dtype=float)
        self.scale = np.ones(input_dim) if scale is None else np.asarray(scale, dtype=float)
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(input_dim), (input_dim, hidden))
        self.b1 = np.zeros(hidden)
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, n_actions))
        self.b2 = np.zeros(n_actions)

    def _scaled(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.offset) / self.scale

    def _forward(self, x):
        s = self._scaled(x)
        h = np.tanh(s @ self.w1 + self.b1)
        return s, h, h @ self.w2 + self.b2

    def predict(self, x, action: int) -> float:
        return float(self._forward(x)[2][action])

    def predict_all(self, x) -> np.ndarray:
        return self._forward(x)[2]

    def predict_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s = (X - self.offset) / self.scale
        h = np.tanh(s @ self.w1 + self.b1)
        return h @ self.w2 + self.b2

    def train_step(self, x, action: int, target: float, rate: float) -> None:
        if rate == 0.0:
            return
        s, h, out = self._forward(x)
        err = float(out[action]) - float(target)
        dh = err * self.w2[:, action] * (1.0 - h ** 2)
        self.w2[:, action] -= rate * err * h
        self.b2[action] -= rate * err
        self.w1 -= rate * np.outer(s, dh)
        self.b1 -= rate * dh

    # -- gradient-check support -----------------------------------------
    def get_params(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def set_params(self, theta: np.ndarray) -> None:
        i = 0
        for name in ("w1", "b1", "w2", "b2"):
            arr = getattr(self, name)
            setattr(self, name, theta[i:i + arr.size].reshape(arr.shape).copy())
            i += arr.size

    def loss(self, x, action: int, target: float) -> float:
        return 0.5 * (self.predict(x, action) - float(target)) ** 2

    def loss_gradient(self, x, action: int, target: float) -> np.ndarray:
        s, h, out = self._forward(x)
        err = float(out[action]) - float(target)
        dh = err * self.w2[:, action] * (1.0 - h ** 2)
        gw1 = np.outer(s, dh)
        gb1 = dh
        gw2 = np.zeros_like(self.w2)
        gw2[:, action] = err * h
        gb2 = np.zeros_like(self.b2)
        gb2[action] = err
        return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])

    def _state(self) -> dict:
        return {
            "type": "mlp", "offset": self.offset, "scale": self.scale,
            "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
        }


class TimeIndexedNet:
    """Routes each input to the sub-net for its (integer) leading time value.

    Used for open-loop learning where every horizon step gets its own net;
    the input dimension grows with the step, so sharing weights across steps
    would not make sense.
    """

    def __init__(self, nets):
        self.nets = list(nets)
        self.n_actions = self.nets[0].n_actions

    def _route(self, x) -> int:
        return int(round(float(np.asarray(x, dtype=float).ravel()[0])))

    def predict(self, x, action: int) -> float:
        return self.nets[self._route(x)].predict(x, action)

    def predict_all(self, x) -> np.ndarray:
        return self.nets[self._route(x)].predict_all(x)

    def predict_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty((X.shape[0], self.n_actions))
        ts = np.rint(X[:, 0]).astype(int)
        for t in np.unique(ts):
            rows = ts == t
            out[rows] = self.nets[t].predict_many(X[rows])
        return out

    def train_step(self, x, action: int, target: float, rate: float) -> None:
        self.nets[self._route(x)].train_step(x, action, target, rate)

    def _state(self) -> dict:
        state = {"type": "time-indexed", "count": len(self.nets)}
        for i, net in enumerate(self.nets):
            for key, val in net._state().items():
                state[f"net{i}_{key}"] = val
        return state


def place_rbf_centers(samples: np.ndarray, count: int,
                      rng: np.random.Generator | None = None):
    """Choose RBF centers covering the sampled region.

    k-means over the samples (seeded); widths are the mean nearest-neighbor
    distance between centers, shared by all of them.  Degenerate samples
    (all identical) give a single center of unit width; asking for as many
    centers as samples returns the samples themselves.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if count > len(samples):
        raise ValueError("cannot place more centers than samples")
    if np.allclose(samples, samples[0]):
        return samples[:1].copy(), np.ones(1)
    if count == len(samples):
        centers = samples.copy()
    else:
        seed = int(rng.integers(2 ** 31 - 1)) if rng is not None else 0
        centers, _ = kmeans2(samples, count, minit="++", seed=seed)
        # drop empty duplicate centers if kmeans collapsed any
        centers = np.unique(centers, axis=0)
    if len(centers) < 2:
        return centers, np.ones(len(centers))
    d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    width = float(np.sqrt(d2.min(axis=1)).mean())
    return centers, np.full(len(centers), width)


def save_net(net, path) -> None:
    """Serialize a net to a versioned npz archive (round-trip exact)."""
    state = net._state()
    state["format_version"] = _FORMAT_VERSION
    np.savez(path, **state)


def load_net(path):
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported net format version {version}")
        kind = str(data["type"])
        if kind == "rbf":
            net = RbfNet(data["centers"], data["widths"], data["w"].shape[1],
                         offset=data["offset"], scale=data["scale"])
            net.w = data["w"].copy()
            net.b = data["b"].copy()
            return net
        if kind == "mlp":
            net = MlpNet(data["w1"].shape[0], data["w2"].shape[1],
                         hidden=data["w1"].shape[1],
                         offset=data["offset"], scale=data["scale"])
            net.w1 = data["w1"].copy()
            net.b1 = data["b1"].copy()
            net.w2 = data["w2"].copy()
            net.b2 = data["b2"].copy()
            return net
        if kind == "time-indexed":
            count = int(data["count"])
            nets = []
            for i in range(count):
                sub = {k[len(f"net{i}_"):]: data[k] for k in data.files
                       if k.startswith(f"net{i}_")}
                nets.append(_net_from_state(sub))
            return TimeIndexedNet(nets)
    raise ValueError(f"unknown net type {kind!r}")


def _net_from_state(state: dict):
    kind = str(state["type"])
    if kind == "rbf":
        net = RbfNet(state["centers"], state["widths"], state["w"].shape[1],
                     offset=state["offset"], scale=state["scale"])
        net.w = state["w"].copy()
        net.b = state["b"].copy()
        return net
    if kind == "mlp":
        net = MlpNet(state["w1"].shape[0], state["w2"].shape[1],
                     hidden=state["w1"].shape[1],
                     offset=state["offset"], scale=state["scale"])
        net.w1 = state["w1"].copy()
        net.b1 = state["b1"].copy()
        net.w2 = state["w2"].copy()
        net.b2 = state["b2"].copy()
        return net
    raise ValueError(f"unknown nested net type {kind!r}")
