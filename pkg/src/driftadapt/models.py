"""Differentiable one-step predictors with exact parameter Jacobians.

Conventions shared by every model:

* An input window is an array of shape ``(n, d_in)`` holding the n most
  recent measurements, most recent first (``window[0]`` is the current
  measurement). Batched calls use ``(B, n, d_in)``.
* The one-step map produces the next measurement's first ``d_out``
  coordinates. Multi-step prediction iterates the one-step map, feeding
  each prediction back as the newest window row; when ``d_out < d_in`` the
  remaining coordinates are held at their last observed value.
* Jacobians differentiate the one-step map only, via hand-written
  reverse-mode passes (one backward sweep per output coordinate). They are
  exact up to floating point and are cross-checked against central finite
  differences in the test suite.
* All arithmetic is float64. Models are immutable after construction;
  parameters travel separately as :class:`~driftadapt.params.ParameterVector`
  values, so a model object is safe to share across threads.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.special import expit as _sigmoid

from .errors import ConfigError, UnsupportedModelError
from .params import AdaptableMask, Block, ParameterVector, flatten, unflatten


def _softmax(logits):
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Predictor:
    """Base class: layout bookkeeping, rollout, and the generic Jacobian."""

    kind = "base"
    is_linear = False

    def __init__(self, window, d_in, d_out, seed):
        if window < 1 or d_in < 1 or d_out < 1:
            raise ConfigError("window, d_in and d_out must be positive")
        self.window = int(window)
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.seed = int(seed)
        self._shapes = dict(self._block_shapes())
        layout, offset = [], 0
        for name, shape in self._shapes.items():
            length = int(np.prod(shape, dtype=int)) if shape else 1
            layout.append(Block(name, offset, length))
            offset += length
        self.layout = tuple(layout)
        self.num_params = offset
        self._slices = {b.name: slice(b.offset, b.offset + b.length) for b in layout}

    # -- subclass surface -----------------------------------------------------

    def _block_shapes(self):
        raise NotImplementedError

    def _init_arrays(self, rng):
        raise NotImplementedError

    def _forward_cached(self, views, windows):
        """Batched one-step map; returns ``(y, cache)`` for a later backward."""
        raise NotImplementedError

    def _backward(self, views, cache, g):
        """Reverse-mode pass from upstream gradients ``g`` of shape (B, d_out).

        Returns per-sample parameter gradients ``(B, p)`` and window
        gradients ``(B, n, d_in)``.
        """
        raise UnsupportedModelError(f"{self.kind} model does not support differentiation")

    # -- parameters -------------------------------------------------------------

    def init_params(self) -> ParameterVector:
        rng = np.random.default_rng(self.seed)
        arrays = self._init_arrays(rng)
        return ParameterVector(flatten(arrays, self.layout), self.layout)

    def views(self, params: ParameterVector) -> dict[str, np.ndarray]:
        return unflatten(params, self._shapes)

    def default_mask(self, params: ParameterVector) -> AdaptableMask:
        return AdaptableMask.all_of(params)

    @property
    def has_classifier(self) -> bool:
        return False

    # -- validation ---------------------------------------------------------------

    def _check(self, params, windows):
        if params.size != self.num_params or params.block_names() != tuple(self._shapes):
            raise ConfigError("parameter vector layout does not match this model")
        windows = np.asarray(windows, dtype=np.float64)
        if windows.shape[-2:] != (self.window, self.d_in):
            raise ConfigError(
                f"expected window shape ({self.window}, {self.d_in}), got {windows.shape[-2:]}"
            )
        return windows

    # -- prediction ------------------------------------------------------------------

    def predict_one_step(self, params, window) -> np.ndarray:
        window = self._check(params, window)
        if window.ndim != 2:
            raise ConfigError("predict_one_step expects a single window")
        return self._forward_cached(self.views(params), window[None])[0][0]

    def predict_batch(self, params, windows) -> np.ndarray:
        windows = self._check(params, windows)
        return self._forward_cached(self.views(params), windows)[0]

    def _shift(self, windows, predicted):
        """Feed a prediction back in as the newest window row."""
        shifted = np.empty_like(windows)
        shifted[:, 1:, :] = windows[:, :-1, :]
        shifted[:, 0, :self.d_out] = predicted
        shifted[:, 0, self.d_out:] = windows[:, 0, self.d_out:]
        return shifted

    def rollout(self, params, window, horizon) -> np.ndarray:
        """Iterate the one-step map ``horizon`` times; returns ``(horizon, d_out)``."""
        if horizon < 1:
            raise ConfigError("rollout horizon must be >= 1")
        if self.d_out > self.d_in:
            raise ConfigError("rollout feedback requires d_out <= d_in")
        window = self._check(params, window)
        if window.ndim != 2:
            raise ConfigError("rollout expects a single window")
        windows = window[None]
        views = self.views(params)
        steps = []
        for _ in range(horizon):
            y = self._forward_cached(views, windows)[0]
            steps.append(y[0])
            windows = self._shift(windows, y)
        return np.stack(steps)

    # -- differentiation ----------------------------------------------------------------

    def one_step_with_jacobian(self, params, window, mask: AdaptableMask):
        """Fused prediction and Jacobian over the masked subset.

        Shares one forward pass between the value and the ``d_out`` backward
        sweeps; this is the adapters' hot path.
        """
        window = self._check(params, window)
        if mask.size != self.num_params:
            raise ConfigError("mask was built for a different parameter vector")
        views = self.views(params)
        tiled = np.repeat(window[None], self.d_out, axis=0)
        y, cache = self._forward_cached(views, tiled)
        theta_bar, _ = self._backward(views, cache, np.eye(self.d_out))
        jac = theta_bar[:, mask.indices]
        if not np.all(np.isfinite(jac)):
            raise UnsupportedModelError("one-step map produced a non-finite Jacobian")
        return y[0], jac

    def jacobian(self, params, window, mask: AdaptableMask) -> np.ndarray:
        """d(one-step output) / d(masked parameters), shape ``(d_out, |mask|)``."""
        return self.one_step_with_jacobian(params, window, mask)[1]

    def rollout_loss_grad(self, params, windows, targets):
        """Mean multi-step squared error and its full parameter gradient.

        ``windows`` is ``(B, n, d_in)``, ``targets`` ``(B, m, d_out)``. The
        loss is ``mean_b (1/m) sum_k ||targets[b,k] - yhat[b,k]||^2`` with the
        prediction fed back through the window between steps; the gradient
        sweeps back through that feedback path.
        """
        windows = self._check(params, windows)
        targets = np.asarray(targets, dtype=np.float64)
        batch, horizon = targets.shape[0], targets.shape[1]
        views = self.views(params)
        caches, preds = [], []
        for k in range(horizon):
            y, cache = self._forward_cached(views, windows)
            caches.append(cache)
            preds.append(y)
            windows = self._shift(windows, y)
        loss = 0.0
        theta_bar = np.zeros(self.num_params)
        window_bar_next = None
        for k in range(horizon - 1, -1, -1):
            err = targets[:, k, :] - preds[k]
            loss += float(np.sum(err * err))
            g = (-2.0 / (horizon * batch)) * err
            if window_bar_next is not None:
                g = g + window_bar_next[:, 0, :self.d_out]
            tb, wb = self._backward(views, caches[k], g)
            theta_bar += tb.sum(axis=0)
            if window_bar_next is not None:
                wb[:, :-1, :] += window_bar_next[:, 1:, :]
                wb[:, 0, self.d_out:] += window_bar_next[:, 0, self.d_out:]
            window_bar_next = wb
        return loss / (horizon * batch), theta_bar

    # -- classification --------------------------------------------------------------------

    def classify_intent(self, params, window) -> np.ndarray:
        raise UnsupportedModelError(f"{self.kind} model has no classifier head")

    # -- serialization ----------------------------------------------------------------------

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "window": self.window,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "seed": self.seed,
        }


class LinearPredictor(Predictor):
    """Affine map of the most recent measurement: ``y = W x_t + b``."""

    kind = "linear"
    is_linear = True

    def __init__(self, d_in, d_out, window=1, seed=0):
        super().__init__(window, d_in, d_out, seed)

    def _block_shapes(self):
        return [("weight", (self.d_out, self.d_in)), ("bias", (self.d_out,))]

    def _init_arrays(self, rng):
        return {
            "weight": rng.normal(0.0, 1.0 / np.sqrt(self.d_in), (self.d_out, self.d_in)),
            "bias": np.zeros(self.d_out),
        }

    def _forward_cached(self, views, windows):
        x = windows[:, 0, :]
        return x @ views["weight"].T + views["bias"], (windows, x)

    def _backward(self, views, cache, g):
        windows, x = cache
        batch = windows.shape[0]
        theta_bar = np.empty((batch, self.num_params))
        theta_bar[:, self._slices["weight"]] = np.einsum("bi,bj->bij", g, x).reshape(batch, -1)
        theta_bar[:, self._slices["bias"]] = g
        window_bar = np.zeros_like(windows)
        window_bar[:, 0, :] = g @ views["weight"]
        return theta_bar, window_bar


class MlpPredictor(Predictor):
    """One-hidden-layer tanh network over the flattened window."""

    kind = "mlp"

    def __init__(self, window, d_in, d_out, hidden=16, seed=0):
        if hidden < 1:
            raise ConfigError("hidden size must be positive")
        self.hidden = int(hidden)
        super().__init__(window, d_in, d_out, seed)

    def _block_shapes(self):
        flat = self.window * self.d_in
        return [
            ("hidden.weight", (self.hidden, flat)),
            ("hidden.bias", (self.hidden,)),
            ("out.weight", (self.d_out, self.hidden)),
            ("out.bias", (self.d_out,)),
        ]

    def _init_arrays(self, rng):
        flat = self.window * self.d_in
        return {
            "hidden.weight": rng.normal(0.0, 1.0 / np.sqrt(flat), (self.hidden, flat)),
            "hidden.bias": np.zeros(self.hidden),
            "out.weight": rng.normal(0.0, 1.0 / np.sqrt(self.hidden), (self.d_out, self.hidden)),
            "out.bias": np.zeros(self.d_out),
        }

    def _forward_cached(self, views, windows):
        u = windows.reshape(windows.shape[0], -1)
        z = np.tanh(u @ views["hidden.weight"].T + views["hidden.bias"])
        y = z @ views["out.weight"].T + views["out.bias"]
        return y, (windows, u, z)

    def _backward(self, views, cache, g):
        windows, u, z = cache
        batch = windows.shape[0]
        dz = g @ views["out.weight"]
        da = dz * (1.0 - z * z)
        theta_bar = np.empty((batch, self.num_params))
        theta_bar[:, self._slices["hidden.weight"]] = \
            np.einsum("bi,bj->bij", da, u).reshape(batch, -1)
        theta_bar[:, self._slices["hidden.bias"]] = da
        theta_bar[:, self._slices["out.weight"]] = \
            np.einsum("bi,bj->bij", g, z).reshape(batch, -1)
        theta_bar[:, self._slices["out.bias"]] = g
        window_bar = (da @ views["hidden.weight"]).reshape(windows.shape)
        return theta_bar, window_bar

    def to_config(self):
        cfg = super().to_config()
        cfg["hidden"] = self.hidden
        return cfg


class RecurrentPredictor(Predictor):
    """Gated recurrent encoder + linear decoder + optional softmax classifier.

    The encoder consumes the window in chronological order (oldest row
    first) and the final hidden state feeds both the decoder, which emits
    the one-step prediction, and a two-layer classifier that scores intent
    classes. With ``classes=0`` the classifier head is omitted.

    Gate kernels are stored per block but applied as stacked
    ``(reset, update, candidate)`` matrices, so a whole window costs one
    input-projection GEMM plus one recurrent matmul per step.
    """

    kind = "recurrent"

    def __init__(self, window, d_in, d_out, hidden=8, classes=3, seed=0):
        if hidden < 1 or hidden > 16:
            raise ConfigError("recurrent hidden size must be in [1, 16]")
        if classes < 0:
            raise ConfigError("classes must be >= 0")
        self.hidden = int(hidden)
        self.classes = int(classes)
        super().__init__(window, d_in, d_out, seed)

    def _block_shapes(self):
        h, d = self.hidden, self.d_in
        shapes = [
            ("encoder.reset_in", (h, d)),
            ("encoder.update_in", (h, d)),
            ("encoder.cand_in", (h, d)),
            ("encoder.reset_rec", (h, h)),
            ("encoder.update_rec", (h, h)),
            ("encoder.cand_rec", (h, h)),
            ("encoder.reset_bias", (h,)),
            ("encoder.update_bias", (h,)),
            ("encoder.cand_bias", (h,)),
            ("decoder.weight", (self.d_out, h)),
            ("decoder.bias", (self.d_out,)),
        ]
        if self.classes:
            shapes += [
                ("classifier.hidden_weight", (h, h)),
                ("classifier.hidden_bias", (h,)),
                ("classifier.out_weight", (self.classes, h)),
                ("classifier.out_bias", (self.classes,)),
            ]
        return shapes

    def _init_arrays(self, rng):
        h, d = self.hidden, self.d_in
        s_in, s_rec = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)
        arrays = {
            "encoder.reset_in": rng.normal(0.0, s_in, (h, d)),
            "encoder.update_in": rng.normal(0.0, s_in, (h, d)),
            "encoder.cand_in": rng.normal(0.0, s_in, (h, d)),
            "encoder.reset_rec": rng.normal(0.0, s_rec, (h, h)),
            "encoder.update_rec": rng.normal(0.0, s_rec, (h, h)),
            "encoder.cand_rec": rng.normal(0.0, s_rec, (h, h)),
            "encoder.reset_bias": np.zeros(h),
            "encoder.update_bias": np.zeros(h),
            "encoder.cand_bias": np.zeros(h),
            "decoder.weight": rng.normal(0.0, s_rec, (self.d_out, h)),
            "decoder.bias": np.zeros(self.d_out),
        }
        if self.classes:
            arrays.update({
                "classifier.hidden_weight": rng.normal(0.0, s_rec, (h, h)),
                "classifier.hidden_bias": np.zeros(h),
                "classifier.out_weight": rng.normal(0.0, s_rec, (self.classes, h)),
                "classifier.out_bias": np.zeros(self.classes),
            })
        return arrays

    def default_mask(self, params):
        return AdaptableMask.for_blocks(params, ["encoder"])

    @property
    def has_classifier(self):
        return self.classes > 0

    def _stacked(self, views):
        w_all = np.concatenate([views["encoder.reset_in"], views["encoder.update_in"],
                                views["encoder.cand_in"]])
        u_all = np.concatenate([views["encoder.reset_rec"], views["encoder.update_rec"],
                                views["encoder.cand_rec"]])
        b_all = np.concatenate([views["encoder.reset_bias"], views["encoder.update_bias"],
                                views["encoder.cand_bias"]])
        return w_all, u_all, b_all

    def _encode(self, views, windows):
        batch, n, d = windows.shape
        h = self.hidden
        w_all, u_all, b_all = self._stacked(views)
        # One GEMM projects every window row through all three gate kernels.
        pre = (windows.reshape(batch * n, d) @ w_all.T).reshape(batch, n, 3 * h) + b_all
        state = np.zeros((batch, h))
        h_prev = np.empty((n, batch, h))
        resets = np.empty((n, batch, h))
        updates = np.empty((n, batch, h))
        cands = np.empty((n, batch, h))
        cand_rec = np.empty((n, batch, h))
        for step in range(n):
            idx = n - 1 - step           # chronological: oldest row first
            hu = state @ u_all.T
            r = _sigmoid(pre[:, idx, :h] + hu[:, :h])
            zg = _sigmoid(pre[:, idx, h:2 * h] + hu[:, h:2 * h])
            c = np.tanh(pre[:, idx, 2 * h:] + r * hu[:, 2 * h:])
            h_prev[step] = state
            resets[step], updates[step], cands[step] = r, zg, c
            cand_rec[step] = hu[:, 2 * h:]
            state = (1.0 - zg) * c + zg * state
        return state, (windows, h_prev, resets, updates, cands, cand_rec)

    def _encoder_backward(self, views, enc_cache, dh, theta_bar):
        """Accumulate encoder gradients into ``theta_bar``; returns window grads."""
        windows, h_prev, resets, updates, cands, cand_rec = enc_cache
        batch, n, d = windows.shape
        h = self.hidden
        w_all, u_all, _ = self._stacked(views)
        d_rec = np.empty((n, batch, 3 * h))
        d_pre = np.empty((n, batch, 3 * h))
        for step in range(n - 1, -1, -1):
            hp, r, zg, c, hun = h_prev[step], resets[step], updates[step], cands[step], cand_rec[step]
            dzg = dh * (hp - c)
            dc = dh * (1.0 - zg)
            dh = dh * zg
            dan = dc * (1.0 - c * c)
            dar = (dan * hun) * r * (1.0 - r)
            daz = dzg * zg * (1.0 - zg)
            d_pre[step, :, :h] = dar
            d_pre[step, :, h:2 * h] = daz
            d_pre[step, :, 2 * h:] = dan
            d_rec[step, :, :2 * h] = d_pre[step, :, :2 * h]
            d_rec[step, :, 2 * h:] = dan * r
            dh += d_rec[step] @ u_all
        theta_bar[:, :3 * h * d] = \
            np.einsum("tbi,btj->bij", d_pre, windows[:, ::-1, :]).reshape(batch, -1)
        theta_bar[:, 3 * h * d:3 * h * (d + h)] = \
            np.einsum("tbi,tbj->bij", d_rec, h_prev).reshape(batch, -1)
        theta_bar[:, 3 * h * (d + h):3 * h * (d + h + 1)] = d_pre.sum(axis=0)
        window_bar = np.einsum("tbi,ij->btj", d_pre, w_all)[:, ::-1, :]
        return np.ascontiguousarray(window_bar)

    def _forward_cached(self, views, windows):
        state, enc_cache = self._encode(views, windows)
        y = state @ views["decoder.weight"].T + views["decoder.bias"]
        return y, (enc_cache, state)

    def _backward(self, views, cache, g):
        enc_cache, state = cache
        batch = state.shape[0]
        theta_bar = np.zeros((batch, self.num_params))
        theta_bar[:, self._slices["decoder.weight"]] = \
            np.einsum("bi,bj->bij", g, state).reshape(batch, -1)
        theta_bar[:, self._slices["decoder.bias"]] = g
        window_bar = self._encoder_backward(views, enc_cache,
                                            g @ views["decoder.weight"], theta_bar)
        return theta_bar, window_bar

    # Classifier path.

    def _classifier_logits(self, views, state):
        q = np.tanh(state @ views["classifier.hidden_weight"].T
                    + views["classifier.hidden_bias"])
        return q @ views["classifier.out_weight"].T + views["classifier.out_bias"], q

    def classify_intent(self, params, window):
        if not self.has_classifier:
            raise UnsupportedModelError("model was built with classes=0")
        window = self._check(params, window)
        views = self.views(params)
        state, _ = self._encode(views, window[None])
        logits, _ = self._classifier_logits(views, state)
        return _softmax(logits)[0]

    def classify_batch(self, params, windows):
        if not self.has_classifier:
            raise UnsupportedModelError("model was built with classes=0")
        windows = self._check(params, windows)
        views = self.views(params)
        state, _ = self._encode(views, windows)
        logits, _ = self._classifier_logits(views, state)
        return _softmax(logits)

    def classifier_loss_grad(self, params, windows, labels):
        """Mean cross-entropy over intent labels and its full parameter gradient."""
        if not self.has_classifier:
            raise UnsupportedModelError("model was built with classes=0")
        windows = self._check(params, windows)
        labels = np.asarray(labels, dtype=np.intp)
        batch = windows.shape[0]
        views = self.views(params)
        state, enc_cache = self._encode(views, windows)
        logits, q = self._classifier_logits(views, state)
        probs = _softmax(logits)
        loss = float(-np.mean(np.log(probs[np.arange(batch), labels] + 1e-300)))
        g_logits = probs.copy()
        g_logits[np.arange(batch), labels] -= 1.0
        g_logits /= batch
        theta_bar = np.zeros((batch, self.num_params))
        theta_bar[:, self._slices["classifier.out_weight"]] = \
            np.einsum("bi,bj->bij", g_logits, q).reshape(batch, -1)
        theta_bar[:, self._slices["classifier.out_bias"]] = g_logits
        dq = g_logits @ views["classifier.out_weight"]
        daq = dq * (1.0 - q * q)
        theta_bar[:, self._slices["classifier.hidden_weight"]] = \
            np.einsum("bi,bj->bij", daq, state).reshape(batch, -1)
        theta_bar[:, self._slices["classifier.hidden_bias"]] = daq
        self._encoder_backward(views, enc_cache,
                               daq @ views["classifier.hidden_weight"], theta_bar)
        return loss, theta_bar.sum(axis=0)

    def to_config(self):
        cfg = super().to_config()
        cfg["hidden"] = self.hidden
        cfg["classes"] = self.classes
        return cfg


MODEL_KINDS = {
    "linear": LinearPredictor,
    "mlp": MlpPredictor,
    "recurrent": RecurrentPredictor,
}


def make_model(cfg: dict) -> Predictor:
    kind = cfg.get("kind")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}")
    common = {"window": cfg.get("window", 1), "d_in": cfg["d_in"], "d_out": cfg["d_out"],
              "seed": cfg.get("seed", 0)}
    if kind == "linear":
        return LinearPredictor(common["d_in"], common["d_out"], window=common["window"],
                               seed=common["seed"])
    if kind == "mlp":
        return MlpPredictor(hidden=cfg.get("hidden", 16), **common)
    return RecurrentPredictor(hidden=cfg.get("hidden", 8), classes=cfg.get("classes", 3),
                              **common)


def flatten_params(model: Predictor) -> ParameterVector:
    """Seed-deterministic initial parameters of ``model`` as a flat vector."""
    return model.init_params()


def fd_jacobian(model, params, window, mask, h=1e-5):
    """Central-difference Jacobian of the one-step map over the masked subset.

    Second-order accurate in ``h``; used as the independent oracle for the
    analytic reverse-mode Jacobians.
    """
    if h <= 0:
        raise ConfigError("perturbation size must be positive")
    base = params.values
    cols = np.empty((model.d_out, len(mask)))
    for col, idx in enumerate(mask.indices):
        bumped = base.copy()
        bumped[idx] = base[idx] + h
        up = model.predict_one_step(params.with_values(bumped), window)
        bumped[idx] = base[idx] - h
        down = model.predict_one_step(params.with_values(bumped), window)
        cols[:, col] = (up - down) / (2.0 * h)
    return cols


def save_model(model: Predictor, params: ParameterVector, path):
    """Write architecture + weights as JSON (schema documented in the README)."""
    doc = model.to_config()
    doc["layout"] = [[b.name, b.offset, b.length] for b in model.layout]
    doc["values"] = params.values.tolist()
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path):
    """Read a model JSON document; returns ``(model, params)``."""
    with open(path) as fh:
        doc = json.load(fh)
    model = make_model(doc)
    layout = tuple(Block(name, offset, length) for name, offset, length in doc["layout"])
    if layout != model.layout:
        raise ConfigError(f"stored layout does not match a {doc['kind']!r} model of this size")
    values = np.asarray(doc["values"], dtype=np.float64)
    return model, ParameterVector(values, layout)
