"""From-scratch stacked LSTM regressor for one-step-ahead speed forecasting.

Cell equations are the standard forget-gate formulation, no peepholes:

    i = sigmoid(Wi x + Ui h + bi)      f = sigmoid(Wf x + Uf h + bf)
    o = sigmoid(Wo x + Uo h + bo)      g = tanh(Wg x + Ug h + bg)
    c = f * c_prev + i * g             h = o * tanh(c)

Layer 0 consumes the scalar speed ratio per step; higher layers consume the
hidden vector below. The prediction is a linear readout of the top hidden
state at the final step. Training is plain mini-batch SGD on MSE with global
gradient-norm clipping, chronological batches, and no shuffling.

Weight initialization uses numpy's Philox counter-based generator keyed by
SHA-256 of (seed, setting, window_length), so concurrent trainings never
share a stream and results are reproducible bit-for-bit within one build.
Matrices and the output projection are drawn uniformly from
[-1/sqrt(units), +1/sqrt(units)] in a fixed order (per layer: input
projection, then recurrent, layer by layer, then the readout); biases start
at zero except forget-gate biases, which start at 1.0.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError, TrainingError
from .metrics import EvaluationReport, evaluation_report

MODEL_FORMAT_VERSION = 1

# Column blocks of the packed gate matrices, in order.
GATE_NAMES = ("input", "forget", "output", "candidate")


@dataclass(frozen=True)
class HyperparameterSetting:
    """One point on the tuning grid."""

    learning_rate: float
    layers: int
    units: int
    epochs: int

    def as_tuple(self) -> tuple:
        return (self.learning_rate, self.layers, self.units, self.epochs)

    def __str__(self) -> str:
        return (
            f"(lr={self.learning_rate:g}, layers={self.layers}, "
            f"units={self.units}, epochs={self.epochs})"
        )


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 32
    grad_clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.grad_clip_norm <= 0:
            raise ConfigurationError(
                f"grad_clip_norm must be positive, got {self.grad_clip_norm}"
            )


class LstmModel:
    """Stacked-LSTM weights plus the metadata needed to run them.

    Gate weights are stored packed: per layer, an input projection of shape
    (input_width, 4*units), a recurrent matrix (units, 4*units), and a bias
    (4*units,), with gate columns ordered input | forget | output | candidate.
    """

    def __init__(self, setting, window_length, norm_factor, wx, wh, biases,
                 out_weights, out_bias, format_version=MODEL_FORMAT_VERSION):
        self.setting = setting
        self.window_length = int(window_length)
        self.norm_factor = float(norm_factor)
        self.wx = [np.asarray(m, dtype=np.float64) for m in wx]
        self.wh = [np.asarray(m, dtype=np.float64) for m in wh]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.out_weights = np.asarray(out_weights, dtype=np.float64)
        self.out_bias = float(out_bias)
        self.format_version = int(format_version)
        self._check_shapes()

    def _check_shapes(self):
        h = self.setting.units
        if len(self.wx) != self.setting.layers:
            raise ConfigurationError("layer count mismatch")
        for layer, (wx, wh, b) in enumerate(zip(self.wx, self.wh, self.biases)):
            in_width = 1 if layer == 0 else h
            if wx.shape != (in_width, 4 * h) or wh.shape != (h, 4 * h) or b.shape != (4 * h,):
                raise ConfigurationError(f"layer {layer}: bad weight shapes")
        if self.out_weights.shape != (h,):
            raise ConfigurationError("output projection shape mismatch")
        for arr in self._arrays():
            if not np.all(np.isfinite(arr)):
                raise DataError("model contains non-finite weights")

    def _arrays(self):
        for layer in range(self.setting.layers):
            yield self.wx[layer]
            yield self.wh[layer]
            yield self.biases[layer]
        yield self.out_weights
        yield np.array([self.out_bias])

    def copy(self) -> "LstmModel":
        return LstmModel(
            setting=self.setting,
            window_length=self.window_length,
            norm_factor=self.norm_factor,
            wx=[m.copy() for m in self.wx],
            wh=[m.copy() for m in self.wh],
            biases=[b.copy() for b in self.biases],
            out_weights=self.out_weights.copy(),
            out_bias=self.out_bias,
            format_version=self.format_version,
        )

    def gate_weights(self, layer: int, gate: str):
        """Unpacked (input_projection, recurrent, bias) for one named gate."""
        idx = GATE_NAMES.index(gate)
        h = self.setting.units
        cols = slice(idx * h, (idx + 1) * h)
        return self.wx[layer][:, cols], self.wh[layer][:, cols], self.biases[layer][cols]


def _init_rng(setting, window_length, seed) -> np.random.Generator:
    key_text = (
        f"init:{seed}:{setting.learning_rate!r}:{setting.layers}:"
        f"{setting.units}:{setting.epochs}:{window_length}"
    )
    digest = hashlib.sha256(key_text.encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "big")))


def init_model(setting, window_length, norm_factor, seed) -> LstmModel:
    """Fresh model with uniform weights in +/- 1/sqrt(units) and forget
    biases at 1.0. Deterministic in (setting, window_length, seed)."""
    if window_length < 1:
        raise ConfigurationError(f"window_length must be positive, got {window_length}")
    if setting.learning_rate <= 0 or setting.layers < 1 or setting.units < 1 or setting.epochs < 0:
        raise ConfigurationError(f"invalid hyperparameter setting {setting}")
    h = setting.units
    bound = 1.0 / math.sqrt(h)
    rng = _init_rng(setting, window_length, seed)
    wx, wh, biases = [], [], []
    for layer in range(setting.layers):
        in_width = 1 if layer == 0 else h
        wx.append(rng.uniform(-bound, bound, size=(in_width, 4 * h)))
        wh.append(rng.uniform(-bound, bound, size=(h, 4 * h)))
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0  # forget gate block
        biases.append(b)
    out_weights = rng.uniform(-bound, bound, size=h)
    return LstmModel(
        setting=setting,
        window_length=window_length,
        norm_factor=norm_factor,
        wx=wx,
        wh=wh,
        biases=biases,
        out_weights=out_weights,
        out_bias=0.0,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow saturates cleanly to 0/1 in IEEE arithmetic.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _forward_batch(model: LstmModel, batch: np.ndarray, keep_caches: bool):
    """Run a (batch, window) block through all layers.

    Returns (predictions, caches); caches hold per-layer, per-step gate
    activations for backprop when keep_caches is set.
    """
    b, t_steps = batch.shape
    h = model.setting.units
    inputs = batch[:, :, None]  # layer 0 input width is 1
    caches = []
    h_last = None
    for layer in range(model.setting.layers):
        wx, wh, bias = model.wx[layer], model.wh[layer], model.biases[layer]
        h_t = np.zeros((b, h))
        c_t = np.zeros((b, h))
        layer_cache = [] if keep_caches else None
        outputs = np.empty((b, t_steps, h))
        for t in range(t_steps):
            x_t = inputs[:, t, :]
            z = x_t @ wx + h_t @ wh + bias
            gi = _sigmoid(z[:, :h])
            gf = _sigmoid(z[:, h : 2 * h])
            go = _sigmoid(z[:, 2 * h : 3 * h])
            gg = np.tanh(z[:, 3 * h :])
            c_next = gf * c_t + gi * gg
            tc = np.tanh(c_next)
            h_next = go * tc
            if keep_caches:
                layer_cache.append((x_t, h_t, c_t, gi, gf, go, gg, tc))
            outputs[:, t, :] = h_next
            h_t, c_t = h_next, c_next
        caches.append(layer_cache)
        inputs = outputs
        h_last = h_t
    preds = h_last @ model.out_weights + model.out_bias
    return preds, caches


def _zero_grads(model: LstmModel):
    return {
        "wx": [np.zeros_like(m) for m in model.wx],
        "wh": [np.zeros_like(m) for m in model.wh],
        "b": [np.zeros_like(b) for b in model.biases],
        "out_w": np.zeros_like(model.out_weights),
        "out_b": 0.0,
    }


def _backward_batch(model: LstmModel, caches, d_preds: np.ndarray):
    """Backpropagation through time; d_preds is dLoss/dprediction per sample."""
    b = d_preds.shape[0]
    h = model.setting.units
    t_steps = len(caches[0])
    grads = _zero_grads(model)

    # Readout layer.
    top_h_last = caches[-1][-1][5] * caches[-1][-1][7]  # o * tanh(c) at final step
    grads["out_w"] = top_h_last.T @ d_preds
    grads["out_b"] = float(np.sum(d_preds))

    # dh arriving at each layer from the layer above, per time step.
    from_above = [np.zeros((b, h)) for _ in range(t_steps)]
    from_above[-1] = d_preds[:, None] * model.out_weights[None, :]

    for layer in range(model.setting.layers - 1, -1, -1):
        wx, wh = model.wx[layer], model.wh[layer]
        in_width = wx.shape[0]
        dh = np.zeros((b, h))
        dc = np.zeros((b, h))
        below = [np.zeros((b, in_width)) for _ in range(t_steps)]
        for t in range(t_steps - 1, -1, -1):
            x_t, h_prev, c_prev, gi, gf, go, gg, tc = caches[layer][t]
            dh = dh + from_above[t]
            d_go = dh * tc
            dc = dc + dh * go * (1.0 - tc * tc)
            d_gi = dc * gg
            d_gf = dc * c_prev
            d_gg = dc * gi
            dc = dc * gf
            dz = np.concatenate(
                [
                    d_gi * gi * (1.0 - gi),
                    d_gf * gf * (1.0 - gf),
                    d_go * go * (1.0 - go),
                    d_gg * (1.0 - gg * gg),
                ],
                axis=1,
            )
            grads["wx"][layer] += x_t.T @ dz
            grads["wh"][layer] += h_prev.T @ dz
            grads["b"][layer] += dz.sum(axis=0)
            below[t] = dz @ wx.T
            dh = dz @ wh.T
        from_above = below
    return grads


def _grad_arrays(model: LstmModel, grads):
    for layer in range(model.setting.layers):
        yield grads["wx"][layer]
        yield grads["wh"][layer]
        yield grads["b"][layer]
    yield grads["out_w"]
    yield np.array([grads["out_b"]])


def forward(model: LstmModel, input_window) -> float:
    """Single-window prediction with per-step finiteness checks."""
    values = np.asarray(input_window, dtype=np.float64)
    if values.shape != (model.window_length,):
        raise DataError(
            f"input window must have {model.window_length} values, got {values.shape}"
        )
    b = 1
    h = model.setting.units
    x = values[None, :, None]
    inputs = x
    h_t = None
    for layer in range(model.setting.layers):
        wx, wh, bias = model.wx[layer], model.wh[layer], model.biases[layer]
        h_t = np.zeros((b, h))
        c_t = np.zeros((b, h))
        outputs = np.empty((b, model.window_length, h))
        for t in range(model.window_length):
            z = inputs[:, t, :] @ wx + h_t @ wh + bias
            gi = _sigmoid(z[:, :h])
            gf = _sigmoid(z[:, h : 2 * h])
            go = _sigmoid(z[:, 2 * h : 3 * h])
            gg = np.tanh(z[:, 3 * h :])
            c_t = gf * c_t + gi * gg
            h_t = go * np.tanh(c_t)
            if not np.all(np.isfinite(h_t)):
                raise NumericalError(f"non-finite activation at layer {layer}, step {t}")
            outputs[:, t, :] = h_t
        inputs = outputs
    pred = float((h_t @ model.out_weights)[0]) + model.out_bias
    if not math.isfinite(pred):
        raise NumericalError("non-finite prediction at the readout")
    return pred


def _stack_samples(samples):
    if not samples:
        raise DataError("training requires at least one sample")
    x = np.stack([np.asarray(w, dtype=np.float64) for w, _ in samples])
    y = np.array([target for _, target in samples], dtype=np.float64)
    return x, y


def train(model: LstmModel, samples, config: TrainingConfig, on_epoch=None):
    """Run exactly setting.epochs of chronological mini-batch SGD on MSE.

    Returns (trained model, mean sample loss over the final epoch). The
    input model is left untouched. Raises TrainingError with the epoch
    index if the loss or gradient norm goes non-finite. An on_epoch
    callback, when given, receives (epoch_index, epoch_loss) after every
    epoch; epoch losses are means of the pre-update batch losses.
    """
    x, y = _stack_samples(samples)
    if x.shape[1] != model.window_length:
        raise DataError(
            f"samples have window {x.shape[1]}, model expects {model.window_length}"
        )
    trained = model.copy()
    n = x.shape[0]
    final_loss = 0.0
    for epoch in range(model.setting.epochs):
        epoch_sse = 0.0
        for lo in range(0, n, config.batch_size):
            xb = x[lo : lo + config.batch_size]
            yb = y[lo : lo + config.batch_size]
            preds, caches = _forward_batch(trained, xb, keep_caches=True)
            err = preds - yb
            with np.errstate(over="ignore"):
                # overflow to inf is the divergence signal checked below
                batch_loss = float(np.mean(err * err))
            if not math.isfinite(batch_loss):
                raise TrainingError(
                    f"non-finite loss in epoch {epoch}", epoch=epoch
                )
            epoch_sse += batch_loss * xb.shape[0]
            d_preds = 2.0 * err / xb.shape[0]
            grads = _backward_batch(trained, caches, d_preds)
            norm_sq = 0.0
            for arr in _grad_arrays(trained, grads):
                norm_sq += float(np.sum(arr * arr))
            if not math.isfinite(norm_sq):
                raise TrainingError(
                    f"non-finite gradient in epoch {epoch}", epoch=epoch
                )
            norm = math.sqrt(norm_sq)
            scale = config.grad_clip_norm / norm if norm > config.grad_clip_norm else 1.0
            lr = model.setting.learning_rate * scale
            for layer in range(trained.setting.layers):
                trained.wx[layer] -= lr * grads["wx"][layer]
                trained.wh[layer] -= lr * grads["wh"][layer]
                trained.biases[layer] -= lr * grads["b"][layer]
            trained.out_weights -= lr * grads["out_w"]
            trained.out_bias -= lr * grads["out_b"]
        final_loss = epoch_sse / n
        if on_epoch is not None:
            on_epoch(epoch, final_loss)
    return trained, final_loss


def _flat_params(model: LstmModel):
    """(array, index) pairs addressing every scalar weight, fixed order."""
    for arr in list(model.wx) + list(model.wh) + list(model.biases):
        for idx in np.ndindex(arr.shape):
            yield arr, idx
    for idx in np.ndindex(model.out_weights.shape):
        yield model.out_weights, idx


def _sample_loss(model: LstmModel, x: np.ndarray, y: float) -> float:
    preds, _ = _forward_batch(model, x, keep_caches=False)
    return float((preds[0] - y) ** 2)


def gradient_check(model: LstmModel, sample, fd_step: float = 1e-5) -> float:
    """Worst relative gap between BPTT and central finite differences.

    Intended for small test models; every weight is perturbed twice.
    """
    window_values, target = sample
    x = np.asarray(window_values, dtype=np.float64)[None, :]
    probe = model.copy()
    preds, caches = _forward_batch(probe, x, keep_caches=True)
    d_preds = 2.0 * (preds - target)
    grads = _backward_batch(probe, caches, d_preds)

    analytic = (
        [g for g in grads["wx"]]
        + [g for g in grads["wh"]]
        + [g for g in grads["b"]]
        + [grads["out_w"]]
    )
    worst = 0.0
    arrays = list(probe.wx) + list(probe.wh) + list(probe.biases) + [probe.out_weights]
    for arr, g_arr in zip(arrays, analytic):
        for idx in np.ndindex(arr.shape):
            original = arr[idx]
            arr[idx] = original + fd_step
            loss_hi = _sample_loss(probe, x, target)
            arr[idx] = original - fd_step
            loss_lo = _sample_loss(probe, x, target)
            arr[idx] = original
            g_fd = (loss_hi - loss_lo) / (2.0 * fd_step)
            g_an = float(g_arr[idx])
            denom = max(abs(g_an), abs(g_fd), 1e-8)
            worst = max(worst, abs(g_an - g_fd) / denom)
    # Output bias via the same central difference.
    original = probe.out_bias
    probe.out_bias = original + fd_step
    loss_hi = _sample_loss(probe, x, target)
    probe.out_bias = original - fd_step
    loss_lo = _sample_loss(probe, x, target)
    probe.out_bias = original
    g_fd = (loss_hi - loss_lo) / (2.0 * fd_step)
    g_an = grads["out_b"]
    worst = max(worst, abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8))
    return worst


def predict_series(model: LstmModel, segment) -> np.ndarray:
    """Teacher-forced one-step-ahead forecasts in mph.

    Each forecast uses the preceding window of actual values; output covers
    positions window_length .. len(segment)-1.
    """
    values = segment.values
    if len(values) <= model.window_length:
        raise DataError(
            f"{segment.detector_id}: need more than {model.window_length} points"
        )
    count = len(values) - model.window_length
    windows = np.lib.stride_tricks.sliding_window_view(values, model.window_length)[:count]
    preds, _ = _forward_batch(model, np.ascontiguousarray(windows), keep_caches=False)
    return preds * model.norm_factor


def evaluate(model: LstmModel, segment) -> EvaluationReport:
    """Forecast the segment tail and score it against the actual speeds."""
    forecasts = predict_series(model, segment)
    actual = segment.denormalized()[model.window_length :]
    return evaluation_report(actual, forecasts)


def model_to_doc(model: LstmModel) -> dict:
    """JSON-ready document; floats survive round-trips exactly."""
    layers_doc = []
    for layer in range(model.setting.layers):
        gates = {}
        for gate in GATE_NAMES:
            wx, wh, bias = model.gate_weights(layer, gate)
            gates[gate] = {
                "input": wx.tolist(),
                "recurrent": wh.tolist(),
                "bias": bias.tolist(),
            }
        layers_doc.append(gates)
    return {
        "format_version": model.format_version,
        "setting": {
            "learning_rate": model.setting.learning_rate,
            "layers": model.setting.layers,
            "units": model.setting.units,
            "epochs": model.setting.epochs,
        },
        "window_length": model.window_length,
        "f": model.norm_factor,
        "layers_weights": layers_doc,
        "output": {"weights": model.out_weights.tolist(), "bias": model.out_bias},
    }


def model_from_doc(doc: dict) -> LstmModel:
    from .errors import FormatError

    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format_version {version!r}")
    s = doc["setting"]
    setting = HyperparameterSetting(
        learning_rate=float(s["learning_rate"]),
        layers=int(s["layers"]),
        units=int(s["units"]),
        epochs=int(s["epochs"]),
    )
    h = setting.units
    wx, wh, biases = [], [], []
    for layer, gates in enumerate(doc["layers_weights"]):
        in_width = 1 if layer == 0 else h
        packed_wx = np.zeros((in_width, 4 * h))
        packed_wh = np.zeros((h, 4 * h))
        packed_b = np.zeros(4 * h)
        for idx, gate in enumerate(GATE_NAMES):
            cols = slice(idx * h, (idx + 1) * h)
            packed_wx[:, cols] = np.asarray(gates[gate]["input"], dtype=np.float64)
            packed_wh[:, cols] = np.asarray(gates[gate]["recurrent"], dtype=np.float64)
            packed_b[cols] = np.asarray(gates[gate]["bias"], dtype=np.float64)
        wx.append(packed_wx)
        wh.append(packed_wh)
        biases.append(packed_b)
    return LstmModel(
        setting=setting,
        window_length=int(doc["window_length"]),
        norm_factor=float(doc["f"]),
        wx=wx,
        wh=wh,
        biases=biases,
        out_weights=np.asarray(doc["output"]["weights"], dtype=np.float64),
        out_bias=float(doc["output"]["bias"]),
        format_version=version,
    )


def save_model(model: LstmModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_doc(model), fh)


def load_model(path) -> LstmModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_doc(json.load(fh))


def models_equal(a: LstmModel, b: LstmModel) -> bool:
    """Bit-exact weight comparison, ignoring nothing."""
    if a.setting != b.setting or a.window_length != b.window_length:
        return False
    if a.norm_factor != b.norm_factor or a.out_bias != b.out_bias:
        return False
    for arr_a, arr_b in zip(a._arrays(), b._arrays()):
        if arr_a.shape != arr_b.shape or not np.array_equal(arr_a, arr_b):
            return False
    return True
