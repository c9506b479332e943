"""Convolutional-recurrent autoencoder, classifier heads, checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import CorruptCheckpoint, InvalidConfig, IOFailure, NonFiniteValue
from .tensor import LSTMParams, Tensor

FREEZE_POLICIES = ("except-last-lstm", "none")


@dataclass
class EncoderConfig:
    num_filters: int = 256
    kernel_time: int = 4  # 0.02 s at a 5 ms hop
    kernel_freq: int = 8  # ~680 Hz at 44.1 kHz / 512-point FFT
    bilstm_hidden: int = 128
    embedding_dim: int = 128
    decoder_hidden: int = 128
    decoder_activation: str = "linear"

    def validate(self):
        for name in ("num_filters", "kernel_time", "kernel_freq", "bilstm_hidden",
                     "embedding_dim", "decoder_hidden"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.decoder_activation not in ("linear", "relu", "tanh"):
            raise InvalidConfig(f"unknown decoder activation {self.decoder_activation!r}")


@dataclass
class HeadConfig:
    task: str = "detect"
    classes: tuple = ("noise", "signal")
    hidden: tuple = (64, 32)
    dropout: float = 0.5
    freeze_policy: str = "except-last-lstm"

    @property
    def n_outputs(self):
        return 1 if self.task == "detect" else len(self.classes)

    @property
    def activation(self):
        return "sigmoid" if self.task == "detect" else "softmax"

    def validate(self):
        if self.task not in ("detect", "classify"):
            raise InvalidConfig(f"unknown task {self.task!r}; expected detect or classify")
        if self.task == "detect" and len(self.classes) != 2:
            raise InvalidConfig("detection heads need exactly two classes (negative, positive)")
        if self.task == "classify" and len(self.classes) < 2:
            raise InvalidConfig("classification heads need at least two classes")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise InvalidConfig(f"unknown freeze policy {self.freeze_policy!r}")
        if not 0 <= self.dropout < 1:
            raise InvalidConfig("dropout must lie in [0, 1)")


def _lstm_names(prefix, p: LSTMParams):
    return {f"{prefix}.wx": p.wx, f"{prefix}.wh": p.wh, f"{prefix}.b": p.b}


def _as_batch(windows, dtype):
    x = np.asarray(windows, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise InvalidConfig(f"expected (T, F) or (B, T, F) windows, got shape {x.shape}")
    return x


class Encoder:
    """conv -> max over frequency -> bidirectional LSTM -> many-to-one LSTM."""

    def __init__(self, conv_kernel, conv_bias, bi_fwd, bi_bwd, embed):
        self.conv_kernel = conv_kernel
        self.conv_bias = conv_bias
        self.bi_fwd = bi_fwd
        self.bi_bwd = bi_bwd
        self.embed = embed

    @classmethod
    def build(cls, cfg: EncoderConfig, rng, dtype):
        kt, kf, nf = cfg.kernel_time, cfg.kernel_freq, cfg.num_filters
        return cls(
            tn.parameter(tn.xavier_uniform(rng, (kt, kf, 1, nf), kt * kf, kt * kf * nf, dtype), dtype),
            tn.parameter(np.zeros(nf), dtype),
            tn.init_lstm(rng, nf, cfg.bilstm_hidden, dtype),
            tn.init_lstm(rng, nf, cfg.bilstm_hidden, dtype),
            tn.init_lstm(rng, 2 * cfg.bilstm_hidden, cfg.embedding_dim, dtype),
        )

    @property
    def dtype(self):
        return self.conv_kernel.dtype

    @property
    def embedding_dim(self):
        return self.embed.hidden

    def pooled(self, x):
        """(B, T, F) -> per-frame filter maxima (B, T, num_filters)."""
        x = tn.as_tensor(x)
        x4 = tn.reshape(x, x.shape + (1,))
        return tn.maxpool_freq(tn.conv2d(x4, self.conv_kernel, self.conv_bias))

    def features(self, x):
        """Everything below the embedding LSTM: (B, T, 2 * bilstm_hidden)."""
        return tn.bilstm(self.pooled(x), self.bi_fwd, self.bi_bwd)

    def embed_features(self, seq):
        return tn.lstm(seq, self.embed, return_sequences=False)

    def __call__(self, x):
        return self.embed_features(self.features(x))

    def named(self):
        out = {"encoder.conv.kernel": self.conv_kernel, "encoder.conv.bias": self.conv_bias}
        out.update(_lstm_names("encoder.bilstm.fwd", self.bi_fwd))
        out.update(_lstm_names("encoder.bilstm.bwd", self.bi_bwd))
        out.update(_lstm_names("encoder.lstm", self.embed))
        return out

    def prefix_parameters(self):
        """Parameters below the last LSTM (frozen under except-last-lstm)."""
        return [self.conv_kernel, self.conv_bias] + self.bi_fwd.tensors() + self.bi_bwd.tensors()


class Decoder:
    """repeat -> LSTM -> bidirectional LSTM -> per-frame projection to F
    -> conv with num_filters -> 1x1 single-kernel deconvolution."""

    def __init__(self, lstm, bi_fwd, bi_bwd, proj_w, proj_b, conv_kernel, conv_bias,
                 deconv_kernel, deconv_bias, activation="linear"):
        self.lstm = lstm
        self.bi_fwd = bi_fwd
        self.bi_bwd = bi_bwd
        self.proj_w = proj_w
        self.proj_b = proj_b
        self.conv_kernel = conv_kernel
        self.conv_bias = conv_bias
        self.deconv_kernel = deconv_kernel
        self.deconv_bias = deconv_bias
        self.activation = activation

    @classmethod
    def build(cls, cfg: EncoderConfig, n_bins, rng, dtype):
        kt, kf, nf = cfg.kernel_time, cfg.kernel_freq, cfg.num_filters
        h2 = 2 * cfg.bilstm_hidden
        return cls(
            tn.init_lstm(rng, cfg.embedding_dim, cfg.decoder_hidden, dtype),
            tn.init_lstm(rng, cfg.decoder_hidden, cfg.bilstm_hidden, dtype),
            tn.init_lstm(rng, cfg.decoder_hidden, cfg.bilstm_hidden, dtype),
            tn.parameter(tn.xavier_uniform(rng, (h2, n_bins), h2, n_bins, dtype), dtype),
            tn.parameter(np.zeros(n_bins), dtype),
            tn.parameter(tn.xavier_uniform(rng, (kt, kf, 1, nf), kt * kf, kt * kf * nf, dtype), dtype),
            tn.parameter(np.zeros(nf), dtype),
            tn.parameter(tn.xavier_uniform(rng, (1, 1, nf, 1), nf, 1, dtype), dtype),
            tn.parameter(np.zeros(1), dtype),
            cfg.decoder_activation,
        )

    @property
    def n_bins(self):
        return self.proj_w.shape[1]

    def __call__(self, e, T):
        seq = tn.lstm(tn.repeat_vector(e, T), self.lstm)
        seq = tn.bilstm(seq, self.bi_fwd, self.bi_bwd)
        x = tn.dense(seq, self.proj_w, self.proj_b)  # (B, T, F)
        x = tn.reshape(x, x.shape + (1,))
        x = tn.conv2d(x, self.conv_kernel, self.conv_bias)
        x = tn.ACTIVATIONS[self.activation](x)
        x = tn.conv2d(x, self.deconv_kernel, self.deconv_bias)
        return tn.reshape(x, x.shape[:3])

    def named(self):
        out = _lstm_names("decoder.lstm", self.lstm)
        out.update(_lstm_names("decoder.bilstm.fwd", self.bi_fwd))
        out.update(_lstm_names("decoder.bilstm.bwd", self.bi_bwd))
        out.update({
            "decoder.project.w": self.proj_w,
            "decoder.project.b": self.proj_b,
            "decoder.conv.kernel": self.conv_kernel,
            "decoder.conv.bias": self.conv_bias,
            "decoder.deconv.kernel": self.deconv_kernel,
            "decoder.deconv.bias": self.deconv_bias,
        })
        return out


class AutoencoderModel:
    def __init__(self, encoder: Encoder, decoder: Decoder):
        self.encoder = encoder
        self.decoder = decoder

    @property
    def n_bins(self):
        return self.decoder.n_bins

    @property
    def dtype(self):
        return self.encoder.dtype

    def __call__(self, x):
        x = tn.as_tensor(x)
        return self.decoder(self.encoder(x), x.shape[1])

    def named(self):
        out = dict(self.encoder.named())
        out.update(self.decoder.named())
        if self.decoder.activation != "linear":
            out[f"meta.decoder_activation.{self.decoder.activation}"] = Tensor(np.zeros((), np.float32))
        return out

    def parameters(self):
        return [t for t in self.named().values() if t.requires_grad]


class ClassifierModel:
    """Encoder output -> batchnorm -> dense relu layers -> dropout -> sigmoid/softmax."""

    def __init__(self, encoder: Encoder, head: HeadConfig, layers, bn):
        self.encoder = encoder
        self.head = head
        self.layers = layers  # list of (w, b)
        self.bn = bn  # dict gamma, beta, mean, var

    @classmethod
    def build(cls, encoder: Encoder, head: HeadConfig, rng):
        dt = encoder.dtype
        e = encoder.embedding_dim
        bn = {
            "gamma": tn.parameter(np.ones(e), dt),
            "beta": tn.parameter(np.zeros(e), dt),
            "mean": Tensor(np.zeros(e, dtype=dt)),
            "var": Tensor(np.ones(e, dtype=dt)),
        }
        sizes = [e, *head.hidden, head.n_outputs]
        layers = [
            (tn.parameter(tn.xavier_uniform(rng, (a, b), a, b, dt), dt), tn.parameter(np.zeros(b), dt))
            for a, b in zip(sizes[:-1], sizes[1:])
        ]
        return cls(encoder, head, layers, bn)

    @property
    def dtype(self):
        return self.encoder.dtype

    def head_forward(self, e, training=False, rng=None):
        x = tn.batchnorm(e, self.bn["gamma"], self.bn["beta"], self.bn["mean"], self.bn["var"],
                         training)
        for w, b in self.layers[:-1]:
            x = tn.dense(x, w, b, "relu")
        x = tn.dropout(x, self.head.dropout, training, rng)
        w, b = self.layers[-1]
        return tn.dense(x, w, b, self.head.activation)

    def forward_features(self, seq, training=False, rng=None):
        return self.head_forward(self.encoder.embed_features(seq), training, rng)

    def __call__(self, x, training=False, rng=None):
        return self.head_forward(self.encoder(x), training, rng)

    def trainable_parameters(self):
        params = list(self.encoder.embed.tensors())
        if self.head.freeze_policy == "none":
            params = self.encoder.prefix_parameters() + params
        params += [self.bn["gamma"], self.bn["beta"]]
        for w, b in self.layers:
            params += [w, b]
        return params

    def frozen_parameters(self):
        trainable = {id(p) for p in self.trainable_parameters()}
        return [p for p in self.encoder.named().values() if id(p) not in trainable]

    def named(self):
        out = dict(self.encoder.named())
        out.update({f"head.bn.{k}": v for k, v in self.bn.items()})
        for i, (w, b) in enumerate(self.layers):
            out[f"head.dense{i}.w"] = w
            out[f"head.dense{i}.b"] = b
        out[f"meta.task.{self.head.task}"] = Tensor(np.zeros((), np.float32))
        for i, label in enumerate(self.head.classes):
            out[f"meta.class.{i}.{label}"] = Tensor(np.asarray(i, np.float32))
        out[f"meta.dropout"] = Tensor(np.asarray(self.head.dropout, np.float32))
        return out

    def predict_proba(self, windows, batch_size=64):
        x = _as_batch(windows, self.dtype)
        out = []
        with tn.no_grad():
            for s in range(0, len(x), batch_size):
                out.append(self(x[s:s + batch_size]).data)
        return np.concatenate(out, axis=0)


# public operations


def build_autoencoder(cfg: EncoderConfig = None, n_bins: int = 257, seed: int = 0,
                      dtype=np.float32) -> AutoencoderModel:
    cfg = cfg or EncoderConfig()
    cfg.validate()
    if n_bins < cfg.kernel_freq:
        raise InvalidConfig(f"{n_bins} frequency bins is fewer than the kernel extent {cfg.kernel_freq}")
    rng = np.random.default_rng(seed)
    enc = Encoder.build(cfg, rng, dtype)
    dec = Decoder.build(cfg, n_bins, rng, dtype)
    return AutoencoderModel(enc, dec)


def encoder_config_of(model) -> EncoderConfig:
    enc = model.encoder
    kt, kf, _, nf = enc.conv_kernel.shape
    dec = getattr(model, "decoder", None)
    return EncoderConfig(
        num_filters=nf, kernel_time=kt, kernel_freq=kf,
        bilstm_hidden=enc.bi_fwd.hidden, embedding_dim=enc.embedding_dim,
        decoder_hidden=dec.lstm.hidden if dec else 128,
        decoder_activation=dec.activation if dec else "linear",
    )


def embed_windows(model, windows, batch_size=32) -> np.ndarray:
    """Embeddings for (B, T, F) windows as a (B, embedding_dim) array."""
    enc = model.encoder
    x = _as_batch(windows, enc.dtype)
    out = []
    with tn.no_grad():
        for s in range(0, len(x), batch_size):
            out.append(enc(x[s:s + batch_size]).data)
    e = np.concatenate(out, axis=0)
    if not np.all(np.isfinite(e)):
        raise NonFiniteValue("non-finite embedding")
    return e


def encode(model, window) -> np.ndarray:
    """Embedding of a single (T, F) window."""
    return embed_windows(model, np.asarray(window)[None])[0]


def decode(model: AutoencoderModel, e, T: int = 128) -> np.ndarray:
    e = np.asarray(e, dtype=model.dtype)
    single = e.ndim == 1
    if single:
        e = e[None]
    if not np.all(np.isfinite(e)):
        raise NonFiniteValue("non-finite embedding passed to decode")
    with tn.no_grad():
        out = model.decoder(Tensor(e), T).data
    return out[0] if single else out


def attach_head(model, head: HeadConfig = None, seed: int = 0) -> ClassifierModel:
    head = head or HeadConfig()
    head.validate()
    if getattr(model, "encoder", None) is None:
        raise InvalidConfig("attach_head needs a model with an encoder")
    return ClassifierModel.build(model.encoder, head, np.random.default_rng(seed))


def model_tensors(model) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in model.named().items()}


def save_checkpoint(model, path) -> None:
    tn.save_tensors(path, model_tensors(model))


def _lstm_from(d, prefix):
    try:
        return LSTMParams(*(tn.parameter(d[f"{prefix}.{k}"]) for k in ("wx", "wh", "b")))
    except KeyError as exc:
        raise CorruptCheckpoint(f"checkpoint lacks tensor {exc.args[0]}") from exc


def _get(d, name, grad=True):
    if name not in d:
        raise CorruptCheckpoint(f"checkpoint lacks tensor {name!r}")
    return tn.parameter(d[name]) if grad else Tensor(d[name])


def load_checkpoint(path):
    """Rebuild an AutoencoderModel or ClassifierModel from a checkpoint file."""
    d = tn.load_tensors(path)
    enc = Encoder(
        _get(d, "encoder.conv.kernel"), _get(d, "encoder.conv.bias"),
        _lstm_from(d, "encoder.bilstm.fwd"), _lstm_from(d, "encoder.bilstm.bwd"),
        _lstm_from(d, "encoder.lstm"),
    )
    meta = [k for k in d if k.startswith("meta.")]
    if any(k.startswith("head.") for k in d):
        task = next((k.split(".", 2)[2] for k in meta if k.startswith("meta.task.")), None)
        labels = sorted(
            ((int(k.split(".")[2]), k.split(".", 3)[3]) for k in meta if k.startswith("meta.class.")))
        if task is None or not labels:
            raise CorruptCheckpoint("classifier checkpoint lacks task or class metadata")
        n_layers = sum(1 for k in d if k.startswith("head.dense") and k.endswith(".w"))
        layers = [(_get(d, f"head.dense{i}.w"), _get(d, f"head.dense{i}.b")) for i in range(n_layers)]
        bn = {"gamma": _get(d, "head.bn.gamma"), "beta": _get(d, "head.bn.beta"),
              "mean": _get(d, "head.bn.mean", False), "var": _get(d, "head.bn.var", False)}
        head = HeadConfig(task=task, classes=tuple(l for _, l in labels),
                          hidden=tuple(w.shape[1] for w, _ in layers[:-1]),
                          dropout=float(d.get("meta.dropout", 0.5)))
        return ClassifierModel(enc, head, layers, bn)
    activation = next((k.rsplit(".", 1)[1] for k in meta if k.startswith("meta.decoder_activation.")),
                      "linear")
    dec = Decoder(
        _lstm_from(d, "decoder.lstm"), _lstm_from(d, "decoder.bilstm.fwd"),
        _lstm_from(d, "decoder.bilstm.bwd"),
        _get(d, "decoder.project.w"), _get(d, "decoder.project.b"),
        _get(d, "decoder.conv.kernel"), _get(d, "decoder.conv.bias"),
        _get(d, "decoder.deconv.kernel"), _get(d, "decoder.deconv.bias"),
        activation,
    )
    return AutoencoderModel(enc, dec)


# first-layer kernel grid


def kernel_grid(kernels: np.ndarray, scale: int = 4, border: int = 1):
    """Tile (kt, kf, 1, n) kernels into one gray image in [0, 1].

    Each kernel is min-max normalized on its own (constant kernels map to 0.5),
    drawn with frequency increasing upward, and the tiles fill a near-square
    grid row by row.  Returns (image, rows, cols).
    """
    kt, kf, _, n = kernels.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    th, tw = kf * scale, kt * scale
    img = np.ones((rows * (th + border) + border, cols * (tw + border) + border))
    for k in range(n):
        w = kernels[:, :, 0, k].astype(np.float64)
        lo, hi = w.min(), w.max()
        tile = np.full_like(w, 0.5) if hi - lo <= 0 else (w - lo) / (hi - lo)
        tile = np.kron(tile.T[::-1], np.ones((scale, scale)))
        r, c = divmod(k, cols)
        y, x = border + r * (th + border), border + c * (tw + border)
        img[y:y + th, x:x + tw] = tile
    return img, rows, cols


def _write_pgm(path, img):
    px = np.round(img * 255).astype(np.uint8)
    head = f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(head + px.tobytes())


def _write_svg(path, img):
    h, w = img.shape
    rects = []
    for y in range(h):
        for x in range(w):
            g = int(round(img[y, x] * 255))
            rects.append(f'<rect x="{x}" y="{y}" width="1" height="1" fill="#{g:02x}{g:02x}{g:02x}"/>')
    body = "\n".join(rects)
    Path(path).write_text(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'shape-rendering="crispEdges">\n{body}\n</svg>\n')


def export_first_layer_kernels(model, path, scale: int = 4):
    """Write the first conv layer's kernels as a PGM (P5) or SVG grid."""
    img, rows, cols = kernel_grid(model.encoder.conv_kernel.data, scale=scale)
    path = Path(path)
    try:
        if path.suffix.lower() == ".svg":
            _write_svg(path, img)
        else:
            _write_pgm(path, img)
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from exc
    return rows, cols
