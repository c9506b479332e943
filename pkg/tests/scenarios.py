"""Shared synthetic setups for the unit and acceptance tests."""

from functools import lru_cache

import numpy as np

from finmine import dsp, model as mdl, tensor as tn, train as trn

F64 = np.float64


def _p(rng, *shape, scale=0.5):
    return tn.parameter(rng.normal(0, scale, shape), dtype=F64)


def layer_cases(seed):
    """(name, objective, params, signature) for every differentiable layer at float64."""
    rng = np.random.default_rng(seed)
    cases = []

    for act in ("linear", "relu", "sigmoid", "tanh", "softmax"):
        x, w, b = _p(rng, 4, 3), _p(rng, 3, 5), _p(rng, 5)
        P = rng.normal(size=(4, 5))

        def f(x=x, w=w, b=b, act=act, P=P):
            return (tn.dense(x, w, b, act) * P).sum()

        sig = (lambda x=x, w=w, b=b: (x.data @ w.data + b.data) > 0) if act == "relu" else None
        cases.append((f"dense-{act}", f, [x, w, b], sig))

    x, k, b = _p(rng, 2, 5, 6, 2), _p(rng, 3, 4, 2, 3), _p(rng, 3)
    P = rng.normal(size=(2, 5, 6, 3))
    cases.append(("conv2d", lambda x=x, k=k, b=b, P=P: (tn.conv2d(x, k, b) * P).sum(), [x, k, b], None))

    x = _p(rng, 2, 4, 7, 3)
    P = rng.normal(size=(2, 4, 3))
    cases.append(("maxpool_freq", lambda x=x, P=P: (tn.maxpool_freq(x) * P).sum(), [x],
                  lambda x=x: x.data.argmax(axis=2)))

    for rev in (False, True):
        for seq in (True, False):
            x = _p(rng, 2, 5, 3)
            lp = tn.LSTMParams(_p(rng, 3, 16), _p(rng, 4, 16), _p(rng, 16))
            P = rng.normal(size=(2, 5, 4) if seq else (2, 4))

            def f(x=x, lp=lp, P=P, seq=seq, rev=rev):
                return (tn.lstm(x, lp, return_sequences=seq, reverse=rev) * P).sum()

            cases.append((f"lstm-rev{int(rev)}-seq{int(seq)}", f, [x] + lp.tensors(), None))

    x = _p(rng, 2, 4, 3)
    fw = tn.LSTMParams(_p(rng, 3, 12), _p(rng, 3, 12), _p(rng, 12))
    bw = tn.LSTMParams(_p(rng, 3, 12), _p(rng, 3, 12), _p(rng, 12))
    P = rng.normal(size=(2, 4, 6))
    cases.append(("bilstm", lambda x=x, P=P: (tn.bilstm(x, fw, bw) * P).sum(),
                  [x] + fw.tensors() + bw.tensors(), None))

    v = _p(rng, 2, 3)
    P = rng.normal(size=(2, 4, 3))
    cases.append(("repeat_vector", lambda v=v, P=P: (tn.repeat_vector(v, 4) * P).sum(), [v], None))

    for training in (True, False):
        x, g, b = _p(rng, 6, 3), _p(rng, 3), _p(rng, 3)
        rm, rv = tn.Tensor(rng.normal(size=3)), tn.Tensor(rng.uniform(0.5, 2, 3))
        P = rng.normal(size=(6, 3))

        def f(x=x, g=g, b=b, rm=rm, rv=rv, P=P, training=training):
            m0, v0 = rm.data.copy(), rv.data.copy()
            out = tn.batchnorm(x, g, b, rm, rv, training)
            rm.data, rv.data = m0, v0  # keep the objective a pure function of params
            return (out * P).sum()

        cases.append((f"batchnorm-train{int(training)}", f, [x, g, b], None))

    x = _p(rng, 5, 6)
    P = rng.normal(size=(5, 6))
    cases.append(("dropout", lambda x=x, P=P: (tn.dropout(x, 0.5, True, np.random.default_rng(seed)) * P).sum(),
                  [x], None))

    pred, tgt = _p(rng, 3, 4), rng.normal(size=(3, 4))
    cases.append(("mse", lambda pred=pred, tgt=tgt: tn.mse(pred, tgt), [pred], None))
    z = _p(rng, 6, 1)
    t = (rng.random((6, 1)) > 0.5).astype(F64)
    cases.append(("bce", lambda z=z, t=t: tn.binary_cross_entropy(tn.sigmoid(z), t), [z], None))
    z = _p(rng, 5, 4)
    t = np.eye(4)[rng.integers(0, 4, 5)]
    cases.append(("cce", lambda z=z, t=t: tn.categorical_cross_entropy(tn.softmax(z), t), [z], None))

    a, b = _p(rng, 3, 5), _p(rng, 3, 5)
    # a feeds three nodes; its gradient must accumulate across all of them
    cases.append(("fan-out", lambda a=a, b=b: ((a * b + a) * a).sum(), [a, b], None))
    return cases


def reduced_autoencoder_case(seed, filters=8, hidden=8, T=16, F=32):
    """MSE graph of the reduced end-to-end autoencoder on random normalized windows."""
    cfg = mdl.EncoderConfig(num_filters=filters, bilstm_hidden=hidden, embedding_dim=hidden,
                            decoder_hidden=hidden)
    m = mdl.build_autoencoder(cfg, F, seed=seed, dtype=F64)
    x = dsp.normalize_frames(np.random.default_rng(seed).normal(size=(2 * T, F))).reshape(2, T, F)

    def objective():
        return tn.mse(m(tn.Tensor(x)), x)

    def pool_winners():
        with tn.no_grad():
            conv = tn.conv2d(tn.Tensor(x[..., None]), m.encoder.conv_kernel, m.encoder.conv_bias)
        return conv.data.argmax(axis=2)

    return objective, m.parameters(), pool_winners


# overfit scenario

OVERFIT = dict(filters=8, hidden=128, T=16, F=32, batch=8, epochs=500, lr=1e-3)


def overfit_windows(seed=3):
    """Eight 16x32 windows: frames 20..35 of one clip per class pair, bins pooled by 8."""
    X = []
    for lc in dsp.synthesize_corpus(seed, {c: 2 for c in dsp.CLASSES}):
        frames = dsp.stft(lc.clip).frames[20:36, :256].reshape(16, 32, 8).mean(axis=2)
        X.append(dsp.normalize_frames(frames))
    return np.stack(X).astype(np.float32)


def run_overfit(seed=0):
    X = overfit_windows()
    o = OVERFIT
    cfg = mdl.EncoderConfig(num_filters=o["filters"], bilstm_hidden=o["hidden"],
                            embedding_dim=o["hidden"], decoder_hidden=o["hidden"])
    m = mdl.build_autoencoder(cfg, o["F"], seed=seed)
    with tn.no_grad():
        initial = float(tn.mse(m(tn.Tensor(X)), X).data)
    m, history = trn.train_autoencoder(
        X, m, trn.TrainConfig(batch_size=o["batch"], epochs=o["epochs"], learning_rate=o["lr"], seed=seed))
    with tn.no_grad():
        R = m(tn.Tensor(X)).data
    final = float(np.mean((R - X) ** 2))
    corr = [float(np.corrcoef(r.ravel(), x.ravel())[0, 1]) for r, x in zip(R, X)]
    return initial, final, corr, history


# transfer-learning scenarios

REDUCED = mdl.EncoderConfig(num_filters=16, bilstm_hidden=32, embedding_dim=128, decoder_hidden=32)


def labeled_windows(recipe, seed):
    out = []
    for lc in dsp.synthesize_corpus(seed, recipe):
        w = dsp.extract_windows(dsp.stft(lc.clip))[0]
        out.append((w.values.astype(np.float32), lc.label))
    return out


@lru_cache(maxsize=None)
def pretrained_encoder(epochs=5):
    """Reduced autoencoder pretrained on 120 unlabeled synthetic windows."""
    unlabeled = labeled_windows({c: 30 for c in dsp.CLASSES}, 12)
    ae = mdl.build_autoencoder(REDUCED, 257, seed=0)
    ae, _ = trn.train_autoencoder(np.stack([w for w, _ in unlabeled]), ae,
                                  trn.TrainConfig(batch_size=50, epochs=epochs))
    return mdl.model_tensors(ae)


def _fresh_encoder():
    # rebuild from the cached tensors so every caller owns its parameters
    ae = mdl.build_autoencoder(REDUCED, 257, seed=0)
    for name, t in ae.named().items():
        t.data = pretrained_encoder()[name].copy()
    return ae


def detection_set(seed=21):
    signals = labeled_windows({"whistle": 67, "click": 67, "burst": 66}, seed)
    noise = labeled_windows({"noise": 400}, seed + 1)
    return [(w, "signal") for w, _ in signals] + noise


@lru_cache(maxsize=None)
def run_detection():
    data = detection_set()
    train, test = trn.split_dataset(data, 0.6, seed=0)
    clf = mdl.attach_head(_fresh_encoder(), mdl.HeadConfig(task="detect", classes=("noise", "signal")), seed=1)
    clf, history = trn.train_head(train, clf, trn.TrainConfig.for_head())
    return clf, trn.evaluate(clf, test), history


def run_classification():
    data = labeled_windows({c: 100 for c in dsp.CLASSES}, 11)
    train, test = trn.split_dataset(data, 0.6, seed=0)
    clf = mdl.attach_head(_fresh_encoder(), mdl.HeadConfig(task="classify", classes=dsp.CLASSES), seed=1)
    clf, history = trn.train_head(train, clf, trn.TrainConfig.for_head())
    return clf, trn.evaluate(clf, test), history


def trained_detector():
    return run_detection()[0]


# clustering fixtures


def blobs(n_per=100, centers=((0, 0, 0), (10, 0, 0), (0, 10, 0)), sigma=0.01, seed=0, dim=3):
    rng = np.random.default_rng(seed)
    c = np.zeros((len(centers), dim))
    c[:, :len(centers[0])] = centers
    X = np.concatenate([rng.normal(ci, sigma, (n_per, dim)) for ci in c])
    labels = np.repeat(np.arange(len(centers)), n_per)
    return X, labels
