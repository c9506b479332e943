"""Command line pipeline: ``finmine <subcommand> ...``.

Every subcommand records a JSON run manifest next to its outputs.  Exit
codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import dsp, mining, plotting
from . import model as mdl
from . import tensor as tn
from . import train as trn
from .errors import ClipTooShort, ConfigError, EmptyDataset, FinmineError, SingleClassDataset

log = logging.getLogger("finmine")


# run manifest


def digest(path) -> str:
    """64-bit BLAKE2b content hash as hex."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class RunManifest:
    def __init__(self, command, args):
        self.command = command
        self.config = {k: (str(v) if isinstance(v, Path) else v)
                       for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
        self.seed = getattr(args, "seed", None)
        self.inputs = {}
        self.outputs = []
        self._t0 = time.perf_counter()

    def add_input(self, path):
        self.inputs[str(path)] = digest(path)

    def add_output(self, path):
        self.outputs.append(str(path))
        return path

    def write(self, path):
        doc = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time_seconds": round(time.perf_counter() - self._t0, 3),
        }
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-", suffix=".json")
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


# helpers


def _existing(path, kind="file") -> Path:
    p = Path(path)
    if kind == "dir" and not p.is_dir():
        raise ConfigError(f"{p}: no such directory")
    if kind == "file" and not p.is_file():
        raise ConfigError(f"{p}: no such file")
    if kind == "any" and not p.exists():
        raise ConfigError(f"{p}: no such file or directory")
    return p


def _wav_files(root) -> list[tuple[Path, str]]:
    """(path, source_id) pairs; ids are paths relative to the input root."""
    root = _existing(root, "any")
    if root.is_file():
        return [(root, root.name)]
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() == ".wav")
    return [(p, p.relative_to(root).as_posix()) for p in files]


def _load(path, source_id, run=None):
    clip = dsp.load_audio(path)
    clip.source_id = source_id
    if run:
        run.add_input(path)
    return clip


def _params(args) -> dsp.SpectrogramParams:
    return dsp.SpectrogramParams(args.window, args.hop, args.fft_size, getattr(args, "scale", "magnitude"))


def _check_params(args):
    p = _params(args)
    n = p.fft_size
    if n < 2 or n & (n - 1):
        raise ConfigError(f"--fft-size must be a power of two, got {n}")
    return p


def _windows_for(clip, params, hop):
    spec = dsp.stft(clip, params)
    if spec.n_frames < dsp.WINDOW_FRAMES:
        log.warning("%s: %d frames, shorter than one window; skipped", clip.source_id, spec.n_frames)
        return []
    return dsp.extract_windows(spec, dsp.WINDOW_FRAMES, hop)


def read_label_manifest(path):
    """Rows of (path, start_seconds, end_seconds, label); paths relative to the CSV."""
    path = _existing(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"path", "start_seconds", "end_seconds", "label"}
        if not reader.fieldnames or not need <= set(reader.fieldnames):
            raise ConfigError(f"{path}: label manifest needs columns {sorted(need)}")
        rows = []
        for r in reader:
            p = Path(r["path"])
            if not p.is_absolute():
                p = path.parent / p
            rows.append((p, r["path"], float(r["start_seconds"]), float(r["end_seconds"]), r["label"]))
    return rows


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _figure(args, fn, *a, **kw):
    if getattr(args, "figures", True):
        fn(*a, **kw)
        return True
    return False


# subcommands


def cmd_spectrogram(args):
    params = _check_params(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in args.inputs:
        _existing(p)
    run = RunManifest("spectrogram", args)
    for p in args.inputs:
        p = Path(p)
        clip = _load(p, p.name, run)
        spec = dsp.stft(clip, params)
        target = out / f"{p.stem}.csv"
        spec.to_csv(target)
        run.add_output(target)
        png = out / f"{p.stem}.png"
        if _figure(args, plotting.plot_spectrogram, spec.frames, png, clip.sample_rate,
                   params.hop_seconds, p.name):
            run.add_output(png)
    run.write(out / "manifest.json")
    print(f"wrote {len(args.inputs)} spectrogram(s) to {out}")


def cmd_synth(args):
    out = Path(args.out)
    clips_dir = out / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)
    run = RunManifest("synth", args)
    recipe = {"noise": args.noise, "whistle": args.whistle, "click": args.click, "burst": args.burst}
    rows = []
    if any(recipe.values()):
        for lc in dsp.synthesize_corpus(args.seed, recipe, args.duration, args.sample_rate):
            name = lc.clip.source_id + ".wav"
            dsp.save_wav(clips_dir / name, lc.clip.samples, lc.clip.sample_rate)
            rows.append((f"clips/{name}", 0.0, repr(lc.clip.duration), lc.label))
        _write_csv(out / "labels.csv", ["path", "start_seconds", "end_seconds", "label"], rows)
        run.add_output(out / "labels.csv")
    if args.recordings:
        rec_dir = out / "recordings"
        rec_dir.mkdir(exist_ok=True)
        truth = []
        rng = np.random.default_rng([args.seed, 2011])
        for r in range(args.recordings):
            segments, total = [], 0.0
            while total < args.recording_seconds:
                gap = float(rng.uniform(1.0, 4.0))
                label = str(rng.choice(dsp.CLASSES[1:]))
                length = float(rng.uniform(0.75, 1.5))
                segments += [("noise", gap), (label, length)]
                total += gap + length
            segments.append(("noise", 1.0))
            clip, gt = dsp.synthesize_recording(args.seed * 1000 + r, segments, args.sample_rate,
                                                source_id=f"rec_{r:03d}.wav")
            dsp.save_wav(rec_dir / clip.source_id, clip.samples, clip.sample_rate)
            truth += [(f"recordings/{clip.source_id}", a / clip.sample_rate, b / clip.sample_rate, lab)
                      for lab, a, b in gt]
        _write_csv(rec_dir / "truth.csv", ["path", "start_seconds", "end_seconds", "label"], truth)
        run.add_output(rec_dir / "truth.csv")
    if not rows and not args.recordings:
        raise ConfigError("nothing to synthesize: all class counts and --recordings are zero")
    run.write(out / "manifest.json")
    print(f"wrote {len(rows)} clip(s) and {args.recordings} recording(s) to {out}")


def _encoder_config(args) -> mdl.EncoderConfig:
    return mdl.EncoderConfig(
        num_filters=args.filters, kernel_time=args.kernel_time, kernel_freq=args.kernel_freq,
        bilstm_hidden=args.hidden, embedding_dim=args.embedding, decoder_hidden=args.hidden,
        decoder_activation=args.decoder_activation,
    )


def cmd_train_ae(args):
    params = _check_params(args)
    files = _wav_files(args.input)
    if not files:
        raise ConfigError(f"{args.input}: no .wav files found")
    run = RunManifest("train-ae", args)
    windows = []
    for path, sid in files:
        windows += _windows_for(_load(path, sid, run), params, args.window_hop)
    if not windows:
        raise EmptyDataset("no input file is long enough for a 128-frame window")
    X = np.stack([w.values for w in windows]).astype(np.float32)
    model = mdl.build_autoencoder(_encoder_config(args), X.shape[2], seed=args.seed)
    cfg = trn.TrainConfig(batch_size=args.batch, epochs=args.epochs, learning_rate=args.lr,
                          seed=args.seed)
    log.info("training on %d windows of %d x %d", len(X), X.shape[1], X.shape[2])
    model, history = trn.train_autoencoder(
        X, model, cfg, on_epoch=lambda e, l: log.info("epoch %d/%d mse %.5f", e + 1, cfg.epochs, l))

    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    stem = ckpt.with_suffix("")
    mdl.save_checkpoint(model, ckpt)
    run.add_output(ckpt)
    trn.write_loss_csv(run.add_output(Path(f"{stem}_loss.csv")), history)
    mdl.export_first_layer_kernels(model, run.add_output(Path(f"{stem}_kernels.pgm")))
    if args.figures:
        plotting.plot_loss(history, run.add_output(Path(f"{stem}_loss.png")))
        img, _, _ = mdl.kernel_grid(model.encoder.conv_kernel.data)
        plotting.plot_kernel_grid(img, run.add_output(Path(f"{stem}_kernels.png")))
        sample = X[:4]
        with tn.no_grad():
            recon = model(tn.Tensor(sample)).data
        plotting.plot_reconstructions(sample, recon, run.add_output(Path(f"{stem}_reconstructions.png")))
    run.write(Path(f"{stem}.manifest.json"))
    print(f"final mse {history[-1]:.5f}; checkpoint {ckpt}")


def _head_classes(task, labels, negative):
    if task == "detect":
        return (negative, "signal")
    known = [c for c in dsp.CLASSES if c in labels]
    return tuple(known + sorted(set(labels) - set(known)))


def cmd_train_head(args):
    params = _check_params(args)
    rows = read_label_manifest(args.labels)
    base = mdl.load_checkpoint(_existing(args.base))
    run = RunManifest("train-head", args)
    run.add_input(args.labels)
    run.add_input(args.base)
    cache = {}
    labeled = []
    for path, rel, start, end, label in rows:
        if rel not in cache:
            cache[rel] = _load(_existing(path), rel, run)
        clip = cache[rel]
        a, b = int(round(start * clip.sample_rate)), int(round(end * clip.sample_rate))
        seg = dsp.AudioClip(clip.samples[a:b], clip.sample_rate, f"{rel}@{start:g}")
        if args.task == "detect":
            label = args.negative_label if label == args.negative_label else "signal"
        labeled += [(w.values.astype(np.float32), label) for w in _windows_for(seg, params, args.window_hop)]
    if not labeled:
        raise EmptyDataset("no labeled segment is long enough for a 128-frame window")
    labels = [l for _, l in labeled]
    if len(set(labels)) < 2:
        raise SingleClassDataset(f"only one class present: {labels[0]!r}")
    classes = _head_classes(args.task, labels, args.negative_label)
    train_set, test_set = trn.split_dataset(labeled, args.train_fraction, seed=args.seed)
    head = mdl.HeadConfig(task=args.task, classes=classes, freeze_policy=args.freeze)
    clf = mdl.attach_head(base, head, seed=args.seed)
    cfg = trn.TrainConfig(batch_size=args.batch, epochs=args.epochs, learning_rate=args.lr,
                          seed=args.seed, freeze_policy=args.freeze)
    clf, history = trn.train_head(
        train_set, clf, cfg, on_epoch=lambda e, l: log.info("epoch %d/%d loss %.5f", e + 1, cfg.epochs, l))
    cm = trn.evaluate(clf, test_set, threshold=args.threshold)

    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    stem = ckpt.with_suffix("")
    mdl.save_checkpoint(clf, run.add_output(ckpt))
    cm.to_csv(run.add_output(Path(f"{stem}_confusion.csv")))
    trn.write_loss_csv(run.add_output(Path(f"{stem}_loss.csv")), history)
    if args.figures:
        plotting.plot_confusion(cm, run.add_output(Path(f"{stem}_confusion.png")))
        plotting.plot_loss(history, run.add_output(Path(f"{stem}_loss.png")), title="head loss")
    run.write(Path(f"{stem}.manifest.json"))
    print(f"test accuracy {cm.accuracy:.4f} ({int(np.trace(cm.counts))}/{cm.total})")


def _embed_files(args, files, encoder, detector, run, params):
    vectors, prov = [], []
    for path, sid in files:
        clip = _load(path, sid, run)
        if detector is not None:
            try:
                windows, scores = mining.sweep(clip, detector, args.window_hop, params)
            except ClipTooShort:
                log.warning("%s: shorter than one window; skipped", sid)
                continue
            windows = [w for w, s in zip(windows, scores) if s >= args.threshold]
        else:
            windows = _windows_for(clip, params, args.window_hop)
        if windows:
            vectors.append(mdl.embed_windows(encoder, np.stack([w.values for w in windows])))
            prov += [(sid, w.start_frame) for w in windows]
    if not prov:
        return None
    return mining.EmbeddingSet(np.concatenate(vectors), prov)


def cmd_embed(args):
    params = _check_params(args)
    files = _wav_files(args.input)
    if not files:
        raise ConfigError(f"{args.input}: no .wav files found")
    run = RunManifest("embed", args)
    encoder = mdl.load_checkpoint(_existing(args.model))
    run.add_input(args.model)
    detector = None
    if args.detector:
        detector = mdl.load_checkpoint(_existing(args.detector))
        run.add_input(args.detector)
    emb = _embed_files(args, files, encoder, detector, run, params)
    if emb is None:
        raise EmptyDataset("no windows to embed")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mining.write_embeddings_csv(run.add_output(out), emb)
    if args.binary:
        tn.save_tensors(run.add_output(Path(args.binary)), {"embeddings": emb.vectors.astype(np.float32)})
    run.write(Path(f"{out}.manifest.json"))
    print(f"embedded {len(emb)} window(s)")


def _cluster(emb, args):
    cm = mining.kmeans(emb, k=args.k, max_iters=args.max_iters, seed=args.seed)
    s = mining.silhouette(emb, cm.assignments)
    keep, _ = mining.filter_by_median_silhouette(emb, cm.assignments, s)
    log.info("k-means: %d iterations, inertia %.4g; %d of %d windows at or above median silhouette",
             cm.n_iter, cm.inertia, len(keep), len(emb))
    return cm, s, keep


def cmd_cluster(args):
    emb = mining.read_embeddings_csv(_existing(args.embeddings))
    run = RunManifest("cluster", args)
    run.add_input(args.embeddings)
    cm, s, keep = _cluster(emb, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mining.write_assignments_csv(run.add_output(out / "assignments.csv"), emb, cm.assignments, s)
    mining.write_assignments_csv(run.add_output(out / "retained.csv"), emb.subset(keep),
                                 cm.assignments[keep], s[keep])
    _write_csv(run.add_output(out / "inertia.csv"), ["iteration", "inertia"],
               [(i, repr(v)) for i, v in enumerate(cm.inertia_history)])
    run.write(out / "manifest.json")
    print(f"{len(emb)} windows in {args.k} clusters; {len(keep)} retained")


def _tsne_outputs(args, run, out, emb, assignments, fraction):
    layout = mining.tsne(emb, perplexity=args.perplexity, iters=args.tsne_iters, seed=args.seed)
    log.info("t-SNE KL %.4f (initial %.4f)", layout.kl, layout.initial_kl)
    mining.write_layout_csv(run.add_output(out / "layout.csv"), layout.coords, assignments)
    mining.render_scatter_svg(layout, assignments, run.add_output(out / "scatter.svg"),
                              sample_fraction=fraction, seed=args.seed)
    if args.figures:
        idx = mining.sample_indices(len(emb), fraction, args.seed)
        plotting.plot_layout(layout.coords, assignments, run.add_output(out / "scatter.png"), idx)
    return layout


def cmd_tsne(args):
    emb = mining.read_embeddings_csv(_existing(args.embeddings))
    run = RunManifest("tsne", args)
    run.add_input(args.embeddings)
    assignments = np.zeros(len(emb), dtype=np.int64)
    if args.assignments:
        rows = mining.read_assignments_csv(_existing(args.assignments))
        run.add_input(args.assignments)
        index = {p: i for i, p in enumerate(emb.provenance)}
        missing = [(s, f) for s, f, _, _ in rows if (s, f) not in index]
        if missing:
            raise ConfigError(f"{len(missing)} assignment row(s) have no embedding, e.g. {missing[0]}")
        emb = emb.subset([index[(s, f)] for s, f, _, _ in rows])
        assignments = np.array([c for _, _, c, _ in rows], dtype=np.int64)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layout = _tsne_outputs(args, run, out, emb, assignments, args.sample_fraction)
    run.write(out / "manifest.json")
    print(f"t-SNE over {len(emb)} points, KL {layout.kl:.4f}")


def cmd_detect(args):
    params = _check_params(args)
    files = _wav_files(args.input)
    if not files:
        raise ConfigError(f"{args.input}: no .wav files found")
    detector = mdl.load_checkpoint(_existing(args.detector))
    run = RunManifest("detect", args)
    run.add_input(args.detector)
    rows = []
    for path, sid in files:
        clip = _load(path, sid, run)
        H = params.hop_length(clip.sample_rate)
        W = params.window_length(clip.sample_rate)
        for r in mining.detect_regions(clip, detector, args.window_hop, args.threshold, params):
            end_s = ((r.end_frame - 1) * H + W) / clip.sample_rate
            rows.append((sid, r.start_frame, r.end_frame, repr(r.start_frame * H / clip.sample_rate),
                         repr(end_s), repr(r.score)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(run.add_output(out),
               ["source_id", "start_frame", "end_frame", "start_seconds", "end_seconds", "score"], rows)
    run.write(Path(f"{out}.manifest.json"))
    print(f"{len(rows)} region(s) across {len(files)} file(s)")


def _export(out_dir, members_by_cluster, clips, args, run, params):
    out_dir.mkdir(parents=True, exist_ok=True)
    for c in sorted(members_by_cluster):
        path = out_dir / f"cluster_{c:03d}.wav"
        mining.export_cluster_wav(members_by_cluster[c], clips, path, args.gap, params)
        run.add_output(path)


def cmd_mine(args):
    params = _check_params(args)
    files = _wav_files(args.input)
    if not files:
        raise ConfigError(f"{args.input}: no .wav files found")
    run = RunManifest("mine", args)
    detector = mdl.load_checkpoint(_existing(args.detector))
    encoder = mdl.load_checkpoint(_existing(args.encoder))
    run.add_input(args.detector)
    run.add_input(args.encoder)
    emb = _embed_files(args, files, encoder, detector, run, params)
    if emb is None:
        raise EmptyDataset("the detector accepted no windows")
    log.info("%d windows classified as signal", len(emb))
    cm, s, keep = _cluster(emb, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mining.write_embeddings_csv(run.add_output(out / "embeddings.csv"), emb)
    mining.write_assignments_csv(run.add_output(out / "assignments.csv"), emb, cm.assignments, s)
    kept = emb.subset(keep)
    mining.write_assignments_csv(run.add_output(out / "retained.csv"), kept, cm.assignments[keep], s[keep])
    if args.tsne:
        _tsne_outputs(args, run, out, kept, cm.assignments[keep], args.sample_fraction)
    if args.export_wavs:
        clips = {sid: _load(path, sid) for path, sid in files}
        groups = {}
        for p, c in zip(kept.provenance, cm.assignments[keep]):
            groups.setdefault(int(c), []).append(p)
        _export(out / "clusters", groups, clips, args, run, params)
    run.write(out / "manifest.json")
    print(f"{len(emb)} windows, {args.k} clusters, {len(keep)} retained -> {out}")


def cmd_export_clusters(args):
    params = _check_params(args)
    rows = mining.read_assignments_csv(_existing(args.assignments))
    root = _existing(args.wav_dir, "dir")
    run = RunManifest("export-clusters", args)
    run.add_input(args.assignments)
    clips = {}
    groups = {}
    for sid, frame, c, _ in rows:
        if sid not in clips:
            path = root / sid
            if path.is_file():
                clips[sid] = _load(path, sid, run)
        groups.setdefault(c, []).append((sid, frame))
    out = Path(args.out)
    _export(out, groups, clips, args, run, params)
    run.write(out / "manifest.json")
    print(f"wrote {len(groups)} cluster file(s) to {out}")


def cmd_render_kernels(args):
    model = mdl.load_checkpoint(_existing(args.model))
    run = RunManifest("render-kernels", args)
    run.add_input(args.model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = mdl.export_first_layer_kernels(model, run.add_output(out), scale=args.scale)
    if args.figures:
        img, _, _ = mdl.kernel_grid(model.encoder.conv_kernel.data, scale=args.scale)
        plotting.plot_kernel_grid(img, run.add_output(out.with_suffix(".png")))
    run.write(Path(f"{out}.manifest.json"))
    print(f"{rows} x {cols} kernel grid -> {out}")


# parser


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads (default $FINMINE_THREADS); 1 guarantees bit-reproducibility")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--no-figures", dest="figures", action="store_false",
                   help="skip the matplotlib report figures")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _stft_opts(p):
    p.add_argument("--fft-size", type=int, default=512)
    p.add_argument("--window", type=float, default=0.01, help="analysis window in seconds")
    p.add_argument("--hop", type=float, default=0.005, help="frame hop in seconds")
    p.add_argument("--scale", choices=("magnitude", "power", "log"), default="magnitude")
    p.add_argument("--window-hop", type=int, default=64, help="hop between 128-frame windows")


def _model_opts(p):
    p.add_argument("--filters", type=int, default=256)
    p.add_argument("--kernel-time", type=int, default=4)
    p.add_argument("--kernel-freq", type=int, default=8)
    p.add_argument("--hidden", type=int, default=128, help="LSTM units per direction")
    p.add_argument("--embedding", type=int, default=128)
    p.add_argument("--decoder-activation", choices=("linear", "relu", "tanh"), default="linear")


def _mine_opts(p):
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--max-iters", type=int, default=1024)


def _tsne_opts(p, fraction):
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--tsne-iters", type=int, default=1000)
    p.add_argument("--sample-fraction", type=float, default=fraction)


def build_parser():
    parser = argparse.ArgumentParser(prog="finmine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        _common(p)
        subs[name] = p
        return p

    p = add("spectrogram", cmd_spectrogram, "WAV files to spectrogram CSVs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    _stft_opts(p)

    p = add("synth", cmd_synth, "write a synthetic labeled corpus and long recordings")
    p.add_argument("--out", required=True)
    for c in dsp.CLASSES:
        p.add_argument(f"--{c}", type=int, default=0, help=f"number of {c} clips")
    p.add_argument("--duration", type=float, default=0.75)
    p.add_argument("--sample-rate", type=int, default=44100)
    p.add_argument("--recordings", type=int, default=0)
    p.add_argument("--recording-seconds", type=float, default=30.0)

    p = add("train-ae", cmd_train_ae, "train the autoencoder on a directory of WAVs")
    p.add_argument("input")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--batch", type=int, default=50)
    p.add_argument("--epochs", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    _stft_opts(p)
    _model_opts(p)

    p = add("train-head", cmd_train_head, "train a detection or classification head")
    p.add_argument("labels", help="CSV with path,start_seconds,end_seconds,label")
    p.add_argument("--base", required=True, help="autoencoder checkpoint")
    p.add_argument("--task", choices=("detect", "classify"), required=True)
    p.add_argument("--freeze", choices=mdl.FREEZE_POLICIES, default="except-last-lstm")
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--train-fraction", type=float, default=0.6)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--negative-label", default="noise")
    _stft_opts(p)

    p = add("embed", cmd_embed, "embed windows of WAV files")
    p.add_argument("input")
    p.add_argument("--model", required=True)
    p.add_argument("--detector")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", help="also write embeddings in the checkpoint container")
    _stft_opts(p)

    p = add("cluster", cmd_cluster, "k-means++ with silhouette filtering")
    p.add_argument("embeddings")
    p.add_argument("--out", required=True)
    _mine_opts(p)

    p = add("tsne", cmd_tsne, "2-D t-SNE map")
    p.add_argument("embeddings")
    p.add_argument("--assignments")
    p.add_argument("--out", required=True)
    _tsne_opts(p, 1.0)

    p = add("detect", cmd_detect, "sweep a detector over recordings")
    p.add_argument("input")
    p.add_argument("--detector", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    _stft_opts(p)

    p = add("mine", cmd_mine, "detect, embed, cluster, filter, map and export")
    p.add_argument("input")
    p.add_argument("--detector", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--tsne", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--export-wavs", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--gap", type=float, default=0.25, help="seconds of silence between members")
    _stft_opts(p)
    _mine_opts(p)
    _tsne_opts(p, 0.25)

    p = add("export-clusters", cmd_export_clusters, "one WAV per cluster")
    p.add_argument("assignments")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gap", type=float, default=0.25)
    _stft_opts(p)

    p = add("render-kernels", cmd_render_kernels, "first-layer kernel grid (.pgm or .svg)")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=4)

    return parser, subs


def read_config(path) -> dict:
    cfg = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        cfg[k.replace("-", "_")] = v
    return cfg


def _apply_config(sub, cfg):
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in cfg.items():
        a = actions.get(k)
        if a is None:
            raise ConfigError(f"unknown config key {k!r} for this command")
        if a.nargs == 0 or isinstance(a, argparse.BooleanOptionalAction):
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            defaults[k] = v
    sub.set_defaults(**defaults)


def _threads(n):
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config and argv and argv[0] in subs:
            _apply_config(subs[argv[0]], read_config(known.config))
    except ConfigError as exc:
        print(f"finmine: error: {exc}", file=sys.stderr)
        return exc.exit_code
    args = parser.parse_args(argv)
    if args.threads is None and os.environ.get("FINMINE_THREADS"):
        args.threads = int(os.environ["FINMINE_THREADS"])
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.threads):
            args.func(args)
    except FinmineError as exc:
        print(f"finmine: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
