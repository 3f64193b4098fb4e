"""Command-line pipeline: featurize, cluster, pretrain, probe, analyze.

Every subcommand is deterministic given --seed, writes its outputs plus a
``run_manifest.json`` recording the resolved options, package version and
input digests, and exits 0 only when all outputs were written.  An optional
``--config`` file supplies ``key=value`` defaults (keys are long flag names
with dashes or underscores); explicit flags take precedence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, evaluation, features, kmeans, synth, training
from .model import build_model
from .numerics import Rng, grad_check
from .objectives import (
    Batch,
    GumbelConfig,
    apc_loss,
    cotrain_exact_loss,
    cotrain_gumbel_loss,
    gumbel_softmax,
    hubert_like_loss,
    vq_apc_loss,
)
from .training import TrainConfig, load_checkpoint, train


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out_dir, command: str, args: argparse.Namespace,
                        inputs: list, outputs: list) -> None:
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "config")
    }
    manifest = {
        "command": command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "options": resolved,
        "input_digests": {str(p): _sha256(p) for p in inputs if Path(p).exists()},
        "outputs": [str(o) for o in outputs],
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _load_labeled(manifest_path, alignment_path):
    seqs = features.archive_read(manifest_path)
    labels = features.read_alignments(alignment_path)
    return seqs, labels


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = synth.default_config(
        seed=args.seed, n_states=args.states, dim=args.dim,
        self_bias=args.self_bias, noise_sigma=args.sigma,
        separation_factor=args.sep_factor, min_len=args.min_len,
        max_len=args.max_len,
    )
    seqs, alignments = synth.generate(cfg, args.utterances)
    out = Path(args.out_dir)
    manifest = features.archive_write(seqs, out)
    features.write_alignments(out / "alignments.tsv", alignments)
    features.write_phone_inventory(out / "phones.tsv",
                                   [f"s{i}" for i in range(cfg.n_states)])
    features.write_feature_file(out / "oracle_codebook.ftr", synth.oracle_codebook(cfg))
    _write_run_manifest(out, "synth", args, [],
                        [manifest, out / "alignments.tsv", out / "phones.tsv"])
    print(f"wrote {len(seqs)} utterances to {out}")
    return 0


def cmd_featurize(args) -> int:
    lines = Path(args.wav_manifest).read_text(encoding="utf-8").splitlines()
    entries = [ln.split("\t") for ln in lines if ln.strip()]
    root = Path(args.wav_manifest).parent

    def featurize_one(entry):
        utt_id, rel = entry
        path = root / rel
        samples, rate = features.wav_read(path)
        frames = features.log_mel(
            samples, rate, window_ms=args.window_ms, hop_ms=args.hop_ms,
            n_mels=args.mels, pre_emphasis=args.pre_emphasis,
        )
        return features.FeatureSequence(utt_id, frames, args.hop_ms), rate

    results, failures, rates = [], [], set()
    workers = max(1, args.threads)
    if workers == 1:
        outcomes = map(featurize_one, entries)
    else:
        pool = ThreadPoolExecutor(max_workers=workers)
        outcomes = pool.map(featurize_one, entries)
    for entry, outcome in zip(entries, _collect(outcomes, entries)):
        if isinstance(outcome, Exception):
            print(f"error: {entry[0]}: {outcome}", file=sys.stderr)
            failures.append(entry[0])
        else:
            seq, rate = outcome
            results.append(seq)
            rates.add(rate)
    if len(rates) > 1:
        print(f"error: sample rate mismatch across dataset: {sorted(rates)}",
              file=sys.stderr)
        return 1
    if not results:
        print("error: no utterance featurized", file=sys.stderr)
        return 1

    if args.fit_stats:
        stats = features.compute_norm_stats(results)
        features.save_norm_stats(args.fit_stats, stats)
    elif args.stats:
        stats = features.load_norm_stats(args.stats)
    else:
        stats = None
    if stats is not None:
        results = [features.normalize(s, stats) for s in results]

    out = Path(args.out_dir)
    manifest = features.archive_write(results, out)
    _write_run_manifest(out, "featurize", args, [args.wav_manifest], [manifest])
    print(f"featurized {len(results)} utterances ({len(failures)} failed)")
    return 1 if failures else 0


def _collect(outcomes, entries):
    it = iter(outcomes)
    for _ in entries:
        try:
            yield next(it)
        except StopIteration:
            return
        except Exception as exc:  # per-file failure, reported by caller
            yield exc


def cmd_kmeans(args) -> int:
    seqs = features.archive_read(args.features)
    rng = Rng(args.seed)
    n_init = min(args.init_utterances, len(seqs))
    picked = [seqs[i] for i in rng.permutation(len(seqs))[:n_init]]
    sample_frames = np.concatenate([s.frames for s in picked], axis=0).astype(np.float64)
    if sample_frames.shape[0] < args.clusters:
        print(f"error: {args.clusters} clusters but only "
              f"{sample_frames.shape[0]} frames", file=sys.stderr)
        return 1
    if args.full_lloyd:
        lloyd_frames = np.concatenate([s.frames for s in seqs], axis=0).astype(np.float64)
    else:
        lloyd_frames = sample_frames
    init = kmeans.kmeanspp_init(sample_frames, args.clusters, rng)
    result = kmeans.lloyd(lloyd_frames, init, iters=args.iters)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    features.write_feature_file(out / "centroids.ftr", result.centroids)
    targets = kmeans.assign_targets(seqs, result.centroids)
    features.write_alignments(out / "targets.tsv", targets)
    obj_lines = ["iteration,objective"] + [
        f"{i},{obj!r}" for i, obj in enumerate(result.history)
    ]
    (out / "objective.csv").write_text("\n".join(obj_lines) + "\n", encoding="utf-8")
    _write_run_manifest(out, "kmeans", args, [args.features],
                        [out / "centroids.ftr", out / "targets.tsv"])
    print(f"k-means objective: {result.objective:.6g} "
          f"({len(result.history) - 1} iterations run)")
    return 0


def cmd_pretrain(args) -> int:
    seqs = features.archive_read(args.features)
    cfg = TrainConfig(
        variant=args.variant, seed=args.seed, lr=args.lr, batch_size=args.batch,
        epochs=args.epochs, n_codes=args.codebook_size, shift=args.shift,
        frame_dim=seqs[0].frames.shape[1], hidden_dim=args.hidden,
        layers=args.layers, tau_start=args.tau_start, tau_end=args.tau_end,
        tau_decay=args.tau_decay, vq_codeword_dim=args.vq_dim,
        grad_clip=args.grad_clip,
    )
    targets = centroids = None
    inputs = [args.features]
    if args.variant == "hubert-like":
        if not args.targets or not args.centroids:
            print("error: hubert-like needs --targets and --centroids",
                  file=sys.stderr)
            return 1
        targets = features.read_alignments(args.targets)
        centroids = features.read_feature_file(args.centroids)
        inputs += [args.targets, args.centroids]
    out = Path(args.out_dir)
    ckpt = train(cfg, seqs, targets=targets, centroids=centroids,
                 out_dir=out, resume_from=args.resume)
    if args.resume:
        inputs.append(args.resume)
    _write_run_manifest(out, "pretrain", args, inputs,
                        [out / "latest.ckpt", out / "loss_log.csv"])
    if ckpt.history:
        last = ckpt.history[-1]
        print(f"epoch {last['epoch']}: objective {last['objective']:.4f}")
    else:
        print("initialization checkpoint written (0 epochs)")
    return 0


def cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    train_seqs, train_labels = _load_labeled(args.train_features, args.train_alignments)
    eval_seqs, eval_labels = _load_labeled(args.eval_features, args.eval_alignments)
    phones = features.read_phone_inventory(args.phones)
    result = evaluation.probe_train(
        ckpt.model, args.layer, train_seqs, train_labels, eval_seqs, eval_labels,
        num_phones=len(phones), lr=args.lr, epochs=args.epochs,
        batch_size=args.batch, seed=args.seed,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.csv").write_text(evaluation.probe_result_csv(result), encoding="utf-8")
    (out / "confusion.csv").write_text(
        evaluation.confusion_csv(result, phones), encoding="utf-8"
    )
    _write_run_manifest(
        out, "probe", args,
        [args.checkpoint, args.train_features, args.eval_features, args.phones],
        [out / "probe.csv", out / "confusion.csv"],
    )
    print(f"layer {result.layer} frame error rate: {result.per:.4f} "
          f"({result.n_frames} frames)")
    return 0


def cmd_codes(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    seqs, labels = _load_labeled(args.features, args.alignments)
    phones = features.read_phone_inventory(args.phones)
    matrix = evaluation.code_phone_matrix(
        ckpt.model, seqs, labels, source=args.source, num_phones=len(phones)
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "code_phone.csv").write_text(
        evaluation.code_phone_csv(matrix, phones), encoding="utf-8"
    )
    _write_run_manifest(out, "codes", args,
                        [args.checkpoint, args.features, args.alignments,
                         args.phones],
                        [out / "code_phone.csv"])
    print(f"{args.source} code purity: {evaluation.purity(matrix):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.variant, args.seed, epsilon=args.epsilon)
    print(report)
    ok = report.max_rel_err < args.tol
    print(f"max relative error {report.max_rel_err:.3e} "
          f"({'OK' if ok else 'FAIL'} at tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_eval_loss(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    seqs = features.archive_read(args.features)
    rows = evaluation.dataset_objective(ckpt.model, seqs, ckpt.config.variant)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["utt_id,frames,objective,marginal"]
    for r in rows:
        marg = "" if r["marginal"] is None else repr(r["marginal"])
        lines.append(f"{r['utt_id']},{r['frames']},{r['objective']!r},{marg}")
    (out / "eval_loss.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_run_manifest(out, "eval-loss", args, [args.checkpoint, args.features],
                        [out / "eval_loss.csv"])
    total = sum(r["frames"] for r in rows)
    mean_obj = sum(r["objective"] * r["frames"] for r in rows) / total
    print(f"mean per-frame objective: {mean_obj:.4f} over {total} frames")
    if rows[0]["marginal"] is not None:
        mean_marg = sum(r["marginal"] * r["frames"] for r in rows) / total
        print(f"mean per-frame marginal log-likelihood: {mean_marg:.4f}")
    return 0


def run_gradcheck(variant: str, seed: int, epsilon: float = 1e-5,
                  coords_per_block: int = 200):
    """Finite-difference check of a variant's loss on a tiny float64 model.

    Gumbel variants are checked with straight-through disabled and pinned
    noise: the straight-through estimator is deliberately not the derivative
    of its own hard forward value, so only the soft relaxation is a
    differentiable target.
    """
    from .model import LatentConfig

    rng = Rng(seed)
    dim, n_codes, hidden, layers, t_len, shift, n_utts = 4, 5, 8, 2, 12, 2, 2
    cfg = LatentConfig(n_codes=n_codes, shift=shift, frame_dim=dim,
                       hidden_dim=hidden, layers=layers)
    x = rng.normal(size=(n_utts, t_len, dim))
    lengths = np.full(n_utts, t_len)
    batch = Batch(x=x, lengths=lengths, utt_ids=[f"u{i}" for i in range(n_utts)])

    init_frames = x.reshape(-1, dim)
    if variant == "hubert-like":
        centroids = init_frames[rng.permutation(init_frames.shape[0])[:n_codes]]
        model = build_model(cfg, variant, rng, centroids=centroids, dtype=np.float64)
        targets = kmeans.assign_targets(
            [features.FeatureSequence(f"u{i}", x[i]) for i in range(n_utts)],
            model.codebook,
        )
        batch = Batch(x=x, lengths=lengths, utt_ids=[f"u{i}" for i in range(n_utts)],
                      targets=np.stack([targets[f"u{i}"] for i in range(n_utts)]))
    else:
        model = build_model(cfg, variant, rng, init_frames=init_frames,
                            vq_codeword_dim=6, dtype=np.float64)

    n_anchors = n_utts * (t_len - shift)
    noise = np.asarray(Rng(seed + 1).uniform(size=(n_anchors, n_codes)))
    noise = -np.log(-np.log(np.clip(noise, 1e-12, 1 - 1e-12)))
    gcfg = GumbelConfig(temperature=0.8, straight_through=False)

    def loss_fn(params):
        m = model.with_blocks(params)
        if variant == "cotrain-exact":
            bd, grads = cotrain_exact_loss(batch, m)
        elif variant == "cotrain-gumbel":
            bd, grads = cotrain_gumbel_loss(batch, m, gcfg, noise=noise)
        elif variant == "hubert-like":
            bd, grads = hubert_like_loss(batch, m)
        elif variant == "vq-apc":
            bd, grads = vq_apc_loss(batch, m, gcfg, noise=noise)
        elif variant == "apc":
            bd, grads = apc_loss(batch, m)
        else:
            raise ValueError(f"unknown variant '{variant}'")
        return bd.total, {k: grads[k] for k in m.trainable_blocks()}

    return grad_check(loss_fn, dict(model.trainable_blocks()), epsilon=epsilon,
                      rng=Rng(seed + 2), coords_per_block=coords_per_block)


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotrain",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", help="key=value defaults file; flags win")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus",
                       formatter_class=fmt)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--utterances", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--states", type=int, default=8)
    p.add_argument("--dim", type=int, default=40)
    p.add_argument("--self-bias", type=float, default=0.7)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--sep-factor", type=float, default=6.0)
    p.add_argument("--min-len", type=int, default=80)
    p.add_argument("--max-len", type=int, default=160)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="WAV manifest -> normalized log-Mel archive",
                       formatter_class=fmt)
    p.add_argument("--wav-manifest", required=True,
                   help="TSV: utt_id<TAB>wav path relative to the manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stats", help="apply existing normalization stats (FTR1)")
    p.add_argument("--fit-stats", help="fit stats on this set, save here, apply")
    p.add_argument("--window-ms", type=float, default=25.0)
    p.add_argument("--hop-ms", type=float, default=10.0)
    p.add_argument("--mels", type=int, default=40)
    p.add_argument("--pre-emphasis", type=float, default=0.0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("kmeans", help="k-means++ + Lloyd -> centroids and targets",
                       formatter_class=fmt)
    p.add_argument("--features", required=True, help="feature manifest TSV")
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--init-utterances", type=int, default=3000)
    p.add_argument("--full-lloyd", action="store_true",
                   help="run Lloyd over all frames, not just the sampled utterances")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_kmeans)

    p = sub.add_parser("pretrain", help="train one variant on a feature archive",
                       formatter_class=fmt)
    p.add_argument("--variant", required=True, choices=training.VARIANTS)
    p.add_argument("--features", required=True)
    p.add_argument("--codebook-size", type=int, default=256)
    p.add_argument("--shift", type=int, default=5)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--targets", help="hard targets TSV (hubert-like)")
    p.add_argument("--centroids", help="centroid FTR1 (hubert-like)")
    p.add_argument("--vq-dim", type=int, default=512,
                   help="codeword dimension for vq-apc")
    p.add_argument("--tau-start", type=float, default=2.0)
    p.add_argument("--tau-end", type=float, default=0.5)
    p.add_argument("--tau-decay", type=float, default=0.99995)
    p.add_argument("--grad-clip", type=float, default=0.0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap; 1 is the bit-exact deterministic mode")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear phone probe on frozen hidden states",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--train-features", required=True)
    p.add_argument("--train-alignments", required=True)
    p.add_argument("--eval-features", required=True)
    p.add_argument("--eval-alignments", required=True)
    p.add_argument("--phones", required=True, help="phone inventory TSV")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("codes", help="code/phone conditional probability matrix",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--alignments", required=True)
    p.add_argument("--phones", required=True)
    p.add_argument("--source", choices=("predictor", "confirmer"), default="confirmer")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_codes)

    p = sub.add_parser("gradcheck", help="finite-difference check of a variant's loss",
                       formatter_class=fmt)
    p.add_argument("--variant", required=True, choices=training.VARIANTS)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval-loss", help="per-frame objective and marginal on a dataset",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval_loss)

    return parser


def _read_config_file(path) -> dict:
    overrides = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed config line: {raw!r}")
        key, _, value = line.partition("=")
        overrides[key.strip().replace("-", "_")] = value.strip()
    return overrides


def _apply_config(ns: argparse.Namespace, overrides: dict, argv: list[str]) -> None:
    explicit = set()
    for token in argv:
        if token.startswith("--"):
            explicit.add(token[2:].split("=", 1)[0].replace("-", "_"))
    for key, raw in overrides.items():
        if key in explicit or not hasattr(ns, key):
            continue
        current = getattr(ns, key)
        if isinstance(current, bool):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        setattr(ns, key, value)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _apply_config(args, _read_config_file(args.config), argv)
    try:
        return args.func(args)
    except (ValueError, OSError, training.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
